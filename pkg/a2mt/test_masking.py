import unittest

import numpy as np

from a2mt.exceptions import ConfigurationError
from a2mt.masking import MaskSpec, expected_keep_rate, sample_mask


class TestMaskSpec(unittest.TestCase):
    def test_presets(self):
        self.assertEqual(MaskSpec.preset("m1").keep_prob, (0.2, 0.2))
        self.assertTrue(MaskSpec.preset("m1m2").use_max_timestep)
        self.assertTrue(MaskSpec.preset("m1m2m3").uses_drop)
        self.assertFalse(MaskSpec.preset("full").uses_drop)
        with self.assertRaises(ConfigurationError):
            MaskSpec.preset("m4")

    def test_validation(self):
        with self.assertRaises(ConfigurationError):
            MaskSpec(keep_prob=(1.2, 0.5))
        with self.assertRaises(ConfigurationError):
            MaskSpec(keep_prob=(0.5, 0.5), drop_prob=(0.5,))

    def test_expected_keep_rate(self):
        np.testing.assert_allclose(expected_keep_rate(MaskSpec.preset("m1"), 10), [0.2, 0.2])
        np.testing.assert_allclose(expected_keep_rate(MaskSpec.preset("m1m2"), 10), [0.2, 0.2])
        np.testing.assert_allclose(expected_keep_rate(MaskSpec.preset("m1m2m3"), 10), [0.1, 0.1])


class TestSampleMask(unittest.TestCase):
    def test_empirical_keep_rates(self):
        rng = np.random.default_rng(0)
        for name, target in (("m1", 0.2), ("m1m2", 0.2), ("m1m2m3", 0.1)):
            masks = sample_mask(MaskSpec.preset(name), 10, 2, rng, size=10000)
            rates = masks.mean(axis=(0, 1))
            for rate in rates:
                self.assertAlmostEqual(rate, target, delta=0.01, msg=name)

    def test_single_mask_shape(self):
        mask = sample_mask(MaskSpec.preset("m1"), 10, 2, np.random.default_rng(1))
        self.assertEqual(mask.shape, (10, 2))
        self.assertTrue(set(np.unique(mask)) <= {0, 1})

    def test_max_timestep_keeps_a_prefix(self):
        spec = MaskSpec(keep_prob=(1.0, 1.0), use_max_timestep=True)
        masks = sample_mask(spec, 10, 2, np.random.default_rng(2), size=5000)
        np.testing.assert_array_equal(masks[:, :, 0], masks[:, :, 1])
        self.assertTrue(np.all(np.diff(masks[:, :, 0], axis=1) <= 0))
        kept = masks[:, :, 0].sum(axis=1)
        self.assertEqual(set(kept.tolist()), set(range(11)))
        self.assertAlmostEqual(kept.mean(), 5.0, delta=0.2)

    def test_drop_removes_whole_modalities(self):
        spec = MaskSpec(keep_prob=(1.0, 1.0), drop_prob=(0.5, 0.0))
        masks = sample_mask(spec, 10, 2, np.random.default_rng(3), size=2000)
        per_mask = masks[:, :, 0].sum(axis=1)
        self.assertEqual(set(per_mask.tolist()), {0, 10})
        self.assertTrue(np.all(masks[:, :, 1] == 1))

    def test_full_keeps_everything(self):
        masks = sample_mask(MaskSpec.preset("full"), 10, 2, np.random.default_rng(4), size=10)
        self.assertTrue(np.all(masks == 1))

    def test_modality_mismatch(self):
        with self.assertRaises(ConfigurationError):
            sample_mask(MaskSpec.preset("m1", M=3), 10, 2, np.random.default_rng(0))

    def test_same_seed_same_masks(self):
        a = sample_mask(MaskSpec.preset("m1m2m3"), 10, 2, np.random.default_rng(9), size=50)
        b = sample_mask(MaskSpec.preset("m1m2m3"), 10, 2, np.random.default_rng(9), size=50)
        np.testing.assert_array_equal(a, b)
