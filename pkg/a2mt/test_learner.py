import os
import unittest

import numpy as np

from a2mt.autograd import Tensor, concat, parameter
from a2mt.environment import MISSING, BatchEpisode, CostSchedule, discounted_returns
from a2mt.evaluation import evaluate_policy, run_cost_sweep
from a2mt.exceptions import InputError, TrainingError
from a2mt.learner import (
    Adam,
    AgentPolicy,
    Classifier,
    TrainConfig,
    a2c_loss,
    a2c_rollout,
    a2c_train_step,
    build_architecture,
    check_dataset_fits,
    classifier_forward,
    encode_observed,
    grad_check,
    grad_check_details,
    gumbel_train_step,
    init_params,
    make_probe,
    new_params,
    policy_forward,
    policy_gradient_loss,
    prediction_features,
    pretrain_classifier,
    relative_errors,
    sample_batch,
    train_agent,
)
from a2mt.policies import NeverPolicy, OraclePolicy, RandomRatePolicy
from a2mt.synthgen import SyntheticConfig, sample_dataset

SLOW = os.environ.get("A2MT_SLOW_TESTS") == "1"
SYNTH = SyntheticConfig()


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _small_config(**kwargs):
    defaults = dict(steps=4, batch_size=16, hidden=(8,), log_every=0, pretrain_steps=3)
    defaults.update(kwargs)
    return TrainConfig(**defaults)


class TestArchitecture(unittest.TestCase):
    def test_baseline_block_only_for_actor_critic(self):
        rng = np.random.default_rng(0)
        joint = init_params(build_architecture(SYNTH, (8,), "gumbel_joint"), rng)
        self.assertEqual(joint.names(), ["classifier", "policy"])
        self.assertEqual(joint.to_vector().size, joint.blocks["classifier"].size + joint.blocks["policy"].size)
        a2c = init_params(build_architecture(SYNTH, (8,), "a2c"), rng)
        self.assertEqual(a2c.names(), ["classifier", "policy", "baseline"])
        self.assertEqual(a2c.span("baseline")[1], a2c.to_vector().size)
        with self.assertRaises(InputError):
            joint.span("baseline")

    def test_sizes(self):
        arch = build_architecture(SYNTH, (16, 16), "gumbel_joint")
        self.assertEqual(arch["num_classes"], 11)
        self.assertEqual(arch["cell_widths"], [4, 4])
        self.assertEqual(arch["enc_dim"], 80)
        self.assertEqual(arch["policy_in"], 80 + 20 + 10)
        cond = build_architecture(SYNTH, (16,), "a2c", predict_conditioning=True)
        self.assertEqual(cond["policy_in"], 80 + 20 + 10 + 12)
        self.assertTrue(cond["shared_trunk"])

    def test_encoding_has_one_channel_per_cell(self):
        arch = build_architecture(SYNTH)
        dataset = sample_dataset(SYNTH, 20, seed=0)
        rng = np.random.default_rng(0)
        observed = np.where(rng.random(dataset.values.shape) < 0.5, dataset.values, MISSING)
        enc = encode_observed(observed, arch).reshape(20, 10, 2, 4)
        np.testing.assert_array_equal(enc.sum(axis=3), np.ones((20, 10, 2)))
        np.testing.assert_array_equal(enc[..., 3] == 1, observed == MISSING)

    def test_encoding_shape_check(self):
        with self.assertRaises(InputError):
            encode_observed(np.zeros((2, 9, 2), dtype=int), build_architecture(SYNTH))

    def test_encoding_rejects_out_of_range_values(self):
        arch = build_architecture(SYNTH)
        observed = np.full((1, 10, 2), MISSING)
        observed[0, 0, 0] = 4
        with self.assertRaises(InputError):
            encode_observed(observed, arch)
        observed[0, 0, 0] = -2
        with self.assertRaises(InputError):
            encode_observed(observed, arch)

    def test_dataset_must_fit_architecture(self):
        arch = build_architecture(SYNTH, (8,), "a2c")
        check_dataset_fits(arch, SyntheticConfig(seed=3))
        for cfg in (SyntheticConfig(digit_high=4), SyntheticConfig(counter_high=3), SyntheticConfig(length=12)):
            with self.subTest(cfg=cfg), self.assertRaises(InputError):
                check_dataset_fits(arch, cfg)


class TestForward(unittest.TestCase):
    def setUp(self):
        self.dataset = sample_dataset(SYNTH, 32, seed=1)

    def test_fresh_classifier_is_uniform_on_missing_input(self):
        params = init_params(build_architecture(SYNTH, (16, 16)), np.random.default_rng(0))
        probs = classifier_forward(params, np.full((3, 10, 2), MISSING))
        self.assertEqual(probs.shape, (3, 11))
        entropy = -(probs * np.log(probs)).sum(axis=1)
        np.testing.assert_allclose(entropy, np.log(11), atol=1e-3)

    def test_classifier_outputs_distribution(self):
        params = init_params(build_architecture(SYNTH, (16,)), np.random.default_rng(0), zero_output=False)
        params.blocks["classifier"].flat *= 5.0
        probs = Classifier(params).predict_proba(self.dataset.values)
        self.assertTrue(np.all(probs >= 0))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_policy_probabilities(self):
        params = init_params(build_architecture(SYNTH, (16,)), np.random.default_rng(0))
        observed = np.full((4, 10, 2), MISSING)
        actions = np.zeros((4, 10, 2))
        np.testing.assert_array_equal(policy_forward(params, observed, actions, 1), np.full((4, 2), 0.5))

        params.blocks["policy"].flat[:] = np.random.default_rng(1).normal(size=params.blocks["policy"].size) * 100
        probs = policy_forward(params, observed, actions, 3)
        self.assertTrue(np.all((probs > 0) & (probs < 1)))

        with self.assertRaises(InputError):
            policy_forward(params, observed, actions, 11)

    def test_prediction_conditioning_changes_output(self):
        arch = build_architecture(SYNTH, (16,), predict_conditioning=True)
        params = init_params(arch, np.random.default_rng(2), zero_output=False)
        observed = np.full((1, 10, 2), MISSING)
        actions = np.zeros((1, 10, 2))
        uniform = prediction_features(np.full((1, 11), 1 / 11))
        peaked = prediction_features(np.eye(11)[[3]])
        a = policy_forward(params, observed, actions, 2, uniform)
        b = policy_forward(params, observed, actions, 2, peaked)
        self.assertGreater(np.abs(a - b).max(), 0.0)
        with self.assertRaises(InputError):
            policy_forward(params, observed, actions, 2)

    def test_policy_is_causal(self):
        params = init_params(build_architecture(SYNTH, (16,)), np.random.default_rng(3), zero_output=False)
        values = self.dataset.values[:8]

        def actions_for(v):
            policy = AgentPolicy(params, greedy=True)
            episode = BatchEpisode(v, np.zeros(len(v), dtype=int), CostSchedule.uniform(0.0))
            policy.begin(v.shape, np.random.default_rng(0))
            for t in range(1, 11):
                episode.step(policy.act(episode.observed.copy(), episode.actions.copy(), t))
            return episode.actions

        baseline = actions_for(values)
        for t in range(1, 10):
            mutated = values.copy()
            mutated[:, t:] = (mutated[:, t:] + 1) % 3
            np.testing.assert_array_equal(actions_for(mutated)[:, :t + 1], baseline[:, :t + 1])


class TestGradCheck(unittest.TestCase):
    def setUp(self):
        self.dataset = sample_dataset(SYNTH, 64, seed=2)
        self.rng = np.random.default_rng(4)

    def _params(self, hidden, **kwargs):
        return init_params(build_architecture(SYNTH, hidden, **kwargs), self.rng, zero_output=False)

    def test_classifier_loss(self):
        params = self._params((16, 16))
        probe = make_probe(self.dataset, 8, self.rng)
        self.assertLess(grad_check(params, probe, 1e-5, n_coords=100, rng=self.rng, kind="classifier"), 1e-4)

    def test_gumbel_surrogate(self):
        params = self._params((16, 16))
        probe = make_probe(self.dataset, 8, self.rng)
        cfg = TrainConfig(hidden=(16, 16), costs=CostSchedule.uniform(0.01))
        self.assertLess(grad_check(params, probe, 1e-5, n_coords=100, rng=self.rng, kind="gumbel", cfg=cfg), 1e-4)

    def test_single_layer_model(self):
        params = self._params(())
        probe = make_probe(self.dataset, 8, self.rng, mask="full")
        _, analytic, numeric = grad_check_details(params, probe, 1e-6, n_coords=100, rng=self.rng)
        self.assertLess(relative_errors(analytic, numeric).max(), 1e-6)

    def test_untouched_slice_is_zero_both_ways(self):
        params = self._params((8,))
        probe = make_probe(self.dataset, 4, self.rng)
        start, _ = params.span("policy")
        coords = start + np.arange(5)
        _, analytic, numeric = grad_check_details(params, probe, 1e-5, coords=coords, kind="classifier")
        np.testing.assert_array_equal(analytic, 0.0)
        np.testing.assert_array_equal(numeric, 0.0)

    def test_sampled_coordinates_stay_in_loss_blocks(self):
        params = self._params((8,))
        probe = make_probe(self.dataset, 8, self.rng, mask="full")
        coords, analytic, _ = grad_check_details(params, probe, 1e-5, n_coords=60, rng=self.rng)
        self.assertTrue(np.all(coords < params.span("classifier")[1]))
        self.assertGreater(np.mean(analytic != 0.0), 0.5)

        cfg = TrainConfig(hidden=(8,), costs=CostSchedule.uniform(0.01))
        coords, _, _ = grad_check_details(params, probe, 1e-5, n_coords=200, rng=self.rng, kind="gumbel", cfg=cfg)
        self.assertTrue(np.all(coords < params.span("policy")[1]))
        self.assertGreater(np.sum(coords >= params.span("policy")[0]), 0)

    def test_relative_error_has_no_absolute_floor(self):
        errors = relative_errors([1e-8, 0.0, 2.0, 1e-11], [2e-8, 0.0, 2.0, 3e-11])
        np.testing.assert_allclose(errors, [0.5, 0.0, 0.0, 0.0])

    def test_step_range(self):
        params = self._params((8,))
        probe = make_probe(self.dataset, 4, self.rng)
        with self.assertRaises(InputError):
            grad_check(params, probe, 1e-2)

    def test_grad_check_leaves_params_unchanged(self):
        params = self._params((8,))
        before = params.to_vector().copy()
        grad_check(params, make_probe(self.dataset, 4, self.rng), 1e-5, n_coords=10, rng=self.rng)
        np.testing.assert_array_equal(params.to_vector(), before)


class TestScoreFunction(unittest.TestCase):
    """Two timesteps, one modality; the second logit depends on the first action."""

    COST = 0.05
    LOSS = {(0, 0): 1.3, (0, 1): 0.6, (1, 0): 0.4, (1, 1): 0.1}
    CONFIG = TrainConfig(mode="a2c", entropy_coef=0.0)

    def _rewards(self, a1, a2):
        return np.array([-self.COST * a1, -self.COST * a2, -self.LOSS[(a1, a2)]])

    def _logits(self, theta, a1):
        return theta[0], theta[1] + theta[2] * a1

    def test_expected_estimator_equals_exact_gradient(self):
        theta = np.array([0.3, -0.7, 1.1])
        estimate = np.zeros(3)
        exact = np.zeros(3)
        for a1 in (0, 1):
            for a2 in (0, 1):
                z1, z2 = self._logits(theta, a1)
                p1 = _sigmoid(z1) if a1 else 1 - _sigmoid(z1)
                p2 = _sigmoid(z2) if a2 else 1 - _sigmoid(z2)
                reward = self._rewards(a1, a2).sum()

                d1 = (1 if a1 else -1) * _sigmoid(z1) * (1 - _sigmoid(z1))
                d2 = (1 if a2 else -1) * _sigmoid(z2) * (1 - _sigmoid(z2))
                exact += reward * np.array([d1 * p2, p1 * d2, p1 * d2 * a1])

                t = parameter(theta.copy())
                l1 = t[0]
                l2 = t[1] + t[2] * float(a1)
                logits = concat([l1.reshape(1, 1), l2.reshape(1, 1)], axis=0)
                actions = np.array([[[a1], [a2]]])
                returns = discounted_returns(self._rewards(a1, a2), 1.0)[None, :2]
                loss, _, _ = a2c_loss(logits, Tensor(np.zeros(2)), actions, returns, self.CONFIG)
                loss.backward()
                estimate += p1 * p2 * -t.grad

        self.assertLess(np.abs(estimate - exact).max() / np.abs(exact).max(), 1e-6)

    def test_returns_example(self):
        np.testing.assert_allclose(discounted_returns([-0.001, -0.0005, -0.25], 1.0), [-0.2515, -0.2505, -0.25])

    def test_perfect_baseline_gives_zero_gradient(self):
        log_probs = parameter(np.random.default_rng(0).normal(size=(4, 3)))
        returns = np.random.default_rng(1).normal(size=(4, 3))
        policy_gradient_loss(log_probs, returns, baseline=returns).backward()
        np.testing.assert_array_equal(log_probs.grad, 0.0)


class TestAdam(unittest.TestCase):
    def _params(self):
        return init_params(build_architecture(SYNTH, (4,)), np.random.default_rng(0))

    def test_cosine_schedule(self):
        opt = Adam(["policy"], lr=3e-4, total_steps=100)
        self.assertEqual(opt.learning_rate(0), 3e-4)
        self.assertAlmostEqual(opt.learning_rate(50), 1.5e-4)
        self.assertAlmostEqual(opt.learning_rate(100), 0.0)
        self.assertEqual(Adam(["policy"], lr=1e-3, schedule="constant").learning_rate(70), 1e-3)

    def test_clipping_reports_raw_norm(self):
        params = self._params()
        opt = Adam(["policy"], lr=1e-3, total_steps=10, clip_norm=10.0)
        grads = {"policy": np.full(params.blocks["policy"].size, 100.0)}
        before = params.blocks["policy"].flat.copy()
        norm = opt.step(params, grads)
        self.assertAlmostEqual(norm, 100.0 * np.sqrt(params.blocks["policy"].size))
        # first Adam step moves every coordinate by about lr
        np.testing.assert_allclose(np.abs(params.blocks["policy"].flat - before), 1e-3, rtol=1e-3)

    def test_non_finite_gradient(self):
        params = self._params()
        grads = {"policy": np.zeros(params.blocks["policy"].size)}
        grads["policy"][3] = np.nan
        with self.assertRaises(TrainingError):
            Adam(["policy"]).step(params, grads)

    def test_untouched_blocks(self):
        params = self._params()
        before = params.blocks["classifier"].flat.copy()
        Adam(["policy"]).step(params, {"policy": np.ones(params.blocks["policy"].size)})
        np.testing.assert_array_equal(params.blocks["classifier"].flat, before)


class TestTraining(unittest.TestCase):
    def setUp(self):
        self.dataset = sample_dataset(SYNTH, 200, seed=3)

    def test_gumbel_step(self):
        cfg = _small_config()
        rng = np.random.default_rng(0)
        params = init_params(build_architecture(SYNTH, cfg.hidden), rng)
        before = params.to_vector().copy()
        opt = Adam(["classifier", "policy"], lr=1e-3, total_steps=1)
        params, stats = gumbel_train_step(params, opt, sample_batch(self.dataset, 16, rng), cfg, rng)
        self.assertTrue(np.isfinite(stats["objective"]))
        self.assertEqual(len(stats["rates"]), 2)
        self.assertFalse(np.array_equal(params.to_vector(), before))
        self.assertNotIn("baseline", params.blocks)

    def test_gumbel_step_rejects_nan(self):
        cfg = _small_config()
        rng = np.random.default_rng(0)
        params = init_params(build_architecture(SYNTH, cfg.hidden), rng)
        params.blocks["classifier"].flat[0] = np.nan
        opt = Adam(["classifier", "policy"])
        with self.assertRaises(TrainingError):
            gumbel_train_step(params, opt, sample_batch(self.dataset, 16, rng), cfg, rng)

    def test_a2c_step_keeps_classifier_frozen(self):
        cfg = _small_config(mode="a2c", predict_conditioning=True, intermediate_reward=True, alpha=0.5)
        rng = np.random.default_rng(1)
        params = init_params(build_architecture(SYNTH, cfg.hidden, "a2c", True), rng, zero_output=False)
        classifier = params.blocks["classifier"].flat.copy()
        policy = params.blocks["policy"].flat.copy()
        opt = Adam(["policy", "baseline"], lr=1e-3, total_steps=1)
        params, stats = a2c_train_step(params, opt, sample_batch(self.dataset, 16, rng), cfg, rng)
        np.testing.assert_array_equal(params.blocks["classifier"].flat, classifier)
        self.assertFalse(np.array_equal(params.blocks["policy"].flat, policy))
        for key in ("objective", "value_loss", "entropy", "grad_norm"):
            self.assertTrue(np.isfinite(stats[key]), key)

    def test_rollout_rewards_telescope(self):
        cfg = _small_config(mode="a2c", intermediate_reward=True, alpha=0.3, gamma=1.0)
        rng = np.random.default_rng(5)
        params = init_params(build_architecture(SYNTH, cfg.hidden, "a2c"), rng, zero_output=False)
        values, labels = sample_batch(self.dataset, 32, rng)
        roll = a2c_rollout(params, values, labels, cfg, rng)
        losses = roll["prefix_losses"]
        expected = -roll["outcome"]["cost"] - roll["outcome"]["loss"] - 0.3 * (losses[:, -1] - losses[:, 0])
        np.testing.assert_allclose(roll["rewards"].sum(axis=1), expected, rtol=0, atol=1e-12)
        np.testing.assert_allclose(roll["returns"][:, 0], roll["rewards"].sum(axis=1), rtol=0, atol=1e-12)

    def test_pretraining_reduces_loss(self):
        cfg = _small_config(batch_size=64, learning_rate=1e-2, lr_schedule="constant", hidden=(32,))
        rng = np.random.default_rng(6)
        subset = sample_dataset(SYNTH, 1000, seed=4)
        params = init_params(build_architecture(SYNTH, cfg.hidden), rng)
        params, history, _ = pretrain_classifier(params, subset, "full", cfg, rng, steps=400)
        self.assertLess(np.mean(history[-20:]), 0.8 * history[0])

    def test_pretraining_draws_are_seeded(self):
        cfg = _small_config(batch_size=32)
        runs = []
        for _ in range(2):
            rng = np.random.default_rng(8)
            params = init_params(build_architecture(SYNTH, cfg.hidden), rng)
            runs.append(pretrain_classifier(params, self.dataset, "m1m2m3", cfg, rng, steps=5)[1])
        self.assertEqual(runs[0], runs[1])

    def test_oracle_mask_pretraining_runs(self):
        cfg = _small_config(batch_size=16)
        rng = np.random.default_rng(9)
        params = init_params(build_architecture(SYNTH, cfg.hidden), rng)
        _, history, _ = pretrain_classifier(params, self.dataset, "oracle", cfg, rng, steps=3)
        self.assertEqual(len(history), 3)

    def test_training_is_deterministic(self):
        for mode in ("gumbel_joint", "a2c"):
            cfg = _small_config(mode=mode, log_every=2)
            results = [train_agent(self.dataset, cfg, np.random.default_rng(11)) for _ in range(2)]
            np.testing.assert_array_equal(results[0].params.to_vector(), results[1].params.to_vector())
            self.assertEqual(len(results[0].history), 2)
            if mode == "a2c":
                self.assertEqual(len(results[0].pretrain_history), cfg.pretrain_steps)

    @unittest.skipUnless(SLOW, "set A2MT_SLOW_TESTS=1 for training runs")
    def test_trained_agent_beats_never_acquire(self):
        train = sample_dataset(SYNTH, 20000, seed=0)
        test = sample_dataset(SYNTH, 2000, seed=0, offset=20000)
        cfg = TrainConfig(steps=3000, batch_size=128, learning_rate=1e-3, log_every=500)
        result = train_agent(train, cfg, np.random.default_rng(0))
        classifier = Classifier(result.params)
        agent, _ = evaluate_policy(AgentPolicy(result.params, classifier), classifier, test, cfg.costs, repeats=1)
        never, _ = evaluate_policy(NeverPolicy(), classifier, test, cfg.costs)
        random_rate, _ = evaluate_policy(RandomRatePolicy(agent.rates), classifier, test, cfg.costs)
        self.assertGreater(agent.reward, never.reward)
        self.assertGreater(agent.reward, random_rate.reward)

    @unittest.skipUnless(SLOW, "set A2MT_SLOW_TESTS=1 for training runs")
    def test_cost_sweep_lowers_rates_and_beats_random_rate(self):
        train = sample_dataset(SYNTH, 20000, seed=4)
        test = sample_dataset(SYNTH, 2000, seed=4, offset=20000)

        def pipeline(cost):
            cfg = TrainConfig(steps=2000, batch_size=128, learning_rate=1e-3, log_every=0,
                              costs=CostSchedule.uniform(cost))
            result = train_agent(train, cfg, np.random.default_rng(0))
            return AgentPolicy(result.params), Classifier(result.params)

        rows = run_cost_sweep([0.0, 5e-4, 5e-3, 5e-2], pipeline, test, repeats=3)
        for row in rows:
            self.assertNotIn("error", row)
            self.assertGreaterEqual(row["agent_reward"], row["random_rate_reward"] - row["random_rate_reward_std"])

        def mean_rate(row):
            return (row["agent_digit_rate"] + row["agent_counter_rate"]) / 2

        self.assertLess(mean_rate(rows[-1]), mean_rate(rows[0]))

    @unittest.skipUnless(SLOW, "set A2MT_SLOW_TESTS=1 for training runs")
    def test_oracle_masked_classifier_is_sufficient(self):
        train = sample_dataset(SYNTH, 20000, seed=1)
        test = sample_dataset(SYNTH, 2000, seed=1, offset=20000)
        cfg = TrainConfig(batch_size=256, learning_rate=1e-3, lr_schedule="constant", log_every=0)
        params = new_params(train, cfg, np.random.default_rng(0))
        params, _, _ = pretrain_classifier(params, train, "oracle", cfg, np.random.default_rng(1), steps=6000)
        classifier = Classifier(params)
        metrics, _ = evaluate_policy(OraclePolicy(SYNTH.counter_low), classifier, test, cfg.costs)
        self.assertGreaterEqual(metrics.accuracy, 0.995)
