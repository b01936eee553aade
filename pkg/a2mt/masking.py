"""
Pretraining masks that mimic a randomly acting agent.

M1  keep each (t, m) cell with probability keep_prob[m]
M2  draw t_max uniformly from {0, ..., T} and drop every t > t_max
M3  drop modality m entirely with probability drop_prob[m]

Mechanisms compose in that order. Masks use the ActionMatrix layout (T, M).
"""

from dataclasses import dataclass

import numpy as np

from a2mt.exceptions import ConfigurationError


@dataclass(frozen=True)
class MaskSpec:
    keep_prob: tuple
    use_max_timestep: bool = False
    drop_prob: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "keep_prob", tuple(float(p) for p in self.keep_prob))
        if self.drop_prob is not None:
            object.__setattr__(self, "drop_prob", tuple(float(p) for p in self.drop_prob))
            if len(self.drop_prob) != len(self.keep_prob):
                raise ConfigurationError("keep_prob and drop_prob need one entry per modality")
        for p in self.keep_prob + (self.drop_prob or ()):
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"mask probabilities must lie in [0, 1], got {p}")

    @property
    def M(self):
        return len(self.keep_prob)

    @property
    def uses_drop(self):
        return self.drop_prob is not None and any(p > 0 for p in self.drop_prob)

    @classmethod
    def preset(cls, name, M=2):
        presets = {
            "full": dict(keep_prob=(1.0,) * M),
            "m1": dict(keep_prob=(0.2,) * M),
            "m1m2": dict(keep_prob=(0.4,) * M, use_max_timestep=True),
            "m1m2m3": dict(keep_prob=(0.4,) * M, use_max_timestep=True, drop_prob=(0.5,) * M),
        }
        if name not in presets:
            raise ConfigurationError(f"unknown mask preset {name!r}, choose from {sorted(presets)}")
        return cls(**presets[name])


def sample_mask(spec, T, M, rng, size=None):
    """
    One (T, M) mask, or a (size, T, M) batch when size is given. `rng` is a
    numpy Generator.
    """
    if spec.M != M:
        raise ConfigurationError(f"mask spec covers {spec.M} modalities, episode has {M}")
    n = 1 if size is None else int(size)

    keep = rng.random((n, T, M)) < np.asarray(spec.keep_prob)

    if spec.use_max_timestep:
        t_max = rng.integers(0, T + 1, size=n)
        timesteps = np.arange(1, T + 1)
        keep &= (timesteps[None, :] <= t_max[:, None])[:, :, None]

    if spec.drop_prob is not None:
        dropped = rng.random((n, M)) < np.asarray(spec.drop_prob)
        keep &= ~dropped[:, None, :]

    masks = keep.astype(np.int8)
    return masks[0] if size is None else masks


def expected_keep_rate(spec, T):
    """Closed-form per-modality keep fraction of sample_mask."""
    rates = np.asarray(spec.keep_prob, dtype=np.float64)
    if spec.use_max_timestep:
        # t_max uniform on {0..T}: E[t_max] / T = 1/2
        rates = rates * (T / 2.0) / T
    if spec.drop_prob is not None:
        rates = rates * (1.0 - np.asarray(spec.drop_prob))
    return rates.tolist()
