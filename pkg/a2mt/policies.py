"""
Scripted acquisition policies.

Every policy acts on a batch of episodes: `begin(shape, rng)` once per batch,
then `act(observed, actions, t)` for t = 1..T returning a (B, M) 0/1 array.
`observed` holds the masked view with MISSING for cells not acquired (and for
every t' >= t); policies never see ground truth.
"""

import math
from dataclasses import dataclass

import numpy as np

from a2mt.environment import MISSING, MaskedSequence
from a2mt.exceptions import InputError, PolicyStateError
from a2mt.synthgen import COUNTER, DIGIT


class Policy:
    name = "policy"
    stochastic = False

    def begin(self, shape, rng):
        self.shape = shape
        self.rng = rng

    def act(self, observed, actions, t):
        raise NotImplementedError

    def expected_cost(self, T, costs):
        return None


class NeverPolicy(Policy):
    name = "never"

    def act(self, observed, actions, t):
        B, _, M = self.shape
        return np.zeros((B, M), dtype=np.int8)

    def expected_cost(self, T, costs):
        return 0.0


class AlwaysPolicy(Policy):
    name = "always"

    def act(self, observed, actions, t):
        B, _, M = self.shape
        return np.ones((B, M), dtype=np.int8)

    def expected_cost(self, T, costs):
        return float(sum(costs.c) * T)


def _check_rates(rate):
    rate = np.asarray(rate, dtype=np.float64)
    if np.any((rate < 0) | (rate > 1)):
        raise InputError(f"acquisition rates must lie in [0, 1], got {rate.tolist()}")
    return rate


def random_rate_actions(rate, T, rng, size=None):
    """Independent Bernoulli(rate[m]) per (t, m); (T, M) or (size, T, M)."""
    rate = _check_rates(rate)
    shape = (T, rate.size) if size is None else (int(size), T, rate.size)
    return (rng.random(shape) < rate).astype(np.int8)


def prob_no_acquisition(rate, T):
    """Probability that a Bernoulli(rate) modality is never acquired in T steps."""
    return (1.0 - rate) ** T


class RandomRatePolicy(Policy):
    name = "random-rate"
    stochastic = True

    def __init__(self, rates):
        self.rates = _check_rates(rates)

    def begin(self, shape, rng):
        super().begin(shape, rng)
        B, T, _ = shape
        self.plan = random_rate_actions(self.rates, T, rng, size=B)

    def act(self, observed, actions, t):
        return self.plan[:, t - 1]

    def expected_cost(self, T, costs):
        return float(sum(c * r * T for c, r in zip(costs.c, self.rates)))


@dataclass(frozen=True)
class OnehotSchedule:
    slots: tuple
    probs: tuple

    @property
    def expected_count(self):
        return float(sum(self.probs))

    def sample(self, T, rng, size):
        bits = np.zeros((size, T), dtype=np.int8)
        for slot, p in zip(self.slots, self.probs):
            bits[:, slot - 1] = rng.random(size) < p
        return bits


def random_1hot_schedule(target_count, T):
    """
    ceil(target) equidistant slots at round-half-up((i + 0.5) * T / k), 1-based;
    probability 1 on every slot but the last, which carries the remainder.
    """
    nearest = round(target_count)
    # rate * T can land a hair off an integer count
    if abs(target_count - nearest) < 1e-9:
        target_count = float(nearest)
    if not 0 <= target_count <= T:
        raise InputError(f"target count {target_count} outside [0, {T}]")
    k = math.ceil(target_count)
    if k == 0:
        return OnehotSchedule(slots=(), probs=())

    slots = []
    for i in range(k):
        slot = max(1, math.floor((i + 0.5) * T / k + 0.5))
        while slot in slots:
            slot += 1
        if slot > T:
            raise InputError(f"cannot place {k} slots in {T} timesteps")
        slots.append(slot)

    probs = [1.0] * (k - 1) + [float(target_count) - (k - 1)]
    return OnehotSchedule(slots=tuple(slots), probs=tuple(probs))


class RandomOneHotPolicy(Policy):
    name = "random-1hot"
    stochastic = True

    def __init__(self, target_counts, T):
        self.schedules = [random_1hot_schedule(c, T) for c in target_counts]

    @classmethod
    def from_rates(cls, rates, T):
        rates = _check_rates(rates)
        return cls([r * T for r in rates], T)

    def begin(self, shape, rng):
        super().begin(shape, rng)
        B, T, _ = shape
        self.plan = np.stack([s.sample(T, rng, B) for s in self.schedules], axis=2)

    def act(self, observed, actions, t):
        return self.plan[:, t - 1]

    def expected_cost(self, T, costs):
        return float(sum(c * s.expected_count for c, s in zip(costs.c, self.schedules)))


class OracleTracker:
    """
    Causal oracle for one synthetic episode. It acquires the counter at each
    countdown start it can predict (t=1, then the step after every zero) and
    the digit at every predicted zero. A start on the last timestep is skipped.
    """

    def __init__(self, T, counter_low):
        self.T = T
        self.counter_low = counter_low
        self.t = 1
        self.start = 1
        self.zero = None

    def act(self, cells, t):
        if t != self.t:
            raise PolicyStateError(f"oracle expected timestep {self.t}, got {t}")

        if self.start is not None and self.start < t:
            value = cells[self.start - 1, COUNTER]
            if value == MISSING:
                raise PolicyStateError(f"counter at t={self.start} was planned but is missing from history")
            if value <= self.counter_low:
                raise PolicyStateError(f"counter at countdown start t={self.start} reads {value}")
            self.zero = self.start + int(value) - self.counter_low
            self.start = None

        action = np.zeros(2, dtype=np.int8)
        if self.zero == t:
            action[DIGIT] = 1
            self.zero = None
            self.start = t + 1
        if self.start == t:
            if t < self.T:
                action[COUNTER] = 1
            else:
                self.start = None

        self.t += 1
        return action


def oracle_policy_step(history, t, T, counter_low):
    """Oracle action at timestep t given the masked prefix it acquired so far."""
    cells = history.cells if isinstance(history, MaskedSequence) else np.asarray(history)
    tracker = OracleTracker(T, counter_low)
    action = None
    for s in range(1, t + 1):
        action = tracker.act(cells, s)
    return action


class OraclePolicy(Policy):
    name = "oracle"

    def __init__(self, counter_low):
        self.counter_low = counter_low

    def begin(self, shape, rng):
        super().begin(shape, rng)
        B, T, _ = shape
        self.trackers = [OracleTracker(T, self.counter_low) for _ in range(B)]

    def act(self, observed, actions, t):
        return np.stack([tracker.act(observed[b], t) for b, tracker in enumerate(self.trackers)])


def rate_matched_ablations(rates, T):
    """Random-rate and random-1hot ablations built only from measured per-modality rates."""
    return RandomRatePolicy(rates), RandomOneHotPolicy.from_rates(rates, T)
