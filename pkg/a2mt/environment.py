"""
The acquisition POMDP.

At every timestep t = 1..T the agent submits one binary decision per modality;
acquired cells are revealed in the masked view, each acquisition costs c_m,
and after T steps the classifier's prediction is scored with the negative
log-likelihood of the true label:

    R = -C(a) - L(f(x~_{1:T}), y) [+ I]

Costs and returns are always summed in ascending t, then m.
"""

from dataclasses import dataclass, field

import numpy as np

from a2mt.exceptions import EpisodeCompleteError, IncompleteEpisodeError, InputError

MISSING = -1
PROB_FLOOR = 1e-12


def as_action_matrix(bits, T=None, M=None):
    actions = np.asarray(bits)
    if actions.ndim != 2:
        raise InputError(f"action matrix must be 2-d, got shape {actions.shape}")
    if (T is not None and actions.shape[0] != T) or (M is not None and actions.shape[1] != M):
        raise InputError(f"action matrix shape {actions.shape} does not match ({T}, {M})")
    if not np.all((actions == 0) | (actions == 1)):
        raise InputError("action entries must be 0 or 1")
    return actions.astype(np.int8)


def masked_view(values, actions):
    """Observed cells keep their value, everything else becomes MISSING."""
    values = np.asarray(values)
    actions = np.asarray(actions)
    if values.shape != actions.shape:
        raise InputError(f"values {values.shape} and actions {actions.shape} differ in shape")
    return np.where(actions.astype(bool), values, MISSING).astype(np.int64)


@dataclass
class MaskedSequence:
    cells: np.ndarray

    @classmethod
    def empty(cls, T, M):
        return cls(cells=np.full((T, M), MISSING, dtype=np.int64))

    @property
    def observed(self):
        return self.cells != MISSING

    def is_observed(self, t, m):
        """t is 1-based."""
        return bool(self.cells[t - 1, m] != MISSING)

    def value(self, t, m):
        if not self.is_observed(t, m):
            return None
        return int(self.cells[t - 1, m])


@dataclass(frozen=True)
class CostSchedule:
    c: tuple

    def __post_init__(self):
        object.__setattr__(self, "c", tuple(float(x) for x in self.c))
        if any(x < 0 for x in self.c):
            raise InputError(f"acquisition costs must be non-negative, got {self.c}")

    @classmethod
    def uniform(cls, cost, M=2):
        return cls(c=(cost,) * M)

    @property
    def M(self):
        return len(self.c)


@dataclass
class RewardBreakdown:
    acquisition_cost: float
    terminal_loss: float
    intermediate: float
    total: float


@dataclass
class EpisodeState:
    truth: object
    costs: CostSchedule
    t: int
    actions: np.ndarray
    view: MaskedSequence
    accumulated_cost: float = 0.0
    values: np.ndarray = field(default=None, repr=False)

    @property
    def T(self):
        return self.actions.shape[0]

    @property
    def done(self):
        return self.t > self.T


def reset(seq, costs):
    values = seq.values()
    T, M = values.shape
    if T < 1:
        raise InputError("sequence must have at least one timestep")
    if costs.M != M:
        raise InputError(f"cost schedule has {costs.M} entries for {M} modalities")
    return EpisodeState(
        truth=seq,
        costs=costs,
        t=1,
        actions=np.zeros((T, M), dtype=np.int8),
        view=MaskedSequence.empty(T, M),
        accumulated_cost=0.0,
        values=values,
    )


def _row_cost(costs, row):
    cost = 0.0
    for c_m, a_m in zip(costs.c, row):
        cost += c_m * float(a_m)
    return cost


def step(state, a_t):
    """Resolve timestep state.t in place; returns (state, step_cost)."""
    if state.done:
        raise EpisodeCompleteError(f"episode already consumed all {state.T} timesteps")
    a_t = np.asarray(a_t)
    if a_t.shape != (state.actions.shape[1],) or not np.all((a_t == 0) | (a_t == 1)):
        raise InputError(f"action vector must hold {state.actions.shape[1]} binary entries, got {a_t!r}")

    row = state.t - 1
    state.actions[row] = a_t
    acquired = a_t.astype(bool)
    state.view.cells[row, acquired] = state.values[row, acquired]

    step_cost = _row_cost(state.costs, a_t)
    state.accumulated_cost += step_cost
    state.t += 1
    return state, step_cost


def acquisition_cost(actions, costs):
    actions = np.asarray(actions)
    if actions.ndim != 2 or actions.shape[1] != costs.M:
        raise InputError(f"actions of shape {actions.shape} do not match {costs.M} modalities")
    total = 0.0
    for row in actions:
        total += _row_cost(costs, row)
    return total


def _check_distribution(probs):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim < 1 or np.any(probs < 0) or np.any(~np.isfinite(probs)):
        raise InputError("predicted distribution must be finite and non-negative")
    if np.any(np.abs(probs.sum(axis=-1) - 1.0) > 1e-9):
        raise InputError("predicted distribution must sum to 1")
    return probs


def categorical_nll(probs, labels):
    """-log p[label], probabilities floored at 1e-12; works on single or batched rows."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim == 1:
        return float(-np.log(max(probs[int(labels)], PROB_FLOOR)))
    picked = probs[np.arange(probs.shape[0]), labels.astype(np.int64)]
    return -np.log(np.maximum(picked, PROB_FLOOR))


def finalize(state, predicted_dist, label, intermediate=0.0):
    if not state.done:
        raise IncompleteEpisodeError(f"episode is at t={state.t}, finalize needs t={state.T + 1}")
    probs = _check_distribution(predicted_dist)
    if not 0 <= int(label) < probs.shape[0]:
        raise InputError(f"label {label} outside the {probs.shape[0]} predicted classes")

    loss = categorical_nll(probs, label)
    cost = state.accumulated_cost
    return RewardBreakdown(
        acquisition_cost=cost,
        terminal_loss=loss,
        intermediate=float(intermediate),
        total=(-cost - loss) + float(intermediate),
    )


def intermediate_reward(losses, alpha, gamma=1.0):
    """-alpha * sum_{t=1..T} (L_t - gamma * L_{t-1}); losses[0] is the fully-missing loss."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.shape[-1] < 2:
        raise InputError("intermediate reward needs at least L_0 and L_1")
    reward = -alpha * np.sum(losses[..., 1:] - gamma * losses[..., :-1], axis=-1)
    return float(reward) if losses.ndim == 1 else reward


def intermediate_terms(losses, alpha, gamma=1.0):
    """Per-step shaping rewards -alpha * (L_t - gamma * L_{t-1}), t = 1..T."""
    losses = np.asarray(losses, dtype=np.float64)
    return -alpha * (losses[..., 1:] - gamma * losses[..., :-1])


def discounted_returns(rewards, gamma=1.0):
    """Reverse suffix sums G_t = r_t + gamma * G_{t+1} along the last axis."""
    rewards = np.asarray(rewards, dtype=np.float64)
    returns = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[:-1])
    for t in range(rewards.shape[-1] - 1, -1, -1):
        running = rewards[..., t] + gamma * running
        returns[..., t] = running
    return returns


class BatchEpisode:
    """
    B episodes stepped in lock-step. Same semantics as reset/step/finalize,
    with the ground truth held as a (B, T, M) value array.
    """

    def __init__(self, values, labels, costs):
        self.values = np.asarray(values, dtype=np.int64)
        if self.values.ndim != 3:
            raise InputError(f"batch values must be (B, T, M), got {self.values.shape}")
        self.labels = np.asarray(labels, dtype=np.int64)
        self.costs = costs
        B, T, M = self.values.shape
        if costs.M != M:
            raise InputError(f"cost schedule has {costs.M} entries for {M} modalities")
        self.t = 1
        self.actions = np.zeros((B, T, M), dtype=np.int8)
        self.observed = np.full((B, T, M), MISSING, dtype=np.int64)
        self.accumulated_cost = np.zeros(B)

    @property
    def shape(self):
        return self.values.shape

    @property
    def done(self):
        return self.t > self.values.shape[1]

    def step(self, a_t):
        if self.done:
            raise EpisodeCompleteError(f"batch already consumed all {self.values.shape[1]} timesteps")
        a_t = np.asarray(a_t)
        B, _, M = self.values.shape
        if a_t.shape != (B, M):
            raise InputError(f"batch actions must be ({B}, {M}), got {a_t.shape}")

        row = self.t - 1
        self.actions[:, row] = a_t
        acquired = a_t.astype(bool)
        self.observed[:, row] = np.where(acquired, self.values[:, row], MISSING)

        step_cost = np.zeros(B)
        for m in range(M):
            step_cost += self.costs.c[m] * a_t[:, m].astype(np.float64)
        self.accumulated_cost += step_cost
        self.t += 1
        return step_cost

    def finalize(self, probs):
        if not self.done:
            raise IncompleteEpisodeError(f"batch is at t={self.t}, finalize needs t={self.values.shape[1] + 1}")
        loss = categorical_nll(probs, self.labels)
        cost = self.accumulated_cost.copy()
        return {"cost": cost, "loss": loss, "total": -cost - loss}
