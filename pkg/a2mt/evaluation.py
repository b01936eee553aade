"""
Metrics and experiment harnesses: accuracy and acquisition rates, confusion
against the oracle, temporal acquisition patterns and cost sweeps with
rate-matched ablations.
"""

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from a2mt.environment import PROB_FLOOR, BatchEpisode, CostSchedule
from a2mt.exceptions import InputError
from a2mt.policies import rate_matched_ablations
from a2mt.rng import substream_seed
from a2mt.synthgen import MODALITIES, oracle_actions
from a2mt.utils import run_guarded

logger = logging.getLogger(__name__)

DEFAULT_REPEATS = 5


@dataclass
class EvalMetrics:
    accuracy: float
    rates: list
    reward: float
    cost: float
    loss: float
    n: int
    std: dict = field(default_factory=dict)

    def as_row(self, prefix=""):
        row = {
            f"{prefix}accuracy": self.accuracy,
            f"{prefix}reward": self.reward,
            f"{prefix}cost": self.cost,
            f"{prefix}loss": self.loss,
        }
        for name, rate in zip(MODALITIES, self.rates):
            row[f"{prefix}{name}_rate"] = rate
        for key, value in self.std.items():
            row[f"{prefix}{key}_std"] = value
        return row


@dataclass
class EpisodeRecords:
    """Per-episode outcome of one evaluation pass, kept in dataset order."""

    actions: np.ndarray
    probs: np.ndarray
    labels: np.ndarray
    cost: np.ndarray
    loss: np.ndarray

    @property
    def predictions(self):
        # argmax picks the lowest index on ties
        return np.argmax(self.probs, axis=1)

    @property
    def entropy(self):
        return -np.sum(self.probs * np.log(np.maximum(self.probs, PROB_FLOOR)), axis=1)

    @property
    def acquisitions(self):
        return self.actions.sum(axis=1)


@dataclass
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    @property
    def tp_rate(self):
        positives = self.tp + self.fn
        return self.tp / positives if positives else float("nan")

    @property
    def tn_rate(self):
        negatives = self.tn + self.fp
        return self.tn / negatives if negatives else float("nan")


def run_episodes(policy, classifier, values, labels, costs, rng, batch_size=1024):
    """Roll out `policy` on every sequence and score the final prediction."""
    values = np.asarray(values)
    labels = np.asarray(labels)
    if values.shape[0] == 0:
        raise InputError("cannot evaluate on an empty dataset")

    chunks = []
    for start in range(0, values.shape[0], batch_size):
        v, y = values[start:start + batch_size], labels[start:start + batch_size]
        episode = BatchEpisode(v, y, costs)
        policy.begin(v.shape, rng)
        for t in range(1, v.shape[1] + 1):
            episode.step(policy.act(episode.observed.copy(), episode.actions.copy(), t))
        probs = classifier.predict_proba(episode.observed)
        outcome = episode.finalize(probs)
        chunks.append((episode.actions, probs, y, outcome["cost"], outcome["loss"]))

    actions, probs, labels, cost, loss = (np.concatenate(parts) for parts in zip(*chunks))
    return EpisodeRecords(actions=actions, probs=probs, labels=labels, cost=cost, loss=loss)


def policy_actions(policy, values, rng):
    """Action matrices (N, T, M) of `policy` on `values`, without scoring."""
    values = np.asarray(values)
    episode = BatchEpisode(values, np.zeros(values.shape[0], dtype=np.int64), CostSchedule.uniform(0.0, values.shape[2]))
    policy.begin(values.shape, rng)
    for t in range(1, values.shape[1] + 1):
        episode.step(policy.act(episode.observed.copy(), episode.actions.copy(), t))
    return episode.actions


def metrics_from_records(records):
    cost = float(np.mean(records.cost))
    loss = float(np.mean(records.loss))
    return EvalMetrics(
        accuracy=float(np.mean(records.predictions == records.labels)),
        rates=records.actions.mean(axis=(0, 1)).tolist(),
        reward=-cost - loss,
        cost=cost,
        loss=loss,
        n=int(records.labels.shape[0]),
    )


def evaluate_policy(policy, classifier, dataset, costs, repeats=DEFAULT_REPEATS, seed=0, batch_size=1024):
    """
    Mean metrics over `repeats` passes (one pass for deterministic policies),
    with standard deviations across passes. Returns (metrics, records of the
    first pass).
    """
    if len(dataset) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    repeats = max(1, repeats) if getattr(policy, "stochastic", False) else 1

    passes, first = [], None
    values = np.stack([dataset.digits, dataset.counter], axis=2)
    for r in range(repeats):
        rng = np.random.default_rng(substream_seed(seed, r))
        records = run_episodes(policy, classifier, values, dataset.labels, costs, rng, batch_size)
        if first is None:
            first = records
        passes.append(metrics_from_records(records))

    def _mean(key):
        return float(np.mean([getattr(m, key) for m in passes]))

    def _std(key):
        return float(np.std([getattr(m, key) for m in passes]))

    metrics = EvalMetrics(
        accuracy=_mean("accuracy"),
        rates=np.mean([m.rates for m in passes], axis=0).tolist(),
        reward=-_mean("cost") - _mean("loss"),
        cost=_mean("cost"),
        loss=_mean("loss"),
        n=passes[0].n,
        std={key: _std(key) for key in ("accuracy", "reward", "cost", "loss")},
    )
    logger.info(
        "%s: accuracy %.4f reward %.4f rates %s (%d repeats)",
        getattr(policy, "name", "policy"), metrics.accuracy, metrics.reward,
        " ".join(f"{r:.3f}" for r in metrics.rates), repeats,
    )
    return metrics, first


def confusion_vs_oracle(agent_actions, oracle):
    """Per-modality ConfusionMatrix; positives are the oracle's acquisitions."""
    agent = np.asarray(agent_actions).astype(bool)
    oracle = np.asarray(oracle).astype(bool)
    if agent.shape != oracle.shape:
        raise InputError(f"agent actions {agent.shape} and oracle actions {oracle.shape} differ in shape")
    matrices = []
    for m in range(agent.shape[-1]):
        a, o = agent[..., m], oracle[..., m]
        matrices.append(ConfusionMatrix(
            tp=int(np.sum(a & o)),
            fp=int(np.sum(a & ~o)),
            fn=int(np.sum(~a & o)),
            tn=int(np.sum(~a & ~o)),
        ))
    return matrices


def oracle_actions_for(dataset):
    low = dataset.config.counter_low
    return np.stack([oracle_actions(row, low) for row in dataset.counter])


def confusion_rows(matrices):
    rows = []
    for name, cm in zip(MODALITIES, matrices):
        rows.append(dict(asdict(cm), modality=name, tp_rate=cm.tp_rate, tn_rate=cm.tn_rate))
    return rows


def acquisition_pattern(actions):
    """(T, M) mean acquisition rate per timestep and modality."""
    actions = np.asarray(actions)
    if actions.ndim == 2:
        return actions.astype(np.float64)
    return actions.mean(axis=0)


def pattern_rows(patterns):
    """`patterns` maps policy name -> (T, M) matrix."""
    rows = []
    for policy, matrix in patterns.items():
        for t, rates in enumerate(np.asarray(matrix), start=1):
            row = {"policy": policy, "t": t}
            row.update({name: float(rate) for name, rate in zip(MODALITIES, rates)})
            rows.append(row)
    return rows


def entropy_loss_table(records):
    """One row per episode: predictive entropy, acquisitions per modality and loss."""
    rows = []
    acquired = records.acquisitions
    for i in range(records.labels.shape[0]):
        row = {"episode": i, "entropy": float(records.entropy[i]), "loss": float(records.loss[i])}
        row.update({f"{name}_acquisitions": int(acquired[i, m]) for m, name in enumerate(MODALITIES)})
        rows.append(row)
    return rows


def summary_rows(results):
    """`results` maps a column name (agent, oracle, ...) to EvalMetrics."""
    rows = [{"metric": "label_accuracy", **{k: m.accuracy for k, m in results.items()}}]
    for i, name in enumerate(MODALITIES):
        rows.append({"metric": f"{name}_acquisition_rate", **{k: m.rates[i] for k, m in results.items()}})
    rows.append({"metric": "mean_reward", **{k: m.reward for k, m in results.items()}})
    return rows


def _sweep_row(cost, train_pipeline, dataset, T, repeats, seed):
    policy, classifier = train_pipeline(cost)
    agent, _ = evaluate_policy(policy, classifier, dataset, _costs_for(cost), repeats, seed)
    random_rate, random_1hot = rate_matched_ablations(agent.rates, T)
    row = {"cost": cost}
    row.update(agent.as_row("agent_"))
    for prefix, ablation in (("random_rate_", random_rate), ("random_1hot_", random_1hot)):
        metrics, _ = evaluate_policy(ablation, classifier, dataset, _costs_for(cost), repeats, seed)
        row.update(metrics.as_row(prefix))
    return row


def _costs_for(cost):
    return CostSchedule.uniform(float(cost), len(MODALITIES))


def run_cost_sweep(costs, train_pipeline, dataset, repeats=DEFAULT_REPEATS, seed=0):
    """
    For each cost: train (via `train_pipeline(cost) -> (policy, classifier)`),
    evaluate the agent, then evaluate Random-Rate and Random-1Hot ablations
    built only from the agent's measured rates. A failing cost yields a row
    with its error and the sweep moves on.
    """
    if not costs:
        raise InputError("cost sweep needs at least one cost")
    T = dataset.config.length
    rows = []
    for cost in costs:
        row, error = run_guarded(
            _sweep_row, cost, train_pipeline, dataset, T, repeats, seed,
            title=f"Cost sweep failed at cost {cost}",
        )
        rows.append(row if error is None else {"cost": cost, "error": error})

    trend = rate_trend(rows)
    if trend is not None and not trend:
        logger.warning("agent acquisition rate is not non-increasing across the sweep")
    return rows


def rate_trend(rows):
    """True if the mean agent rate never increases with cost, None when fewer than two rows succeeded."""
    rates = [
        np.mean([row[f"agent_{name}_rate"] for name in MODALITIES])
        for row in sorted(rows, key=lambda r: float(r["cost"]))
        if "error" not in row
    ]
    if len(rates) < 2:
        return None
    return bool(all(b <= a for a, b in zip(rates, rates[1:])))


def write_csv(path, rows, fieldnames=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fieldnames is None:
        fieldnames = []
        for row in rows:
            fieldnames += [key for key in row if key not in fieldnames]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, restval="", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path
