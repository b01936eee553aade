"""
Classifier f, policy pi and the A2C baseline b as small tanh MLPs over a
one-hot encoding of the masked sequence, trained with the autograd core.

Mode A (`gumbel_joint`): f and pi are separate networks trained together;
actions are straight-through Gumbel samples so the objective -C(a) - L is
differentiated end to end.

Mode B (`a2c`): f is pretrained on randomly masked inputs and frozen; pi and
b share their first hidden layer and are trained with advantage actor-critic.
"""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from a2mt.autograd import Tensor, concat, no_grad, parameter, straight_through
from a2mt.environment import MISSING, BatchEpisode, CostSchedule, categorical_nll, discounted_returns, intermediate_terms
from a2mt.exceptions import ConfigurationError, InputError, TrainingError
from a2mt.masking import MaskSpec, sample_mask
from a2mt.policies import Policy
from a2mt.synthgen import num_classes, oracle_actions

logger = logging.getLogger(__name__)

MODES = ("gumbel_joint", "a2c")
BLOCKS = ("classifier", "policy", "baseline")
LOGIT_BOUND = 10.0
PROB_FLOOR = 1e-12


@dataclass
class TrainConfig:
    mode: str = "gumbel_joint"
    steps: int = 50000
    batch_size: int = 256
    learning_rate: float = 3e-4
    lr_schedule: str = "cosine"
    weight_decay: float = 1e-6
    tau: float = 1.0
    alpha: float = 0.0
    gamma: float = 1.0
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    costs: CostSchedule = field(default_factory=lambda: CostSchedule.uniform(0.0005, 2))
    seed: int = 0
    deterministic: bool = True
    hidden: tuple = (128, 128)
    grad_clip: float = 10.0
    predict_conditioning: bool = False
    intermediate_reward: bool = False
    pretrain_steps: int = 5000
    pretrain_masks: str = "m1m2m3"
    log_every: int = 500

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.tau <= 0:
            raise ConfigurationError(f"Gumbel temperature must be positive, got {self.tau}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown learning rate schedule {self.lr_schedule!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps must be >= 0 and batch_size >= 1")

    def to_dict(self):
        data = asdict(self)
        data["costs"] = list(self.costs.c)
        data["hidden"] = list(self.hidden)
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["costs"] = CostSchedule(c=tuple(data["costs"]))
        return cls(**data)


# architecture & parameters

def build_architecture(synth_cfg, hidden=(128, 128), mode="gumbel_joint", predict_conditioning=False):
    ranges = [list(r) for r in synth_cfg.value_ranges]
    widths = [hi - lo + 2 for lo, hi in ranges]
    T, M = synth_cfg.length, len(ranges)
    K = num_classes(synth_cfg)
    enc_dim = T * sum(widths)
    return {
        "T": T,
        "M": M,
        "value_ranges": ranges,
        "cell_widths": widths,
        "num_classes": K,
        "hidden": list(hidden),
        "mode": mode,
        "shared_trunk": mode == "a2c",
        "predict_conditioning": bool(predict_conditioning),
        "enc_dim": enc_dim,
        "policy_in": enc_dim + T * M + T + ((K + 1) if predict_conditioning else 0),
    }


def check_dataset_fits(arch, synth_cfg):
    """Raise InputError when a dataset config does not match a trained architecture."""
    expected = build_architecture(synth_cfg)
    for key in ("T", "M", "value_ranges", "num_classes"):
        if arch[key] != expected[key]:
            raise InputError(f"dataset {key} {expected[key]} does not match the checkpoint's {arch[key]}")


def _dense_layout(sizes, start=0):
    layout = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:]), start=start):
        layout += [(f"l{i}.W", (fan_in, fan_out)), (f"l{i}.b", (fan_out,))]
    return layout


def block_layouts(arch):
    hidden = arch["hidden"]
    layouts = {
        "classifier": _dense_layout([arch["enc_dim"]] + hidden + [arch["num_classes"]]),
        "policy": _dense_layout([arch["policy_in"]] + hidden + [arch["M"]]),
    }
    if arch["mode"] != "a2c":
        return layouts
    if arch["shared_trunk"] and hidden:
        layouts["baseline"] = _dense_layout(hidden + [1], start=1)
    else:
        layouts["baseline"] = _dense_layout([arch["policy_in"]] + hidden + [1])
    return layouts


class ParamBlock:
    """A flat float64 vector with named, reshaped slices."""

    def __init__(self, layout, flat=None):
        self.layout = [(name, tuple(shape)) for name, shape in layout]
        self.offsets = {}
        size = 0
        for name, shape in self.layout:
            self.offsets[name] = (size, shape)
            size += int(np.prod(shape))
        self.size = size
        self.flat = np.zeros(size) if flat is None else np.asarray(flat, dtype=np.float64)
        if self.flat.shape != (size,):
            raise InputError(f"parameter vector of size {self.flat.shape} does not match layout size {size}")

    def view(self, name):
        start, shape = self.offsets[name]
        return self.flat[start:start + int(np.prod(shape))].reshape(shape)

    def tensors(self):
        return {name: parameter(self.view(name)) for name, _ in self.layout}

    def gather(self, tensors):
        grad = np.zeros(self.size)
        for name, shape in self.layout:
            start, _ = self.offsets[name]
            g = tensors[name].grad
            if g is not None:
                grad[start:start + int(np.prod(shape))] = g.ravel()
        return grad


@dataclass
class ModelParams:
    arch: dict
    blocks: dict

    def tensors(self):
        return {name: block.tensors() for name, block in self.blocks.items()}

    def gather(self, tensors):
        return {name: self.blocks[name].gather(tensors[name]) for name in self.blocks}

    def names(self):
        return [name for name in BLOCKS if name in self.blocks]

    def span(self, name):
        """Start and stop of a block inside the flat vector."""
        start = 0
        for other in self.names():
            if other == name:
                return start, start + self.blocks[name].size
            start += self.blocks[other].size
        raise InputError(f"no {name!r} block in these parameters")

    def to_vector(self):
        return np.concatenate([self.blocks[name].flat for name in self.names()])

    def load_vector(self, vector):
        vector = np.asarray(vector, dtype=np.float64)
        start = 0
        for name in self.names():
            block = self.blocks[name]
            block.flat[:] = vector[start:start + block.size]
            start += block.size

    def copy(self):
        return ModelParams(
            arch=dict(self.arch),
            blocks={name: ParamBlock(block.layout, block.flat.copy()) for name, block in self.blocks.items()},
        )

    def is_finite(self):
        return all(np.all(np.isfinite(block.flat)) for block in self.blocks.values())


def init_params(arch, rng, zero_output=True):
    """Scaled-normal weights, zero biases; output layers start at zero unless told otherwise."""
    blocks = {}
    for name, layout in block_layouts(arch).items():
        block = ParamBlock(layout)
        weights = [n for n, _ in layout if n.endswith(".W")]
        for weight in weights:
            view = block.view(weight)
            if zero_output and weight == weights[-1]:
                continue
            view[:] = rng.normal(0.0, 1.0 / math.sqrt(view.shape[0]), size=view.shape)
        blocks[name] = block
    return ModelParams(arch=arch, blocks=blocks)


# encoding

def encode_observed(observed, arch):
    """(B, T, M) masked values -> (B, T * sum(widths)) one-hot, last channel of a cell = missing."""
    observed = np.asarray(observed)
    if observed.ndim != 3 or observed.shape[1:] != (arch["T"], arch["M"]):
        raise InputError(f"masked batch of shape {observed.shape} does not fit T={arch['T']}, M={arch['M']}")
    B, T, _ = observed.shape
    cell = sum(arch["cell_widths"])
    out = np.zeros((B, T, cell))
    offset = 0
    for m, ((low, high), width) in enumerate(zip(arch["value_ranges"], arch["cell_widths"])):
        column = observed[:, :, m]
        present = column != MISSING
        if np.any(present & ((column < low) | (column > high))):
            raise InputError(f"modality {m} has values outside [{low}, {high}] for this architecture")
        index = np.where(column == MISSING, high - low + 1, column - low) + offset
        np.put_along_axis(out, index[:, :, None], 1.0, axis=2)
        offset += width
    return out.reshape(B, T * cell)


def prediction_features(probs):
    probs = np.asarray(probs, dtype=np.float64)
    entropy = -np.sum(probs * np.log(np.maximum(probs, PROB_FLOOR)), axis=1, keepdims=True)
    return np.concatenate([probs, entropy], axis=1)


def time_features(B, t, T):
    onehot = np.zeros((B, T))
    onehot[:, t - 1] = 1.0
    return onehot


def policy_inputs(observed, actions, t, arch, pred_features=None):
    """Numpy policy input at timestep t from the prefix x~_{1:t-1}, a_{1:t-1}."""
    B = observed.shape[0]
    parts = [
        encode_observed(observed, arch),
        np.asarray(actions, dtype=np.float64).reshape(B, -1),
        time_features(B, t, arch["T"]),
    ]
    if arch["predict_conditioning"]:
        if pred_features is None:
            raise InputError("policy is conditioned on predictions but none were given")
        parts.append(pred_features)
    return np.concatenate(parts, axis=1)


# networks

def _mlp(tensors, x, n_layers, start=0):
    h = x
    for i in range(start, n_layers):
        h = h @ tensors[f"l{i}.W"] + tensors[f"l{i}.b"]
        if i < n_layers - 1:
            h = h.tanh()
    return h


def classifier_logits(tensors, arch, x):
    return _mlp(tensors, x, len(arch["hidden"]) + 1)


def policy_heads(policy_tensors, baseline_tensors, arch, x, with_baseline=False):
    """Bounded policy logits (B, M) and, optionally, baseline values (B,)."""
    n_layers = len(arch["hidden"]) + 1
    if arch["shared_trunk"] and arch["hidden"]:
        trunk = (x @ policy_tensors["l0.W"] + policy_tensors["l0.b"]).tanh()
        raw = _mlp(policy_tensors, trunk, n_layers, start=1)
        baseline = _mlp(baseline_tensors, trunk, n_layers, start=1) if with_baseline else None
    else:
        raw = _mlp(policy_tensors, x, n_layers)
        baseline = _mlp(baseline_tensors, x, n_layers) if with_baseline else None
    logits = (raw * (1.0 / LOGIT_BOUND)).tanh() * LOGIT_BOUND
    if baseline is not None:
        baseline = baseline.reshape(-1)
    return logits, baseline


def classifier_forward(params, observed):
    """Class probabilities (B, K) for a batch of masked sequences."""
    arch = params.arch
    with no_grad():
        x = Tensor(encode_observed(observed, arch))
        logits = classifier_logits(params.blocks["classifier"].tensors(), arch, x)
        return logits.softmax(axis=1).value


def policy_forward(params, observed, actions, t, pred_features=None):
    """Acquisition probabilities (B, M) for timestep t."""
    if not 1 <= t <= params.arch["T"]:
        raise InputError(f"timestep {t} outside 1..{params.arch['T']}")
    x = Tensor(policy_inputs(observed, actions, t, params.arch, pred_features))
    with no_grad():
        logits, _ = policy_heads(params.blocks["policy"].tensors(), None, params.arch, x)
        return logits.sigmoid().value


class Classifier:
    def __init__(self, params):
        self.params = params

    @property
    def num_classes(self):
        return self.params.arch["num_classes"]

    def predict_proba(self, observed):
        return classifier_forward(self.params, observed)


class AgentPolicy(Policy):
    """Learned policy acting on a batch; samples Bernoulli actions unless greedy."""

    name = "agent"

    def __init__(self, params, classifier=None, greedy=False):
        self.params = params
        self.classifier = classifier or Classifier(params)
        self.greedy = greedy
        self.stochastic = not greedy

    def act(self, observed, actions, t):
        pred = None
        if self.params.arch["predict_conditioning"]:
            pred = prediction_features(self.classifier.predict_proba(observed))
        probs = policy_forward(self.params, observed, actions, t, pred)
        if self.greedy:
            return (probs > 0.5).astype(np.int8)
        return (self.rng.random(probs.shape) < probs).astype(np.int8)


# optimisation

class Adam:
    """Adam over named flat blocks with L2 weight decay, cosine decay and global-norm clipping."""

    def __init__(self, names, lr=3e-4, total_steps=0, schedule="cosine", weight_decay=1e-6,
                 clip_norm=10.0, betas=(0.9, 0.999), eps=1e-8):
        self.names = list(names)
        self.lr = lr
        self.total_steps = total_steps
        self.schedule = schedule
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {}
        self.v = {}

    def learning_rate(self, step=None):
        step = self.step_count if step is None else step
        if self.schedule == "constant" or not self.total_steps:
            return self.lr
        progress = min(step / self.total_steps, 1.0)
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * progress))

    def step(self, params, grads):
        for name in self.names:
            if not np.all(np.isfinite(grads[name])):
                raise TrainingError(f"non-finite gradient in block {name!r} at step {self.step_count}")

        norm = math.sqrt(sum(float(np.dot(grads[name], grads[name])) for name in self.names))
        scale = self.clip_norm / norm if self.clip_norm and norm > self.clip_norm else 1.0

        lr = self.learning_rate()
        self.step_count += 1
        beta1, beta2 = self.betas
        for name in self.names:
            flat = params.blocks[name].flat
            g = grads[name] * scale + self.weight_decay * flat
            m = self.m.setdefault(name, np.zeros_like(flat))
            v = self.v.setdefault(name, np.zeros_like(flat))
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            m_hat = m / (1.0 - beta1 ** self.step_count)
            v_hat = v / (1.0 - beta2 ** self.step_count)
            flat -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return norm

    def state_dict(self):
        return {
            "names": self.names,
            "lr": self.lr,
            "total_steps": self.total_steps,
            "schedule": self.schedule,
            "weight_decay": self.weight_decay,
            "clip_norm": self.clip_norm,
            "step_count": self.step_count,
        }

    def moments(self):
        return self.m, self.v

    @classmethod
    def from_state(cls, state, m, v):
        opt = cls(
            state["names"],
            lr=state["lr"],
            total_steps=state["total_steps"],
            schedule=state["schedule"],
            weight_decay=state["weight_decay"],
            clip_norm=state["clip_norm"],
        )
        opt.step_count = state["step_count"]
        opt.m = {k: np.array(val, dtype=np.float64) for k, val in m.items()}
        opt.v = {k: np.array(val, dtype=np.float64) for k, val in v.items()}
        return opt


def _check_loss(value, what, step):
    if not np.all(np.isfinite(value)):
        raise TrainingError(f"{what} became non-finite at step {step}: {value!r}")


def sample_batch(dataset, batch_size, rng):
    rows = rng.integers(0, len(dataset), size=batch_size)
    values = np.stack([dataset.digits[rows], dataset.counter[rows]], axis=2)
    return values, dataset.labels[rows]


# mode A: straight-through Gumbel

def logistic_noise(rng, shape):
    """Difference of two standard Gumbel draws (acquire minus skip)."""
    u1 = rng.random(shape)
    u0 = rng.random(shape)
    tiny = np.finfo(np.float64).tiny
    return -np.log(-np.log(u1 + tiny) + tiny) + np.log(-np.log(u0 + tiny) + tiny)


def gumbel_rollout(tensors, arch, values, labels, costs, noise, tau, hard=True):
    """
    Differentiable episode over a batch. Returns the per-episode loss and
    cost tensors plus the numpy actions (thresholded) and class probabilities.
    With hard=False the relaxed samples are used in the forward pass as well.
    """
    values = np.asarray(values)
    B, T, M = values.shape
    full = encode_observed(values, arch)
    empty = encode_observed(np.full_like(values, MISSING), arch)
    reveal = full - empty
    cell = sum(arch["cell_widths"])
    widths = np.cumsum([0] + arch["cell_widths"])

    enc = Tensor(empty)
    hist = Tensor(np.zeros((B, T * M)))
    cost = Tensor(np.zeros(B))
    actions = np.zeros((B, T, M), dtype=np.int8)
    cf = tensors["classifier"]

    for t in range(1, T + 1):
        parts = [enc, hist, Tensor(time_features(B, t, T))]
        if arch["predict_conditioning"]:
            with no_grad():
                probs = classifier_logits(cf, arch, Tensor(enc.value)).softmax(axis=1).value
            parts.append(Tensor(prediction_features(probs)))
        logits, _ = policy_heads(tensors["policy"], None, arch, concat(parts, axis=1))

        shifted = logits + Tensor(noise[:, t - 1])
        soft = (shifted * (1.0 / tau)).sigmoid()
        hard_bits = (shifted.value > 0).astype(np.float64)
        a_t = straight_through(hard_bits, soft) if hard else soft
        actions[:, t - 1] = hard_bits.astype(np.int8)

        for m in range(M):
            column = a_t[:, m:m + 1]
            slot = np.zeros((1, T * cell))
            start = (t - 1) * cell
            slot[0, start + widths[m]:start + widths[m + 1]] = 1.0
            enc = enc + column * (reveal * slot)
            unit = np.zeros((1, T * M))
            unit[0, (t - 1) * M + m] = 1.0
            hist = hist + column * unit
            cost = cost + column.reshape(-1) * costs.c[m]

    log_probs = classifier_logits(cf, arch, enc).log_softmax(axis=1)
    onehot = np.zeros((B, arch["num_classes"]))
    onehot[np.arange(B), labels] = 1.0
    loss = -(log_probs * onehot).sum(axis=1)
    return {"loss": loss, "cost": cost, "actions": actions, "probs": np.exp(log_probs.value)}


def gumbel_train_step(params, optimizer, batch, cfg, rng):
    """One joint update: ascend -C(a) - L in theta_pi, descend L in theta_f."""
    values, labels = batch
    tensors = params.tensors()
    noise = logistic_noise(rng, values.shape)
    out = gumbel_rollout(tensors, params.arch, values, labels, cfg.costs, noise, cfg.tau, hard=True)

    objective = (out["loss"] + out["cost"]).mean()
    _check_loss(objective.value, "Gumbel objective", optimizer.step_count)
    objective.backward()

    grads = params.gather(tensors)
    grad_norm = optimizer.step(params, grads)

    probs = out["probs"]
    hard_cost = (out["actions"] * np.asarray(cfg.costs.c)).sum(axis=(1, 2))
    loss = categorical_nll(probs, labels)
    return params, {
        "objective": float(np.mean(-hard_cost - loss)),
        "loss": float(np.mean(loss)),
        "cost": float(np.mean(hard_cost)),
        "accuracy": float(np.mean(np.argmax(probs, axis=1) == labels)),
        "rates": out["actions"].mean(axis=(0, 1)).tolist(),
        "grad_norm": grad_norm,
    }


# mode B: pretraining and A2C

def mask_sampler(name, arch, counter_low=0):
    """Callable (values, rng) -> (B, T, M) masks for classifier pretraining."""
    T, M = arch["T"], arch["M"]
    if name == "oracle":
        return lambda values, rng: np.stack([oracle_actions(v[:, 1], counter_low) for v in values])
    spec = name if isinstance(name, MaskSpec) else MaskSpec.preset(name, M)
    return lambda values, rng: sample_mask(spec, T, M, rng, size=values.shape[0])


def classifier_loss(tensors, arch, observed, labels):
    x = Tensor(encode_observed(observed, arch))
    log_probs = classifier_logits(tensors, arch, x).log_softmax(axis=1)
    onehot = np.zeros((observed.shape[0], arch["num_classes"]))
    onehot[np.arange(observed.shape[0]), labels] = 1.0
    return -(log_probs * onehot).sum(axis=1).mean()


def pretrain_classifier(params, dataset, masks, cfg, rng, steps=None, optimizer=None):
    """
    Fit theta_f on masked inputs; `masks` is a mask preset name, a MaskSpec or
    'oracle'. Returns (params, loss history, optimizer).
    """
    steps = cfg.pretrain_steps if steps is None else steps
    counter_low = dataset.config.counter_low
    draw = masks if callable(masks) else mask_sampler(masks, params.arch, counter_low)
    optimizer = optimizer or Adam(
        ["classifier"], lr=cfg.learning_rate, total_steps=steps, schedule=cfg.lr_schedule,
        weight_decay=cfg.weight_decay, clip_norm=cfg.grad_clip,
    )
    history = []
    for step in range(steps):
        values, labels = sample_batch(dataset, cfg.batch_size, rng)
        observed = np.where(draw(values, rng).astype(bool), values, MISSING)
        tensors = params.blocks["classifier"].tensors()
        loss = classifier_loss(tensors, params.arch, observed, labels)
        _check_loss(loss.value, "classifier loss", step)
        loss.backward()
        optimizer.step(params, {"classifier": params.blocks["classifier"].gather(tensors)})
        history.append(float(loss.value))
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            logger.info("pretrain step %d loss %.4f lr %.2e", step + 1, history[-1], optimizer.learning_rate())
    return params, history, optimizer


def action_log_probs(logits, actions):
    """log pi(a | o) per row: independent Bernoulli heads summed over modalities."""
    a = np.asarray(actions, dtype=np.float64)
    return (logits.log_sigmoid() * a + (-logits).log_sigmoid() * (1.0 - a)).sum(axis=1)


def policy_gradient_loss(log_probs, returns, baseline=None):
    """-mean_b sum_t log pi(a_t | o_t) * (G_t - b_t), advantages held constant."""
    returns = np.asarray(returns, dtype=np.float64)
    advantage = returns if baseline is None else returns - np.asarray(baseline, dtype=np.float64)
    return -(log_probs * Tensor(advantage)).sum(axis=1).mean()


def a2c_loss(logits, baseline, actions, returns, cfg):
    """
    Policy-gradient, entropy and value terms for one batch of episodes.

    `logits` is (B * T, M) and `baseline` (B * T,) with rows in episode-major
    order; `actions` is (B, T, M) and `returns` (B, T).
    """
    returns = np.asarray(returns, dtype=np.float64)
    B, T = returns.shape
    log_probs = action_log_probs(logits, np.asarray(actions).reshape(B * T, -1)).reshape(B, T)
    log_p, log_q = logits.log_sigmoid(), (-logits).log_sigmoid()
    p = logits.sigmoid()
    entropy = -(p * log_p + (1.0 - p) * log_q).sum(axis=1).reshape(B, T).sum(axis=1).mean()

    baseline = baseline.reshape(B, T)
    pg_loss = policy_gradient_loss(log_probs, returns, baseline.value)
    error = baseline - Tensor(returns)
    value_loss = (error * error).sum(axis=1).mean() * 0.5
    loss = pg_loss - entropy * cfg.entropy_coef + value_loss * cfg.value_coef
    return loss, entropy, value_loss


def a2c_rollout(params, values, labels, cfg, rng):
    """Sample episodes with the current policy; returns inputs, actions and rewards."""
    arch = params.arch
    B, T, M = values.shape
    episode = BatchEpisode(values, labels, cfg.costs)
    classifier = Classifier(params)
    conditioned = arch["predict_conditioning"]
    shaped = cfg.intermediate_reward and cfg.alpha != 0.0

    inputs = np.zeros((B, T, arch["policy_in"]))
    step_costs = np.zeros((B, T))
    prefix_losses = np.zeros((B, T + 1))
    probs = classifier.predict_proba(episode.observed) if (conditioned or shaped) else None
    if probs is not None:
        prefix_losses[:, 0] = categorical_nll(probs, labels)

    for t in range(1, T + 1):
        pred = prediction_features(probs) if conditioned else None
        inputs[:, t - 1] = policy_inputs(episode.observed, episode.actions, t, arch, pred)
        with no_grad():
            logits, _ = policy_heads(params.blocks["policy"].tensors(), None, arch, Tensor(inputs[:, t - 1]))
        a_t = (rng.random((B, M)) < logits.sigmoid().value).astype(np.int8)
        step_costs[:, t - 1] = episode.step(a_t)
        if conditioned or shaped:
            probs = classifier.predict_proba(episode.observed)
            prefix_losses[:, t] = categorical_nll(probs, labels)

    final = classifier.predict_proba(episode.observed)
    outcome = episode.finalize(final)
    prefix_losses[:, T] = outcome["loss"]

    rewards = np.zeros((B, T + 1))
    rewards[:, :T] = -step_costs
    if shaped:
        rewards[:, :T] += intermediate_terms(prefix_losses, cfg.alpha, cfg.gamma)
    rewards[:, T] = -outcome["loss"]

    return {
        "inputs": inputs,
        "actions": episode.actions,
        "rewards": rewards,
        "returns": discounted_returns(rewards, cfg.gamma),
        "outcome": outcome,
        "probs": final,
        "prefix_losses": prefix_losses,
    }


def a2c_train_step(params, optimizer, batch, cfg, rng):
    """One actor-critic update of theta_pi and theta_b with theta_f frozen."""
    values, labels = batch
    arch = params.arch
    B, T, _ = values.shape
    roll = a2c_rollout(params, values, labels, cfg, rng)
    returns = roll["returns"][:, :T]

    tensors = params.tensors()
    x = Tensor(roll["inputs"].reshape(B * T, -1))
    logits, baseline = policy_heads(tensors["policy"], tensors["baseline"], arch, x, with_baseline=True)

    loss, entropy, value_loss = a2c_loss(logits, baseline, roll["actions"], returns, cfg)
    _check_loss(loss.value, "A2C loss", optimizer.step_count)
    loss.backward()

    grads = params.gather(tensors)
    grad_norm = optimizer.step(params, grads)

    outcome = roll["outcome"]
    return params, {
        "objective": float(np.mean(outcome["total"])),
        "reward": float(np.mean(roll["rewards"].sum(axis=1))),
        "loss": float(np.mean(outcome["loss"])),
        "cost": float(np.mean(outcome["cost"])),
        "accuracy": float(np.mean(np.argmax(roll["probs"], axis=1) == labels)),
        "rates": roll["actions"].mean(axis=(0, 1)).tolist(),
        "value_loss": float(value_loss.value),
        "entropy": float(entropy.value),
        "grad_norm": grad_norm,
    }


# training driver

@dataclass
class TrainResult:
    params: ModelParams
    optimizer: Adam
    history: list
    pretrain_history: list = field(default_factory=list)


def new_params(dataset, cfg, rng):
    arch = build_architecture(dataset.config, cfg.hidden, cfg.mode, cfg.predict_conditioning)
    return init_params(arch, rng)


def train_agent(dataset, cfg, rng, params=None, pretrained=False):
    """
    Full pipeline for either mode. In a2c mode the classifier is pretrained
    first unless `pretrained` is set.
    """
    params = params or new_params(dataset, cfg, rng)
    pretrain_history = []

    if cfg.mode == "gumbel_joint":
        optimizer = Adam(["classifier", "policy"], lr=cfg.learning_rate, total_steps=cfg.steps,
                         schedule=cfg.lr_schedule, weight_decay=cfg.weight_decay, clip_norm=cfg.grad_clip)
        step_fn = gumbel_train_step
    else:
        if not pretrained:
            params, pretrain_history, _ = pretrain_classifier(params, dataset, cfg.pretrain_masks, cfg, rng)
        optimizer = Adam(["policy", "baseline"], lr=cfg.learning_rate, total_steps=cfg.steps,
                         schedule=cfg.lr_schedule, weight_decay=cfg.weight_decay, clip_norm=cfg.grad_clip)
        step_fn = a2c_train_step

    history = []
    for step in range(cfg.steps):
        batch = sample_batch(dataset, cfg.batch_size, rng)
        params, stats = step_fn(params, optimizer, batch, cfg, rng)
        if cfg.log_every and ((step + 1) % cfg.log_every == 0 or step + 1 == cfg.steps):
            stats = dict(stats, step=step + 1, lr=optimizer.learning_rate())
            history.append(stats)
            logger.info(
                "%s step %d objective %.4f loss %.4f accuracy %.3f rates %s",
                cfg.mode, step + 1, stats["objective"], stats["loss"], stats["accuracy"],
                " ".join(f"{r:.3f}" for r in stats["rates"]),
            )
    return TrainResult(params=params, optimizer=optimizer, history=history, pretrain_history=pretrain_history)


# gradient verification

def _loss_closure(kind, params, probe, cfg):
    arch = params.arch
    if kind == "classifier":
        return lambda tensors: classifier_loss(tensors["classifier"], arch, probe["observed"], probe["labels"])
    if kind == "gumbel":
        def surrogate(tensors):
            out = gumbel_rollout(tensors, arch, probe["values"], probe["labels"], cfg.costs,
                                 probe["noise"], cfg.tau, hard=False)
            return (out["loss"] + out["cost"]).mean()
        return surrogate
    raise InputError(f"unknown gradient check target {kind!r}")


def make_probe(dataset, size, rng, mask="m1"):
    values, labels = sample_batch(dataset, size, rng)
    T, M = values.shape[1:]
    masks = sample_mask(MaskSpec.preset(mask, M), T, M, rng, size=size)
    return {
        "values": values,
        "labels": labels,
        "observed": np.where(masks.astype(bool), values, MISSING),
        "noise": logistic_noise(rng, values.shape),
    }


LOSS_BLOCKS = {"classifier": ("classifier",), "gumbel": ("classifier", "policy")}


def loss_coordinates(params, kind):
    """Flat indices of the blocks a gradient check target depends on."""
    if kind not in LOSS_BLOCKS:
        raise InputError(f"unknown gradient check target {kind!r}")
    return np.concatenate([np.arange(*params.span(name)) for name in LOSS_BLOCKS[kind]])


def grad_check_details(params, probe, eps=1e-5, coords=None, n_coords=100, rng=None, kind="classifier", cfg=None):
    """Analytic and central-difference gradients on selected flat coordinates."""
    if not 1e-7 <= eps <= 1e-3:
        raise InputError(f"finite-difference step {eps} outside [1e-7, 1e-3]")
    cfg = cfg or TrainConfig()
    loss_fn = _loss_closure(kind, params, probe, cfg)
    work = params.copy()
    base = work.to_vector()

    tensors = work.tensors()
    loss_fn(tensors).backward()
    grads = work.gather(tensors)
    analytic_all = np.concatenate([grads[name] for name in work.names()])

    if coords is None:
        rng = rng or np.random.default_rng(0)
        candidates = loss_coordinates(work, kind)
        coords = rng.choice(candidates, size=min(n_coords, candidates.size), replace=False)
    coords = np.asarray(coords)

    numeric = np.zeros(coords.size)
    for i, index in enumerate(coords):
        shifted = base.copy()
        shifted[index] += eps
        work.load_vector(shifted)
        with no_grad():
            plus = float(loss_fn(work.tensors()).value)
        shifted[index] -= 2 * eps
        work.load_vector(shifted)
        with no_grad():
            minus = float(loss_fn(work.tensors()).value)
        numeric[i] = (plus - minus) / (2 * eps)
    work.load_vector(base)
    return coords, analytic_all[coords], numeric


def relative_errors(analytic, numeric, floor=1e-10):
    """
    |a - n| / max(|a|, |n|); coordinates where both magnitudes are below
    `floor` count as exact.
    """
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    errors = np.zeros_like(scale)
    checked = scale >= floor
    errors[checked] = np.abs(analytic[checked] - numeric[checked]) / scale[checked]
    return errors


def grad_check(params, probe, eps=1e-5, n_coords=100, rng=None, kind="classifier", cfg=None):
    """Max relative error between reverse-mode and central-difference gradients."""
    _, analytic, numeric = grad_check_details(params, probe, eps, n_coords=n_coords, rng=rng, kind=kind, cfg=cfg)
    errors = relative_errors(analytic, numeric)
    return float(errors.max()) if errors.size else 0.0
