"""
Synthetic counter/digit sequences.

The counter modality is a concatenation of countdowns (start, start-1, ...,
counter_low); the label is the sum of digits at every timestep where the
counter sits at counter_low. Modality 0 is `digit`, modality 1 is `counter`.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from a2mt.exceptions import ConfigurationError, DatasetFileError, InputError
from a2mt.rng import SplitMix64, SplitMix64Lanes, substream_seed, substream_seeds

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DIGIT, COUNTER = 0, 1
MODALITIES = ("digit", "counter")


@dataclass(frozen=True)
class SyntheticConfig:
    length: int = 10
    digit_low: int = 0
    digit_high: int = 2
    counter_low: int = 0
    counter_high: int = 2
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.length < 1:
            raise ConfigurationError(f"length must be >= 1, got {self.length}")
        if self.digit_low < 0:
            raise ConfigurationError("digit_low must be >= 0 so labels stay non-negative")
        if self.digit_low > self.digit_high:
            raise ConfigurationError(f"digit range [{self.digit_low}, {self.digit_high}] is empty")
        if self.counter_low >= self.counter_high:
            raise ConfigurationError(
                f"counter_low ({self.counter_low}) must be below counter_high ({self.counter_high})"
            )

    @property
    def value_ranges(self):
        """Inclusive (low, high) per modality."""
        return ((self.digit_low, self.digit_high), (self.counter_low, self.counter_high))

    def metadata(self):
        data = asdict(self)
        data.pop("seed")
        return data


@dataclass
class LabeledSequence:
    digits: list
    counter: list
    label: int

    @property
    def length(self):
        return len(self.digits)

    def values(self):
        """(T, 2) integer array, digit then counter."""
        return np.stack([np.asarray(self.digits), np.asarray(self.counter)], axis=1).astype(np.int64)


@dataclass
class OracleSchedule:
    actions: np.ndarray
    digit_rate: float
    counter_rate: float


def num_classes(cfg):
    # every countdown spans at least two timesteps
    return cfg.digit_high * (cfg.length // 2) + 1


def draw_sequence(cfg, rng):
    """
    Draw one sequence. `rng.integers(low, high, size=None)` must use an
    exclusive upper bound (SplitMix64 and numpy Generators both do).
    """
    cfg.validate()
    length = cfg.length
    digits, counter, important_digits = [], [], []

    while len(digits) < length:
        max_count = int(rng.integers(cfg.counter_low + 1, cfg.counter_high + 1))
        counter_i = list(range(max_count, cfg.counter_low - 1, -1))
        counter.extend(counter_i)

        digits_i = [int(d) for d in rng.integers(cfg.digit_low, cfg.digit_high + 1, size=len(counter_i))]
        # only a countdown that fits completely contributes its last digit
        if len(digits_i) + len(digits) <= length:
            important_digits.append(digits_i[-1])
        digits.extend(digits_i)

    return LabeledSequence(
        digits=digits[:length],
        counter=counter[:length],
        label=int(sum(important_digits)),
    )


def draw_sequences(cfg, seed, indices):
    """
    Batch form of draw_sequence: row i equals
    draw_sequence(cfg, sequence_rng(seed, indices[i])).
    Returns digits (N, T), counter (N, T) and labels (N,).
    """
    cfg.validate()
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    n, length = indices.size, cfg.length
    rng = SplitMix64Lanes(substream_seeds(seed, indices))
    span = cfg.counter_high - cfg.counter_low + 1
    digits = np.zeros((n, length + span), dtype=np.int64)
    counter = np.zeros_like(digits)
    labels = np.zeros(n, dtype=np.int64)
    pos = np.zeros(n, dtype=np.int64)

    active = np.arange(n)
    while active.size:
        max_count = rng.integers(cfg.counter_low + 1, cfg.counter_high + 1, active)
        run = max_count - cfg.counter_low + 1
        last = np.zeros(active.size, dtype=np.int64)
        for j in range(int(run.max())):
            drawing = np.flatnonzero(run > j)
            lanes = active[drawing]
            drawn = rng.integers(cfg.digit_low, cfg.digit_high + 1, lanes)
            digits[lanes, pos[lanes] + j] = drawn
            counter[lanes, pos[lanes] + j] = max_count[drawing] - j
            last[drawing] = drawn
        fits = pos[active] + run <= length
        labels[active[fits]] += last[fits]
        pos[active] += run
        active = active[pos[active] < length]

    return digits[:, :length], counter[:, :length], labels


def labels_of(digits, counter, counter_low):
    """label_of over (N, T) batches."""
    digits, counter = np.asarray(digits), np.asarray(counter)
    if digits.shape != counter.shape:
        raise InputError(f"digits {digits.shape} and counter {counter.shape} shapes differ")
    return (digits * (counter == counter_low)).sum(axis=-1)


def label_of(digits, counter, counter_low):
    if len(digits) != len(counter):
        raise InputError(f"digits ({len(digits)}) and counter ({len(counter)}) lengths differ")
    return int(sum(d for d, c in zip(digits, counter) if c == counter_low))


def _check_counter(counter, counter_low):
    counter = np.asarray(counter, dtype=np.int64)
    if counter.ndim != 1 or counter.size == 0:
        raise InputError("counter must be a non-empty 1-d sequence")
    if np.any(counter < counter_low):
        raise InputError(f"counter has values below counter_low={counter_low}")
    return counter


def countdown_starts(counter, counter_low):
    """Boolean mask of countdown starts: t=1 and every step after a counter_low."""
    counter = _check_counter(counter, counter_low)
    starts = np.zeros(counter.size, dtype=bool)
    starts[0] = True
    starts[1:] = counter[:-1] == counter_low
    return starts


def oracle_actions(counter, counter_low):
    """
    (T, 2) acquisition matrix of the oracle: digit exactly at counter_low,
    counter at every countdown start except one falling on the last timestep.
    """
    counter = _check_counter(counter, counter_low)
    return oracle_action_batch(counter[None, :], counter_low)[0]


def oracle_action_batch(counter, counter_low):
    """oracle_actions over an (N, T) counter batch -> (N, T, 2)."""
    counter = np.asarray(counter, dtype=np.int64)
    if counter.ndim != 2 or counter.shape[1] == 0:
        raise InputError("counter batch must be a non-empty (N, T) array")
    if np.any(counter < counter_low):
        raise InputError(f"counter has values below counter_low={counter_low}")
    actions = np.zeros(counter.shape + (2,), dtype=np.int8)
    actions[:, :, DIGIT] = counter == counter_low
    actions[:, 0, COUNTER] = 1
    actions[:, 1:, COUNTER] = counter[:, :-1] == counter_low
    actions[:, -1, COUNTER] = 0
    return actions


def oracle_schedule(counter, counter_low):
    actions = oracle_actions(counter, counter_low)
    digit_rate, counter_rate = actions.mean(axis=0)
    return OracleSchedule(actions=actions, digit_rate=float(digit_rate), counter_rate=float(counter_rate))


def sequence_rng(seed, index):
    return SplitMix64(substream_seed(seed, index))


def oracle_rates(cfg, n_sequences, seed, chunk=1 << 16):
    if n_sequences < 1:
        raise InputError("n_sequences must be >= 1")

    totals = np.zeros(2, dtype=np.int64)
    for start in range(0, n_sequences, chunk):
        _, counter, _ = draw_sequences(cfg, seed, np.arange(start, min(start + chunk, n_sequences)))
        totals += oracle_action_batch(counter, cfg.counter_low).sum(axis=(0, 1))

    digit_rate, counter_rate = totals / float(n_sequences * cfg.length)
    return float(digit_rate), float(counter_rate)


def _draw_records(cfg, seed, indices, threads):
    chunks = np.array_split(np.asarray(indices, dtype=np.int64), max(1, threads or 1))

    def _chunk(idx):
        return idx, draw_sequences(cfg, seed, idx)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            drawn = list(pool.map(_chunk, chunks))
    else:
        drawn = [_chunk(idx) for idx in chunks]

    records = []
    for idx, (digits, counter, labels) in drawn:
        for i, d, c, label in zip(idx.tolist(), digits.tolist(), counter.tolist(), labels.tolist()):
            records.append({"idx": i, "digits": d, "counter": c, "label": label})
    return records


def write_dataset(path, cfg, seed, records, split):
    header = {
        "format_version": FORMAT_VERSION,
        "config": cfg.metadata(),
        "seed": int(seed),
        "count": len(records),
        "split": split,
    }
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(header, separators=(",", ":")) + "\n")
            for record in records:
                fh.write(json.dumps(record, separators=(",", ":")) + "\n")
    except OSError as e:
        raise DatasetFileError(f"could not write dataset {path}: {e}") from e
    return Path(path)


def generate_dataset(cfg, n_train, n_test, seed, out_dir, threads=1):
    """
    Write train.jsonl and test.jsonl under out_dir. Sequence i (train first,
    then test) is drawn from its own sub-seed, so thread count and order
    never change the bytes.
    """
    if n_train < 1 or n_test < 1:
        raise InputError("dataset sizes must be >= 1")

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetFileError(f"could not create {out_dir}: {e}") from e

    paths = {}
    splits = (("train", range(0, n_train)), ("test", range(n_train, n_train + n_test)))
    for split, indices in splits:
        records = _draw_records(cfg, seed, indices, threads)
        paths[split] = write_dataset(out_dir / f"{split}.jsonl", cfg, seed, records, split)
        logger.info("wrote %d %s sequences to %s", len(records), split, paths[split])
    return paths


@dataclass
class SyntheticDataset:
    config: SyntheticConfig
    digits: np.ndarray
    counter: np.ndarray
    labels: np.ndarray
    seed: int = 0
    split: str = ""
    indices: np.ndarray = field(default=None)

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def values(self):
        return np.stack([self.digits, self.counter], axis=2)

    @property
    def num_classes(self):
        return num_classes(self.config)

    def subset(self, rows):
        rows = np.asarray(rows)
        return SyntheticDataset(
            config=self.config,
            digits=self.digits[rows],
            counter=self.counter[rows],
            labels=self.labels[rows],
            seed=self.seed,
            split=self.split,
            indices=None if self.indices is None else self.indices[rows],
        )

    def sequence(self, row):
        return LabeledSequence(
            digits=self.digits[row].tolist(),
            counter=self.counter[row].tolist(),
            label=int(self.labels[row]),
        )


def sample_dataset(cfg, n, seed, offset=0):
    """In-memory dataset drawn with the same sub-seed scheme as generate_dataset."""
    digits, counter, labels = draw_sequences(cfg, seed, np.arange(offset, offset + n))
    return SyntheticDataset(
        config=cfg, digits=digits, counter=counter, labels=labels, seed=seed, indices=np.arange(n),
    )


def load_dataset(path):
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise DatasetFileError(f"could not read dataset {path}: {e}") from e

    parsed = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            parsed.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise DatasetFileError(f"{path}: invalid JSON on line {lineno}: {e.msg}") from e
    if not parsed:
        raise DatasetFileError(f"{path} is empty")
    header, records = parsed[0], parsed[1:]
    if not isinstance(header, dict):
        raise DatasetFileError(f"{path}: header is not a JSON object")
    if header.get("format_version") != FORMAT_VERSION:
        raise DatasetFileError(
            f"{path}: unsupported format_version {header.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    try:
        cfg = SyntheticConfig(seed=header["seed"], **header["config"])
        count = int(header["count"])
    except (TypeError, KeyError, ValueError) as e:
        raise DatasetFileError(f"{path}: malformed header: {e!r}") from e

    if len(records) != count:
        raise DatasetFileError(f"{path}: header count {count} but {len(records)} records")

    try:
        digits = np.array([r["digits"] for r in records], dtype=np.int64).reshape(count, -1)
        counter = np.array([r["counter"] for r in records], dtype=np.int64).reshape(count, -1)
        labels = np.array([r["label"] for r in records], dtype=np.int64)
        indices = np.array([r["idx"] for r in records], dtype=np.int64)
    except (TypeError, KeyError, ValueError) as e:
        raise DatasetFileError(f"{path}: malformed record: {e!r}") from e
    if digits.shape != (count, cfg.length) or counter.shape != digits.shape:
        raise DatasetFileError(f"{path}: records do not all have length {cfg.length}")
    bad = np.flatnonzero(labels_of(digits, counter, cfg.counter_low) != labels)
    if bad.size:
        raise DatasetFileError(f"{path}: record {indices[bad[0]]} has an inconsistent label")

    return SyntheticDataset(
        config=cfg,
        digits=digits,
        counter=counter,
        labels=labels,
        seed=int(header["seed"]),
        split=header.get("split", ""),
        indices=indices,
    )
