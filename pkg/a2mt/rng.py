"""
SplitMix64 generator used for dataset generation and seed derivation.

state <- state + 0x9E3779B97F4A7C15 (mod 2^64)
z <- (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
z <- (z ^ (z >> 27)) * 0x94D049BB133111EB
out <- z ^ (z >> 31)

Bounded integers use rejection on the top bits, so draws are unbiased and
identical on every platform.
"""

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def mix64(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def substream_seed(master_seed, index):
    """Deterministic 64-bit seed for stream `index` under `master_seed`."""
    return mix64((int(master_seed) ^ mix64((int(index) + 1) * GOLDEN_GAMMA & MASK64)) & MASK64)


class SplitMix64:
    def __init__(self, seed=0):
        self.state = int(seed) & MASK64

    def next_u64(self):
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)

    def randbelow(self, n):
        """Uniform integer on [0, n)."""
        if n <= 0:
            raise ValueError("n must be positive")
        bits = max(1, (n - 1).bit_length())
        while True:
            r = self.next_u64() >> (64 - bits)
            if r < n:
                return r

    def integers(self, low, high, size=None):
        """Uniform integers on [low, high), mirroring numpy's exclusive upper bound."""
        if high <= low:
            raise ValueError(f"empty range [{low}, {high})")
        if size is None:
            return low + self.randbelow(high - low)
        return [low + self.randbelow(high - low) for _ in range(int(size))]

    def random(self):
        """Uniform float on [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))


_GAMMA = np.uint64(GOLDEN_GAMMA)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)


def mix64_array(z):
    """mix64 over a uint64 array, wrapping mod 2^64."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MUL1
        z = (z ^ (z >> np.uint64(27))) * _MUL2
    return z ^ (z >> np.uint64(31))


def substream_seeds(master_seed, indices):
    """substream_seed for many indices at once."""
    indices = np.asarray(indices, dtype=np.uint64)
    master = np.uint64(int(master_seed) & MASK64)
    with np.errstate(over="ignore"):
        inner = mix64_array((indices + np.uint64(1)) * _GAMMA)
    return mix64_array(master ^ inner)


class SplitMix64Lanes:
    """
    Independent SplitMix64 streams advanced side by side. Lane i produces
    exactly the draws of SplitMix64(seeds[i]); calls take the lanes to advance,
    so lanes may consume different numbers of draws.
    """

    def __init__(self, seeds):
        self.state = np.array(seeds, dtype=np.uint64).reshape(-1)

    def __len__(self):
        return int(self.state.size)

    def next_u64(self, lanes):
        lanes = np.asarray(lanes, dtype=np.intp)
        with np.errstate(over="ignore"):
            self.state[lanes] += _GAMMA
        return mix64_array(self.state[lanes])

    def randbelow(self, n, lanes):
        """One uniform integer on [0, n) per lane in `lanes`."""
        if n <= 0:
            raise ValueError("n must be positive")
        lanes = np.asarray(lanes, dtype=np.intp)
        shift = np.uint64(64 - max(1, (n - 1).bit_length()))
        bound = np.uint64(n)
        out = np.empty(lanes.size, dtype=np.int64)
        pending = np.arange(lanes.size)
        while pending.size:
            r = self.next_u64(lanes[pending]) >> shift
            accepted = r < bound
            out[pending[accepted]] = r[accepted].astype(np.int64)
            pending = pending[~accepted]
        return out

    def integers(self, low, high, lanes):
        if high <= low:
            raise ValueError(f"empty range [{low}, {high})")
        return low + self.randbelow(high - low, lanes)


def numpy_generator(master_seed, index):
    """numpy Generator for training-time noise, derived from the master seed."""
    return np.random.Generator(np.random.PCG64(substream_seed(master_seed, index)))


# substream indices under the master seed
INIT_STREAM = 0
PRETRAIN_STREAM = 1
TRAIN_STREAM = 2
EVAL_STREAM = 3
GRADCHECK_STREAM = 4
