"""Chunk mathematics: attention bias matrices, chunk-size sampling,
convolution validity bounds, and SSL time-step masking.

All online/offline behavior derives from one function, ``chunk_end``:
a frame may see everything up to the end of its own chunk and nothing
after it. Offline is the unbounded special case.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .tensor import Tensor

# post-subsampling frame duration: 4x reduction of 10 ms hops
FRAME_MS = 40

# dynamic training range: 1..25 frames x 40 ms mimics latencies up to 1 s
DYNAMIC_CHUNK_MIN = 1
DYNAMIC_CHUNK_MAX = 25


@dataclass(frozen=True)
class ChunkSpec:
    """Decoding/training chunk configuration; ``size`` None means unbounded."""

    size: int | None

    def __post_init__(self):
        if self.size is not None and self.size < 1:
            raise ConfigError(f"chunk size must be >= 1 or unbounded, got {self.size}")

    @classmethod
    def unbounded(cls):
        return cls(None)

    @classmethod
    def bounded(cls, size):
        return cls(int(size))

    @classmethod
    def parse(cls, text):
        """Parse a CLI/config value: an integer or "inf"."""
        text = str(text).strip().lower()
        if text in ("inf", "infinity", "none"):
            return cls.unbounded()
        try:
            return cls.bounded(int(text))
        except ValueError:
            raise ConfigError(f"chunk size must be an integer or 'inf', got {text!r}") from None

    @property
    def is_unbounded(self):
        return self.size is None

    def chunk_end(self, t, total):
        """Last frame index visible from frame t (inclusive, uncapped by total
        when bounded; capped callers use min with total-1)."""
        if self.size is None:
            return total - 1
        return (t // self.size + 1) * self.size - 1

    def latency_band_ms(self):
        """(worst, mean) lookahead latency in ms, or None when unbounded."""
        if self.size is None:
            return None
        worst = self.size * FRAME_MS
        return worst, worst / 2

    def __str__(self):
        return "inf" if self.size is None else str(self.size)


def attention_bias_array(T, spec):
    """Numpy [T,T] bias: 0 where visible, -inf beyond the chunk end."""
    if T < 1:
        raise DataError(f"attention bias needs T >= 1, got {T}")
    if spec.is_unbounded:
        return np.zeros((T, T))
    t = np.arange(T)
    ends = (t // spec.size + 1) * spec.size - 1
    bias = np.where(np.arange(T)[None, :] > ends[:, None], -np.inf, 0.0)
    return bias


def build_attention_bias(T, spec):
    """Bias matrix added to attention logits: zero for offline, top-right
    -inf blocks for chunked online attention."""
    return Tensor(attention_bias_array(T, spec))


def sample_chunk_size(rng):
    """Draw the per-mini-batch chunk size, uniform over 1..25 frames."""
    return ChunkSpec.bounded(int(rng.integers(DYNAMIC_CHUNK_MIN, DYNAMIC_CHUNK_MAX + 1)))


def conv_validity(T, spec):
    """Last valid input index per output frame for the chunked convolution."""
    if T < 1:
        raise DataError(f"conv validity needs T >= 1, got {T}")
    t = np.arange(T)
    if spec.is_unbounded:
        return np.full(T, T - 1, dtype=np.int64)
    ends = (t // spec.size + 1) * spec.size - 1
    return np.minimum(ends, T - 1).astype(np.int64)


@dataclass
class SslMask:
    """Time-step mask: the union of fixed-length spans at sampled starts."""

    masked: np.ndarray  # bool [T]
    starts: np.ndarray  # int [n]
    span: int

    @property
    def indices(self):
        return np.flatnonzero(self.masked)


def sample_ssl_mask(T, p=0.065, span=10, rng=None, force_nonempty=True):
    """Sample span starts independently with probability ``p`` per frame and
    mask the union of the following ``span`` steps. Resamples until at least
    one span exists unless ``force_nonempty`` is off."""
    if T <= span:
        raise DataError(f"ssl mask needs T > span, got T={T}, span={span}")
    rng = rng if rng is not None else np.random.default_rng()
    while True:
        starts = np.flatnonzero(rng.random(T) < p)
        if starts.size or not force_nonempty:
            break
    masked = np.zeros(T, dtype=bool)
    for s in starts:
        masked[s:min(s + span, T)] = True
    return SslMask(masked=masked, starts=starts, span=span)
