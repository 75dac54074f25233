"""Counter-based random streams for fully reproducible experiments.

Every random draw in the package flows through an ``RngStream``, a pair
``(master_seed, stream_id)`` used directly as the 2-word key of a Philox
counter-based generator.  Substreams are derived by folding integer
indices into the stream id with splitmix64, so the values a consumer
sees depend only on its (seed, indices) coordinates, never on how many
draws other consumers made or in what order they ran.

Gaussian variates use a pinned transform: 53-bit uniforms mapped through
the inverse normal CDF.  That keeps sequences stable even if numpy's own
distribution algorithms change between releases.
"""

from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from scipy.special import ndtri

_MASK64 = (1 << 64) - 1


class StreamTag(IntEnum):
    """Top-level substream labels; keeps independent consumers off each other's streams."""

    MODEL_INIT = 1
    HEAD_INIT = 2
    SCORING = 3
    LORA_INIT = 4
    SHUFFLE = 5
    DATA = 6
    RANDOM_SCORES = 7
    SPLIT = 8


def splitmix64(value):
    """One splitmix64 scrambling round (Steele et al.), on 64-bit ints."""
    z = (value + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_stream_id(base, *indices):
    h = base & _MASK64
    for idx in indices:
        h = splitmix64(h ^ (int(idx) & _MASK64))
    return h


def fnv1a64(text: str) -> int:
    """FNV-1a over the UTF-8 bytes of ``text``; stable across platforms."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


@dataclass(frozen=True)
class RngStream:
    master_seed: int
    stream_id: int = 0

    def substream(self, *indices):
        """Child stream keyed by this stream's id and the given indices."""
        return RngStream(self.master_seed, derive_stream_id(self.stream_id, *indices))

    def generator(self):
        """Fresh Philox generator; repeated calls restart the same sequence."""
        key = np.array([self.master_seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def uniform(self, shape):
        """Uniforms on [0, 1) with 53-bit resolution."""
        raw = self.generator().integers(0, 2**64, size=shape, dtype=np.uint64)
        return (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform_open(self, shape):
        """Uniforms on the open interval (0, 1); safe for inverse-CDF transforms."""
        raw = self.generator().integers(0, 2**64, size=shape, dtype=np.uint64)
        return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53

    def integers(self, low, high, shape=None):
        return self.generator().integers(low, high, size=shape)

    def permutation(self, n):
        return self.generator().permutation(n)


def gaussian(shape, mean, std, stream):
    """i.i.d. Normal(mean, std) samples via inverse-CDF; std=0 yields a constant array."""
    if std < 0:
        raise ValueError(f"std must be nonnegative, got {std}")
    if std == 0:
        return np.full(shape, float(mean), dtype=np.float64)
    z = ndtri(stream.uniform_open(shape))
    return mean + std * z
