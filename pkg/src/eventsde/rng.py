"""Counter-based random streams.

Every random number in the package is a pure function of a 64-bit key and a
position.  Streams are built on numpy's Philox4x64 bit generator, whose
output at word ``n`` can be reached by advancing the counter, so values never
depend on the order in which they are requested.
"""

import hashlib

import numpy as np
from scipy.special import ndtri

_WORDS_PER_BLOCK = 4
_INV_2_53 = 2.0 ** -53


def derive_seed(seed, purpose, index=None):
    """Stable 64-bit sub-seed for ``(seed, purpose[, index])``."""
    h = hashlib.blake2b(digest_size=8)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    h.update(purpose.encode())
    if index is not None:
        h.update(b"#")
        h.update(int(index).to_bytes(8, "little", signed=False))
    return int.from_bytes(h.digest(), "little")


def raw_words(key, start, count):
    """Return ``count`` uint64 words of the Philox stream keyed by ``key``, from word ``start``."""
    bg = np.random.Philox(key=[int(key) & 0xFFFFFFFFFFFFFFFF, 0])
    block, offset = divmod(int(start), _WORDS_PER_BLOCK)
    if block:
        bg.advance(block)
    words = bg.random_raw(offset + int(count))
    return np.asarray(words[offset:], dtype=np.uint64)


def words_to_uniform(words):
    """Map uint64 words to doubles strictly inside (0, 1)."""
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * _INV_2_53


def uniforms(key, start, count):
    return words_to_uniform(raw_words(key, start, count))


def normals(key, start, count):
    """Standard normals by inverse-CDF transform, one word per value."""
    return ndtri(uniforms(key, start, count))


class UniformStream:
    """Indexable stream of Unif(0, 1) samples keyed by ``(seed, purpose)``.

    ``stream(n)`` is the n-th sample.  Values are cached in blocks so that
    sequential access during a simulation is cheap.
    """

    _BLOCK = 256

    def __init__(self, seed, purpose="transitions"):
        self.seed = int(seed)
        self.purpose = purpose
        self._key = derive_seed(seed, purpose)
        self._cache = {}

    def __call__(self, n):
        n = int(n)
        if n < 0:
            raise IndexError("stream index must be non-negative")
        b, r = divmod(n, self._BLOCK)
        block = self._cache.get(b)
        if block is None:
            block = uniforms(self._key, b * self._BLOCK, self._BLOCK)
            self._cache[b] = block
        return float(block[r])

    def take(self, start, count):
        return uniforms(self._key, start, count)

    def __repr__(self):
        return f"UniformStream(seed={self.seed}, purpose={self.purpose!r})"


class ConstantStream:
    """Stream returning one fixed value; handy for deterministic transitions in tests."""

    def __init__(self, value):
        self.value = float(value)

    def __call__(self, n):
        return self.value


class SequenceStream:
    """Stream backed by an explicit sequence of uniforms (frozen u-sequences)."""

    def __init__(self, values):
        self.values = [float(v) for v in values]

    def __call__(self, n):
        try:
            return self.values[n]
        except IndexError:
            raise IndexError(f"u-sequence exhausted at event {n}") from None
