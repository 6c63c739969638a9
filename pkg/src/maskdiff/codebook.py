"""Binary lookup-free quantization (LFQ) codebook.

Entry ``j`` of a ``d``-dimensional codebook is the vector in {-1, +1}^d whose
component ``i`` is +1 exactly when bit ``i`` of ``j`` is set. Token indices are
0-based throughout.
"""

import numpy as np

from ._validation import check_finite
from .exceptions import InvalidInputError, OutOfRangeError

MAX_DIM = 16


def lfq_quantize(e):
    """Threshold each component: +1 if strictly positive, else -1."""
    e = check_finite(e, "embedding")
    return np.where(e > 0, 1.0, -1.0)


def embedding_to_index(b):
    """Token index of binary embedding(s) ``b`` (last axis is the embedding)."""
    b = np.asarray(b, dtype=np.float64)
    if not np.all((b == 1.0) | (b == -1.0)):
        raise InvalidInputError("binary embedding components must be exactly +1 or -1")
    d = b.shape[-1]
    weights = 1 << np.arange(d, dtype=np.int64)
    out = ((b > 0).astype(np.int64) * weights).sum(axis=-1)
    return int(out) if out.ndim == 0 else out


def index_to_embedding(j, dim):
    """Binary embedding(s) for token index(es) ``j`` in a ``dim``-bit codebook."""
    j = np.asarray(j, dtype=np.int64)
    if np.any(j < 0) or np.any(j >= (1 << dim)):
        raise OutOfRangeError(f"token index out of range for d={dim}")
    bits = (j[..., None] >> np.arange(dim, dtype=np.int64)) & 1
    return np.where(bits == 1, 1.0, -1.0)


class Codebook:
    """Immutable LFQ codebook.

    Parameters
    ----------
    dim : int
        Embedding dimension ``d`` (1..16).
    size : int, optional
        Vocabulary size. Defaults to ``2**dim``. A smaller size keeps the first
        ``size`` entries (used for tiny enumerable instances such as K=3); a
        quantized embedding landing outside the vocabulary is then mapped to the
        nearest in-vocabulary entry.
    """

    def __init__(self, dim, size=None):
        dim = int(dim)
        if not 1 <= dim <= MAX_DIM:
            raise InvalidInputError(f"codebook dim must be in [1, {MAX_DIM}], got {dim}")
        full = 1 << dim
        size = full if size is None else int(size)
        if not 1 <= size <= full:
            raise InvalidInputError(f"codebook size must be in [1, {full}], got {size}")
        self.dim = dim
        self.size = size
        entries = index_to_embedding(np.arange(size), dim)
        entries.setflags(write=False)
        self.entries = entries

    @property
    def full(self):
        return self.size == (1 << self.dim)

    def __repr__(self):
        return f"Codebook(dim={self.dim}, size={self.size})"

    def embed(self, tokens):
        tokens = np.asarray(tokens, dtype=np.int64)
        if np.any(tokens < 0) or np.any(tokens >= self.size):
            raise OutOfRangeError(f"token index out of range for K={self.size}")
        return self.entries[tokens]

    def quantize_to_index(self, e):
        """Quantize real embeddings (``(..., d)``) to token indices."""
        idx = np.asarray(embedding_to_index(lfq_quantize(e)))
        if not self.full:
            out = idx >= self.size
            if np.any(out):
                e = np.asarray(e, dtype=np.float64)
                dist = ((e[out][:, None, :] - self.entries[None]) ** 2).sum(-1)
                idx = idx.copy()
                idx[out] = np.argmin(dist, axis=1)
        return idx

    def nearest_index(self, e):
        """Brute-force Euclidean argmin over all entries (lowest index on ties)."""
        e = check_finite(e, "embedding")
        dist = ((e[..., None, :] - self.entries) ** 2).sum(-1)
        return np.argmin(dist, axis=-1)
