"""Small input-validation helpers shared across modules."""

import numpy as np

from .exceptions import InvalidInputError

MASK = -1
PROB_FLOOR = 1e-30


def check_finite(a, name="input"):
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return a


def check_tokens(tokens, K=None, allow_mask=True, name="tokens"):
    t = np.asarray(tokens)
    if t.ndim != 1:
        raise InvalidInputError(f"{name} must be 1-D, got shape {t.shape}")
    if t.size and not np.issubdtype(t.dtype, np.integer):
        if not np.all(t == np.round(t)):
            raise InvalidInputError(f"{name} must be integers")
    t = t.astype(np.int64)
    lo = MASK if allow_mask else 0
    if np.any(t < lo):
        raise InvalidInputError(f"{name} has invalid entries")
    if K is not None and np.any(t >= K):
        raise InvalidInputError(f"{name} has entries >= K={K}")
    return t


def check_prob_table(p, name="probs", atol=1e-9):
    p = check_finite(p, name)
    if p.ndim != 2:
        raise InvalidInputError(f"{name} must be an L x K table")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > atol):
        raise InvalidInputError(f"{name} rows must be probability vectors")
    return p


def safe_log(p):
    """Logarithm with the probability floor applied inside the log only."""
    return np.log(np.maximum(p, PROB_FLOOR))


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def is_masked(tokens):
    return np.asarray(tokens) == MASK
