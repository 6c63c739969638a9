"""Masked (absorbing-state) discrete diffusion: forward noising, reverse
kernels, per-step KL closed forms and the variational objectives.

States are integer arrays of length L with ``MASK`` (-1) marking absorbed
positions. Denoisers and candidate posteriors are callables
``model(tokens, step) -> (L, K)`` probability tables; ``step`` is the
diffusion index ``i`` of the current time ``t(i) = i/T``.

A *likelihood* is a callable ``table -> log q(y | table)`` (see
:func:`maskdiff.inner_opt.quantized_log_likelihood`); ``None`` means a flat
likelihood.
"""

import itertools
import math

import numpy as np
from sklearn.utils import check_random_state

from ._validation import MASK, check_tokens, is_masked, safe_log
from .exceptions import InvalidInputError

MAX_EXACT_LENGTH = 16


def forward_sample(x, t, schedule, random_state=None):
    """Keep each token with probability alpha_t, otherwise absorb it into MASK."""
    x = check_tokens(x, allow_mask=False, name="x")
    a = schedule.alpha(t)
    rng = check_random_state(random_state)
    keep = rng.random_sample(x.shape[0]) < a
    return np.where(keep, x, MASK)


def posterior_step(z, target, i, schedule):
    """Per-position reverse categorical over tokens plus MASK (last column).

    ``target`` is an ``(L, K)`` table (model prediction or one-hot data).
    """
    z = check_tokens(z)
    target = np.asarray(target, dtype=np.float64)
    L, K = target.shape
    w = schedule.reveal_weight(i)
    out = np.zeros((L, K + 1))
    m = is_masked(z)
    out[m, :K] = w * target[m]
    out[m, K] = 1.0 - w
    rev = np.flatnonzero(~m)
    out[rev, z[rev]] = 1.0
    return out


def step_kl(true_token, model_row, i, masked, schedule):
    """KL between the true and model reverse kernels at one position.

    Masked positions give ``reveal_weight * -log p(true)``; revealed ones 0.
    Returns ``inf`` when the model gives the true token zero probability.
    """
    if not masked:
        return 0.0
    p = float(np.asarray(model_row, dtype=np.float64)[int(true_token)])
    w = schedule.reveal_weight(i)
    if w == 0.0:
        return 0.0
    if p <= 0.0:
        return math.inf
    return -w * math.log(p)


def tilted_reveal_weights(model_row, likelihood_value, i, schedule):
    """Reverse kernel of a masked position scaled by a likelihood value.

    The scale is constant over outcomes, so the result is *not* normalized;
    it is a path weight, not a distribution.
    """
    if not likelihood_value > 0:
        raise InvalidInputError("likelihood value must be positive")
    row = np.atleast_2d(np.asarray(model_row, dtype=np.float64))
    base = posterior_step(np.array([MASK] * row.shape[0]), row, i, schedule)
    out = base * float(likelihood_value)
    return out[0] if np.ndim(model_row) == 1 else out


def _masks_exact(alpha, L):
    """All masking patterns with their forward probabilities (True = masked)."""
    if alpha == 0.0:
        yield 1.0, np.ones(L, dtype=bool)
        return
    if alpha == 1.0:
        yield 1.0, np.zeros(L, dtype=bool)
        return
    for bits in itertools.product((False, True), repeat=L):
        m = np.array(bits, dtype=bool)
        k = int(m.sum())
        yield (1.0 - alpha) ** k * alpha ** (L - k), m


def forward_states(x, i, schedule, exact=True, n_mc=None, random_state=None):
    """Weighted draws of Z_{t(i)} ~ q(. | x): exhaustive or Monte Carlo."""
    a = schedule.alpha_t(i)
    L = x.shape[0]
    if exact:
        if L > MAX_EXACT_LENGTH:
            raise InvalidInputError(f"exact enumeration limited to L <= {MAX_EXACT_LENGTH}")
        for p, m in _masks_exact(a, L):
            yield p, np.where(m, MASK, x)
        return
    if not n_mc:
        raise InvalidInputError("Monte-Carlo mode needs n_mc >= 1")
    rng = check_random_state(random_state)
    for _ in range(int(n_mc)):
        m = rng.random_sample(L) >= a
        yield 1.0 / n_mc, np.where(m, MASK, x)


def _cross_entropy_masked(x, table, z):
    m = is_masked(z)
    if not np.any(m):
        return 0.0
    return float(-safe_log(table[np.flatnonzero(m), x[m]]).sum())


def loss_terms(x, model, schedule, likelihood=None, reference=None, exact=True,
               n_mc=None, random_state=None):
    """Per-step expectations used by all three objectives.

    Returns a dict of length-T arrays (index 0 is step i=1):

    ``ce``      E[reveal_weight * sum_l CE(x^l, model^l) 1{masked}]
    ``tilt``    E[log q(y | model(Z_t))] (zeros for a flat likelihood)
    ``ratio``   E[reveal_weight * sum_l log(ref^l_x / model^l_x) 1{masked}]
                (only when ``reference`` is given)
    ``practical`` E[reveal_weight * sum_l -log <model^l, ref^l> 1{masked}]
                (only when ``reference`` is given)
    """
    x = check_tokens(x, allow_mask=False, name="x")
    rng = check_random_state(random_state)
    T = schedule.steps
    out = {k: np.zeros(T) for k in ("ce", "tilt", "ratio", "practical")}
    for i in range(1, T + 1):
        w = schedule.reveal_weight(i)
        for p, z in forward_states(x, i, schedule, exact, n_mc, rng):
            if p == 0.0:
                continue
            table = np.asarray(model(z, i), dtype=np.float64)
            out["ce"][i - 1] += p * w * _cross_entropy_masked(x, table, z)
            if likelihood is not None:
                out["tilt"][i - 1] += p * float(likelihood(table))
            if reference is not None:
                ref = np.asarray(reference(z, i), dtype=np.float64)
                m = np.flatnonzero(is_masked(z))
                lr = safe_log(ref[m, x[m]]) - safe_log(table[m, x[m]])
                out["ratio"][i - 1] += p * w * float(lr.sum())
                inner = (table[m] * ref[m]).sum(axis=1)
                out["practical"][i - 1] += p * w * float(-safe_log(inner).sum())
    return out


def reconstruction_term(x):
    """E[-log p(x | Z_0)].

    Under the absorbing forward process Z_0 = x almost surely and the token
    decoder is the identity on token sequences, so the term is 0.
    """
    check_tokens(x, allow_mask=False, name="x")
    return 0.0


def _mc_check(exact, n_mc):
    if not exact and not n_mc:
        raise InvalidInputError("n_mc must be positive unless exact=True")


def nelbo(x, denoiser, schedule, exact=True, n_mc=None, random_state=None):
    """Negative evidence lower bound of a masked diffusion model at ``x``."""
    _mc_check(exact, n_mc)
    terms = loss_terms(x, denoiser, schedule, exact=exact, n_mc=n_mc,
                       random_state=random_state)
    return reconstruction_term(x) + float(terms["ce"].sum())


def nelbo_mc(x, denoiser, schedule, n_mc, random_state=None):
    """Monte-Carlo NELBO with its standard error (one path-sample per draw)."""
    if not n_mc:
        raise InvalidInputError("n_mc must be positive")
    x = check_tokens(x, allow_mask=False, name="x")
    rng = check_random_state(random_state)
    T = schedule.steps
    draws = np.zeros(int(n_mc))
    for n in range(int(n_mc)):
        total = 0.0
        for i in range(1, T + 1):
            a = schedule.alpha_t(i)
            z = np.where(rng.random_sample(x.shape[0]) >= a, MASK, x)
            total += schedule.reveal_weight(i) * _cross_entropy_masked(x, denoiser(z, i), z)
        draws[n] = total
    return float(draws.mean()), float(draws.std(ddof=1) / math.sqrt(n_mc)) if n_mc > 1 else math.nan


def ddps_loss(x, candidate, schedule, likelihood=None, exact=True, n_mc=None,
              random_state=None):
    """Training bound on -log p_phi(x | y) for a y-tilted candidate posterior."""
    _mc_check(exact, n_mc)
    terms = loss_terms(x, candidate, schedule, likelihood, exact=exact, n_mc=n_mc,
                       random_state=random_state)
    return reconstruction_term(x) + float(terms["ce"].sum()) - float(terms["tilt"].sum())


def aps_loss(x, candidate, pretrained, schedule, likelihood=None, exact=True,
             n_mc=None, random_state=None):
    """Test-time bound: pretrained NELBO + adaptation gap - likelihood tilt."""
    _mc_check(exact, n_mc)
    base = nelbo(x, pretrained, schedule, exact=exact, n_mc=n_mc,
                 random_state=check_random_state(random_state) if not exact else None)
    terms = loss_terms(x, candidate, schedule, likelihood, reference=pretrained,
                       exact=exact, n_mc=n_mc, random_state=random_state)
    return base + float(terms["ratio"].sum()) - float(terms["tilt"].sum())


def practical_aps_loss(x, candidate, pretrained, schedule, likelihood=None, exact=True):
    """Simplified bound with the data token replaced by the pretrained prediction.

    Additive constants (the pretrained NELBO) are dropped.
    """
    terms = loss_terms(x, candidate, schedule, likelihood, reference=pretrained, exact=exact)
    return float(terms["practical"].sum()) - float(terms["tilt"].sum())
