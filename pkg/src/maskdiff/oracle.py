"""Brute-force ground truth on tiny instances.

Everything here enumerates state spaces directly and is kept independent of
the fast paths it checks.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import measurements
from ._validation import MASK
from .exceptions import InvalidInputError, SizeGuardError

MAX_SEQUENCES = 10 ** 6
MAX_PATH_STATES = 4096
MAX_PATH_STEPS = 4


@dataclass
class EnumeratedPosterior:
    sequences: np.ndarray      # (K^L, L)
    log_weights: np.ndarray    # unnormalized log q(x) + log q(y|x)
    probs: np.ndarray          # normalized
    marginals: np.ndarray      # (L, K)

    def joint_marginals(self, n_tokens=None):
        K = self.marginals.shape[1] if n_tokens is None else n_tokens
        L = self.sequences.shape[1]
        out = np.zeros((L, K))
        for l in range(L):
            np.add.at(out[l], self.sequences[:, l], self.probs)
        return out


def all_sequences(K, L):
    n = K ** L
    if n > MAX_SEQUENCES:
        raise SizeGuardError(f"K^L = {n} exceeds the enumeration guard {MAX_SEQUENCES}")
    return np.array(list(itertools.product(range(K), repeat=L)), dtype=np.int64).reshape(n, L)


def brute_force_conditional(prior, z):
    """q(x^l = k | revealed tokens of z) by summing q(x) over all K^L sequences."""
    K, L = prior.n_tokens, prior.length
    seqs = all_sequences(K, L)
    z = np.asarray(z)
    rev = np.flatnonzero(z != MASK)
    keep = np.all(seqs[:, rev] == z[rev], axis=1)
    logq = np.array([prior.log_prob(x) for x in seqs[keep]])
    w = np.exp(logq - logsumexp(logq))
    out = np.zeros((L, K))
    for l in range(L):
        np.add.at(out[l], seqs[keep][:, l], w)
    return out


def exact_posterior(prior, spec, decoder, codebook):
    """Enumerate q(x | y) proportional to q(x) q(y | x) over every sequence."""
    seqs = all_sequences(prior.n_tokens, prior.length)
    logq = np.array([prior.log_prob(x) for x in seqs])
    flat = spec.sigma == math.inf
    loglik = np.zeros(len(seqs)) if flat else np.array(
        [measurements.log_likelihood(spec, decoder.decode(codebook.embed(x))) for x in seqs])
    lw = logq + loglik
    probs = np.exp(lw - logsumexp(lw))
    post = EnumeratedPosterior(seqs, lw, probs, None)
    post.marginals = post.joint_marginals(prior.n_tokens)
    return post


def _transitions(z, table, w, x=None):
    """Enumerate (log mass, next state) for one factorized reverse kernel.

    With ``x`` given, only outcomes consistent with ``x`` are produced.
    """
    L, K = table.shape
    options = []
    for l in range(L):
        if z[l] != MASK:
            options.append([(0.0, z[l])])
            continue
        opts = []
        if w < 1.0:
            opts.append((math.log1p(-w), MASK))
        ks = range(K) if x is None else (int(x[l]),)
        for k in ks:
            p = w * table[l, k]
            if p > 0:
                opts.append((math.log(p), k))
        options.append(opts)
    for combo in itertools.product(*options):
        yield sum(c[0] for c in combo), tuple(c[1] for c in combo)


def path_marginal(candidate, schedule, L, likelihood=None, x=None):
    """Dynamic program over the reverse chain starting from all-MASK.

    Each step multiplies the factorized kernel masses by the tilt
    ``exp(likelihood(table))`` (once per step, sequence level). Returns a dict
    mapping terminal sequences to unnormalized log mass. With ``x`` only paths
    that can end at ``x`` are tracked.
    """
    T = schedule.steps
    states = {tuple([MASK] * L): 0.0}
    for i in range(T, 0, -1):
        w = schedule.reveal_weight(i)
        nxt = {}
        for z, lm in states.items():
            table = np.asarray(candidate(np.array(z, dtype=np.int64), i), dtype=np.float64)
            tilt = 0.0 if likelihood is None else float(likelihood(table))
            for lp, z2 in _transitions(z, table, w, x):
                v = lm + lp + tilt
                nxt[z2] = np.logaddexp(nxt[z2], v) if z2 in nxt else v
        states = nxt
    return states


def _guard(K, L, T):
    if (K + 1) ** L > MAX_PATH_STATES or T > MAX_PATH_STEPS:
        raise SizeGuardError(f"(K+1)^L = {(K + 1) ** L} or T = {T} exceeds the path oracle guard")


def exact_model_posterior(x, candidate, schedule, n_tokens, likelihood=None):
    """log p_phi(x | y): the tilted reverse chain's unnormalized mass at ``x``."""
    x = np.asarray(x, dtype=np.int64)
    _guard(n_tokens, x.shape[0], schedule.steps)
    states = path_marginal(candidate, schedule, x.shape[0], likelihood, x=x)
    return float(states.get(tuple(int(v) for v in x), -math.inf))


def exact_model_distribution(candidate, schedule, L, n_tokens, likelihood=None):
    """Every terminal sequence with its unnormalized log mass."""
    _guard(n_tokens, L, schedule.steps)
    return path_marginal(candidate, schedule, L, likelihood)


def categorical_kl(p, q):
    """KL(p || q) by direct summation over the support of p."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    s = p > 0
    if np.any(q[s] == 0):
        return math.inf
    return float((p[s] * (np.log(p[s]) - np.log(q[s]))).sum())


def tv_distance(p, q):
    """Total variation distance 0.5 * sum |p - q|."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidInputError(f"support mismatch: {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def empirical_marginals(samples, K):
    samples = np.asarray(samples, dtype=np.int64)
    L = samples.shape[1]
    out = np.zeros((L, K))
    for l in range(L):
        out[l] = np.bincount(samples[:, l], minlength=K) / samples.shape[0]
    return out


def _state_seed(seed, z, step):
    entropy = [int(seed), int(step)] + [int(v) + 1 for v in z]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


class RandomCandidate:
    """Deterministic random tables per (state, step): a generic candidate x_phi.

    Revealed positions are carried over as one-hot rows.
    """

    def __init__(self, n_tokens, seed=0, scale=2.0):
        self.n_tokens = n_tokens
        self.seed = seed
        self.scale = scale
        self._cache = {}

    def __call__(self, z, step=None):
        key = (int(step or 0),) + tuple(int(v) for v in z)
        if key not in self._cache:
            rng = np.random.RandomState(_state_seed(self.seed, z, step or 0))
            logits = self.scale * rng.standard_normal((len(z), self.n_tokens))
            p = np.exp(logits - logits.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            z = np.asarray(z)
            rev = np.flatnonzero(z != MASK)
            p[rev] = 0.0
            p[rev, z[rev]] = 1.0
            self._cache[key] = p
        return self._cache[key]


class PerturbedDenoiser:
    """A base denoiser with deterministic multiplicative noise on masked rows."""

    def __init__(self, base, seed=0, scale=0.5):
        self.base = base
        self.seed = seed
        self.scale = scale

    def __call__(self, z, step=None):
        p = np.array(self.base(z, step), dtype=np.float64)
        rng = np.random.RandomState(_state_seed(self.seed, z, 0))
        noise = np.exp(self.scale * rng.standard_normal(p.shape))
        m = np.asarray(z) == MASK
        p[m] = p[m] * noise[m]
        p[m] /= p[m].sum(axis=1, keepdims=True)
        return p
