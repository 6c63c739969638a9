"""A fully known synthetic world: mixture-of-templates token prior, its exact
Bayes denoiser, EM fitting, and a linear patch decoder."""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_is_fitted

from ._validation import MASK, check_finite, check_tokens, is_masked
from .exceptions import DegenerateEvidenceError, InvalidInputError

logger = logging.getLogger(__name__)

RHO_FLOOR = 1e-3


@dataclass(frozen=True, eq=False)
class TemplatePrior:
    """q(x) = sum_r w_r prod_l P(x^l | template_r), where each position keeps the
    template token with probability 1 - rho and otherwise takes one of the other
    K - 1 tokens uniformly.

    Instances are callables ``prior(tokens, step=None)`` returning the exact
    Bayes prediction q(x^l | revealed tokens), i.e. they act as the pretrained
    denoiser.
    """

    templates: np.ndarray
    weights: np.ndarray
    rho: float
    n_tokens: int

    def __post_init__(self):
        t = np.atleast_2d(np.asarray(self.templates, dtype=np.int64))
        w = np.asarray(self.weights, dtype=np.float64)
        K = int(self.n_tokens)
        if K < 2:
            raise InvalidInputError("need at least two tokens")
        if t.shape[0] != w.shape[0] or t.shape[0] < 1:
            raise InvalidInputError("one weight per template required")
        if np.any(t < 0) or np.any(t >= K):
            raise InvalidInputError("template tokens out of range")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise InvalidInputError("template weights must lie on the simplex")
        if not 0.0 <= self.rho < 1.0:
            raise InvalidInputError("rho must lie in [0, 1)")
        t.setflags(write=False)
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "templates", t)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "n_tokens", K)

    @property
    def length(self):
        return self.templates.shape[1]

    @property
    def n_templates(self):
        return self.templates.shape[0]

    @classmethod
    def random(cls, n_templates, length, n_tokens, rho, random_state=None):
        rng = check_random_state(random_state)
        templates = rng.randint(0, n_tokens, size=(n_templates, length))
        return cls(templates, np.full(n_templates, 1.0 / n_templates), rho, n_tokens)

    def _emission(self):
        """(R, L, K) table of P(x^l = k | template r)."""
        cached = self.__dict__.get("_em")
        if cached is None:
            K, rho = self.n_tokens, self.rho
            e = np.full(self.templates.shape + (K,), rho / (K - 1))
            np.put_along_axis(e, self.templates[..., None], 1.0 - rho, axis=-1)
            e.setflags(write=False)
            with np.errstate(divide="ignore"):
                le = np.log(e)
                lw = np.log(self.weights)
            le.setflags(write=False)
            cached = (e, le, lw)
            object.__setattr__(self, "_em", cached)
        return cached[0]

    def _log_tables(self):
        self._emission()
        return self.__dict__["_em"][1:]

    def sample(self, random_state=None, n=None):
        rng = check_random_state(random_state)
        size = 1 if n is None else int(n)
        r = rng.choice(self.n_templates, size=size, p=self.weights)
        x = self.templates[r].copy()
        if self.rho > 0:
            flip = rng.random_sample(x.shape) < self.rho
            shift = rng.randint(1, self.n_tokens, size=x.shape)
            x = np.where(flip, (x + shift) % self.n_tokens, x)
        return x[0] if n is None else x

    def log_prob(self, x):
        x = check_tokens(x, self.n_tokens, allow_mask=False, name="x")
        le, lw = self._log_tables()
        return float(logsumexp(lw + le[:, np.arange(self.length), x].sum(axis=1)))

    def template_posterior(self, z):
        z = check_tokens(z, self.n_tokens, name="z")
        if z.shape[0] != self.length:
            raise InvalidInputError(f"state length {z.shape[0]} != prior length {self.length}")
        rev = np.flatnonzero(~is_masked(z))
        le, lw = self._log_tables()
        logw = lw + le[:, rev, z[rev]].sum(axis=1)
        top = logw.max()
        if not np.isfinite(top):
            raise DegenerateEvidenceError("revealed tokens have zero probability under every template")
        w = np.exp(logw - top)
        return w / w.sum()

    def denoise(self, z):
        """Exact q(x^l = k | revealed tokens of z) as an (L, K) table."""
        z = np.asarray(z)
        post = self.template_posterior(z)
        rows = np.einsum("r,rlk->lk", post, self._emission())
        rev = np.flatnonzero(~is_masked(z))
        rows[rev] = 0.0
        rows[rev, z[rev]] = 1.0
        return rows

    def __call__(self, z, step=None):
        return self.denoise(z)

    def marginals(self):
        return self.denoise(np.full(self.length, MASK))


class TemplateMixture(BaseEstimator):
    """EM fit of a mixture-of-templates prior with a shared corruption rate.

    Parameters
    ----------
    n_templates : int
    n_tokens : int or None
        Vocabulary size; inferred as ``max(X) + 1`` when None.
    max_iter : int
    tol : float
        Stop when the mean log-likelihood improves by less than ``tol``.
    n_init : int
        Independent restarts; the best final likelihood wins.
    random_state : int, RandomState or None

    Attributes
    ----------
    prior_ : TemplatePrior
    log_likelihood_history_ : list of float
        Mean training log-likelihood after each EM iteration of the kept run.
    """

    def __init__(self, n_templates=2, n_tokens=None, max_iter=100, tol=1e-10,
                 n_init=3, random_state=None):
        self.n_templates = n_templates
        self.n_tokens = n_tokens
        self.max_iter = max_iter
        self.tol = tol
        self.n_init = n_init
        self.random_state = random_state

    def _init_templates(self, X, rng):
        # farthest-point seeding under Hamming distance
        R = self.n_templates
        idx = [rng.randint(X.shape[0])]
        dist = (X != X[idx[0]]).sum(axis=1).astype(float)
        for _ in range(1, R):
            if dist.max() == 0:
                idx.append(rng.randint(X.shape[0]))
            else:
                cand = np.flatnonzero(dist == dist.max())
                idx.append(rng.choice(cand))
            dist = np.minimum(dist, (X != X[idx[-1]]).sum(axis=1))
        return X[idx].copy()

    def _run(self, X, K, rng):
        N, L = X.shape
        R = self.n_templates
        templates = self._init_templates(X, rng)
        weights = np.full(R, 1.0 / R)
        rho = 0.1
        history = []
        onehot = np.eye(K)[X]  # (N, L, K)
        for _ in range(self.max_iter):
            prior = TemplatePrior(templates, weights / weights.sum(), rho, K)
            ll_r = self._component_logpdf(prior, X)
            ll = logsumexp(ll_r, axis=1)
            history.append(float(ll.mean()))
            resp = np.exp(ll_r - ll[:, None])
            # M-step: weights, then templates given rho, then rho given templates
            weights = resp.mean(axis=0)
            weights = weights / weights.sum()
            counts = np.einsum("nr,nlk->rlk", resp, onehot)
            templates = counts.argmax(axis=2)
            agree = np.take_along_axis(counts, templates[..., None], axis=2)[..., 0].sum()
            rho = max(RHO_FLOOR, 1.0 - agree / (N * L))
            rho = min(rho, 1.0 - 1.0 / K)
            if len(history) > 1 and abs(history[-1] - history[-2]) < self.tol:
                break
        prior = TemplatePrior(templates, weights, rho, K)
        history.append(float(logsumexp(self._component_logpdf(prior, X), axis=1).mean()))
        return prior, history

    @staticmethod
    def _component_logpdf(prior, X):
        L = X.shape[1]
        with np.errstate(divide="ignore"):
            e = np.log(prior._emission())  # (R, L, K)
            lw = np.log(prior.weights)
        return lw[None, :] + e[:, np.arange(L)[None, :], X].sum(axis=2).T

    def fit(self, X, y=None):
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[0] == 0:
            raise InvalidInputError("X must be a non-empty (n_samples, L) token array")
        X = np.stack([check_tokens(row, allow_mask=False, name="X") for row in X])
        K = int(self.n_tokens) if self.n_tokens is not None else int(X.max()) + 1
        K = max(K, 2)
        if self.n_templates < 1:
            raise InvalidInputError("n_templates must be >= 1")
        n_distinct = np.unique(X, axis=0).shape[0]
        if self.n_templates > n_distinct:
            warnings.warn(f"n_templates={self.n_templates} exceeds the {n_distinct} distinct "
                          "samples; duplicate templates allowed", UserWarning)
        rng = check_random_state(self.random_state)
        best = None
        for _ in range(max(1, int(self.n_init))):
            prior, history = self._run(X, K, rng)
            if best is None or history[-1] > best[1][-1]:
                best = (prior, history)
        self.prior_, self.log_likelihood_history_ = best
        self.n_tokens_ = K
        logger.debug("fitted %d templates, rho=%.4g", self.n_templates, self.prior_.rho)
        return self

    def score(self, X, y=None):
        """Mean log-likelihood of ``X`` under the fitted prior."""
        check_is_fitted(self, "prior_")
        X = np.asarray(X, dtype=np.int64)
        return float(logsumexp(self._component_logpdf(self.prior_, X), axis=1).mean())

    def predict_proba(self, Z):
        """Exact denoiser tables for partially masked sequences: (n, L, K)."""
        check_is_fitted(self, "prior_")
        Z = np.atleast_2d(np.asarray(Z))
        return np.stack([self.prior_.denoise(z) for z in Z])

    def sample(self, n_samples=1, random_state=None):
        check_is_fitted(self, "prior_")
        return self.prior_.sample(random_state, n=n_samples)


def fit_prior(samples, n_templates, iters=100, n_tokens=None, random_state=None,
              held_out=None, schedule=None):
    """Fit a TemplatePrior by EM; optionally report held-out NELBO.

    Returns ``(prior, report)`` where report holds the likelihood history and,
    when both ``held_out`` and ``schedule`` are given, the mean held-out NELBO
    of the fitted exact denoiser.
    """
    est = TemplateMixture(n_templates=n_templates, n_tokens=n_tokens, max_iter=iters,
                          random_state=random_state).fit(samples)
    report = {"log_likelihood_history": est.log_likelihood_history_}
    if held_out is not None and schedule is not None:
        from .diffusion import nelbo

        vals = [nelbo(x, est.prior_, schedule, exact=True) for x in np.asarray(held_out)]
        report["held_out_nelbo"] = float(np.mean(vals))
    return est.prior_, report


@dataclass(frozen=True, eq=False)
class PatchDecoder:
    """Linear token-embedding decoder onto an (h*p, w*p) grayscale image.

    Every token position shares the weight map ``W`` of shape (p*p, d), drawn
    i.i.d. uniform in [-1/sqrt(d), 1/sqrt(d)] from ``seed``. With
    ``output="tanh"`` a pointwise tanh follows the linear stage.
    """

    grid: tuple
    patch: int
    dim: int
    seed: int = 0
    output: str = "linear"
    weight: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        h, w = (int(v) for v in self.grid)
        object.__setattr__(self, "grid", (h, w))
        if self.output not in ("linear", "tanh"):
            raise InvalidInputError(f"unknown decoder output stage {self.output!r}")
        rng = np.random.RandomState(self.seed)
        bound = 1.0 / np.sqrt(self.dim)
        W = rng.uniform(-bound, bound, size=(self.patch * self.patch, self.dim))
        W.setflags(write=False)
        object.__setattr__(self, "weight", W)

    @property
    def length(self):
        return self.grid[0] * self.grid[1]

    @property
    def image_shape(self):
        return (self.grid[0] * self.patch, self.grid[1] * self.patch)

    def _check(self, E):
        E = check_finite(E, "embeddings")
        if E.shape != (self.length, self.dim):
            raise InvalidInputError(f"embeddings must have shape {(self.length, self.dim)}, got {E.shape}")
        return E

    def _tile(self, patches):
        h, w = self.grid
        p = self.patch
        return patches.reshape(h, w, p, p).transpose(0, 2, 1, 3).reshape(h * p, w * p)

    def _untile(self, image):
        h, w = self.grid
        p = self.patch
        return image.reshape(h, p, w, p).transpose(0, 2, 1, 3).reshape(h * w, p * p)

    def linear(self, E):
        return self._tile(self._check(E) @ self.weight.T)

    def decode(self, E):
        out = self.linear(E)
        return np.tanh(out) if self.output == "tanh" else out

    __call__ = decode

    def vjp(self, E, grad_image):
        """Gradient w.r.t. embeddings given dLoss/dImage."""
        g = np.asarray(grad_image, dtype=np.float64)
        if self.output == "tanh":
            g = g * (1.0 - np.tanh(self.linear(E)) ** 2)
        return self._untile(g) @ self.weight

    def jacobian(self):
        """Per-patch Jacobian of the linear stage (shared by every position)."""
        return np.array(self.weight)
