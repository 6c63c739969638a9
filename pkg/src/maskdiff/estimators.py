"""Scikit-learn style front end: fit a template prior, then reconstruct from measurements."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_is_fitted

from .codebook import Codebook
from .exceptions import InvalidInputError
from .inner_opt import OptConfig
from .measurements import Identity, MeasurementSpec, residual_norm
from .sampler import SamplerConfig, run_sampler
from .schedule import NoiseSchedule
from .world import PatchDecoder, TemplateMixture


class AnchoredPosteriorSampler(BaseEstimator):
    """Posterior sampler over token grids.

    ``fit(X)`` learns a mixture-of-templates prior from token sequences
    ``X`` of shape (n, grid_h * grid_w). ``predict(Y)`` returns one token
    sequence per measurement in ``Y``; ``transform(Y)`` returns decoded images.

    Parameters
    ----------
    operator : measurement operator, default Identity()
    kind : {"aps", "aps1", "standard", "prior"}
    """

    def __init__(self, grid=(4, 4), patch=4, dim=2, n_tokens=None, n_templates=3,
                 operator=None, sigma=0.05, loss="l2", lambda_p=1e-3, lambda_pp=0.0,
                 steps=8, inner_steps=100, lr=1.0, kind="aps", decoder_seed=0,
                 max_iter=200, random_state=None):
        self.grid = grid
        self.patch = patch
        self.dim = dim
        self.n_tokens = n_tokens
        self.n_templates = n_templates
        self.operator = operator
        self.sigma = sigma
        self.loss = loss
        self.lambda_p = lambda_p
        self.lambda_pp = lambda_pp
        self.steps = steps
        self.inner_steps = inner_steps
        self.lr = lr
        self.kind = kind
        self.decoder_seed = decoder_seed
        self.max_iter = max_iter
        self.random_state = random_state

    def _components(self):
        K = self.n_tokens or 2 ** self.dim
        return (Codebook(self.dim, K),
                PatchDecoder(tuple(self.grid), self.patch, self.dim, seed=self.decoder_seed))

    def fit(self, X, y=None):
        X = np.asarray(X)
        if X.ndim != 2:
            raise InvalidInputError("X must be a 2-D array of token sequences")
        self.codebook_, self.decoder_ = self._components()
        if X.shape[1] != self.decoder_.length:
            raise InvalidInputError(f"sequences must have {self.decoder_.length} tokens")
        mix = TemplateMixture(n_templates=self.n_templates, n_tokens=self.codebook_.size,
                              max_iter=self.max_iter, random_state=self.random_state).fit(X)
        self.prior_ = mix.prior_
        self.n_features_in_ = X.shape[1]
        return self

    def _spec(self, y):
        return MeasurementSpec(self.operator or Identity(), sigma=self.sigma, y=np.asarray(y),
                               loss=self.loss, lambda_p=self.lambda_p, lambda_pp=self.lambda_pp)

    def sample_runs(self, Y):
        """Full :class:`SamplerRun` per measurement."""
        check_is_fitted(self, "prior_")
        rng = check_random_state(self.random_state)
        schedule = NoiseSchedule("cosine", self.steps)
        opt = OptConfig(inner_steps=self.inner_steps, lr=self.lr)
        return [run_sampler(self.prior_, self.codebook_, self.decoder_, self._spec(y), schedule,
                            opt, SamplerConfig(self.kind), random_state=rng.randint(2 ** 31 - 1))
                for y in Y]

    def predict(self, Y):
        return np.array([run.tokens for run in self.sample_runs(Y)])

    def transform(self, Y):
        return np.array([run.image for run in self.sample_runs(Y)])

    def decode(self, tokens):
        check_is_fitted(self, "prior_")
        return self.decoder_(self.codebook_.embed(tokens))

    def score(self, Y, y=None):
        """Negative mean data residual of the reconstructions (higher is better)."""
        images = self.transform(Y)
        return -float(np.mean([residual_norm(self._spec(v), im) for v, im in zip(Y, images)]))
