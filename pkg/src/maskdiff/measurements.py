"""Measurement operators, observation synthesis and measurement losses.

Every operator maps a 2-D image to a measurement array and provides the
vector-Jacobian product ``vjp(image, cotangent)``; linear operators also expose
``adjoint``.
"""

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.signal
from sklearn.utils import check_random_state

from ._validation import check_finite
from .exceptions import DegenerateFeatureError, InvalidInputError, InvalidStateError

LOSSES = ("l1", "l2", "cosine")


def gaussian_kernel(side, std):
    side = int(side)
    if side < 1 or side % 2 == 0:
        raise InvalidInputError("kernel side must be a positive odd integer")
    if not std > 0:
        raise InvalidInputError("kernel std must be positive")
    c = (side - 1) / 2.0
    g = np.exp(-((np.arange(side) - c) ** 2) / (2.0 * std * std))
    k = np.outer(g, g)
    return k / k.sum()


def load_kernel(path):
    """Read a plain-text kernel (rows of space-separated reals), normalized to sum 1."""
    k = np.atleast_2d(np.loadtxt(path, dtype=np.float64))
    return _normalize_kernel(k)


def _normalize_kernel(k):
    k = check_finite(k, "kernel")
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise InvalidInputError("kernel must be square with odd side")
    if np.any(k < 0) or k.sum() <= 0:
        raise InvalidInputError("kernel entries must be non-negative with positive sum")
    return k / k.sum()


def _image(x, shape=None):
    x = check_finite(x, "image")
    if x.ndim != 2:
        raise InvalidInputError(f"image must be 2-D, got shape {x.shape}")
    if shape is not None and x.shape != tuple(shape):
        raise InvalidInputError(f"image shape {x.shape} incompatible with operator")
    return x


class Operator:
    linear = True
    name = "operator"

    def apply(self, x):
        raise NotImplementedError

    def adjoint(self, v, shape):
        raise NotImplementedError

    def vjp(self, x, g):
        return self.adjoint(g, np.shape(x))

    def __call__(self, x):
        return self.apply(x)


class Identity(Operator):
    name = "identity"

    def apply(self, x):
        return _image(x).copy()

    def adjoint(self, v, shape):
        return np.asarray(v, dtype=np.float64).reshape(shape)


@dataclass(frozen=True)
class Downsample(Operator):
    """Non-overlapping mean pooling by ``factor``."""

    factor: int = 2
    name = "downsample"

    def apply(self, x):
        x = _image(x)
        f = int(self.factor)
        H, W = x.shape
        if H % f or W % f:
            raise InvalidInputError(f"image shape {x.shape} not divisible by factor {f}")
        return x.reshape(H // f, f, W // f, f).mean(axis=(1, 3))

    def adjoint(self, v, shape):
        f = int(self.factor)
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (shape[0] // f, shape[1] // f):
            raise InvalidInputError("measurement shape incompatible with downsample adjoint")
        return np.repeat(np.repeat(v, f, axis=0), f, axis=1) / (f * f)


@lru_cache(maxsize=64)
def _reflect_index(shape, r):
    idx = np.arange(shape[0] * shape[1]).reshape(shape)
    return np.pad(idx, r, mode="reflect")


@dataclass(frozen=True, eq=False)
class Convolution(Operator):
    """2-D convolution with reflect padding ("same" output size)."""

    kernel: np.ndarray
    name = "conv_kernel"

    def __post_init__(self):
        object.__setattr__(self, "kernel", _normalize_kernel(self.kernel))

    @property
    def radius(self):
        return self.kernel.shape[0] // 2

    def apply(self, x):
        x = _image(x)
        r = self.radius
        idx = _reflect_index(x.shape, r)
        padded = x.ravel()[idx]
        return scipy.signal.convolve(padded, self.kernel, mode="valid", method="auto")

    def adjoint(self, v, shape):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != tuple(shape):
            raise InvalidInputError("measurement shape incompatible with convolution adjoint")
        gp = scipy.signal.correlate(v, self.kernel, mode="full", method="auto")
        idx = _reflect_index(tuple(shape), self.radius)
        out = np.bincount(idx.ravel(), weights=gp.ravel(), minlength=shape[0] * shape[1])
        return out.reshape(shape)


class GaussianBlur(Convolution):
    name = "gaussian_blur"

    def __init__(self, kernel_side=7, std=1.5):
        super().__init__(gaussian_kernel(kernel_side, std))


@lru_cache(maxsize=64)
def _keep_mask(shape, keep_rate, seed, block):
    H, W = shape
    if H % block or W % block:
        raise InvalidInputError(f"image shape {shape} not divisible by mask block {block}")
    rng = np.random.RandomState(seed)
    m = rng.random_sample((H // block, W // block)) < keep_rate
    m = np.repeat(np.repeat(m, block, axis=0), block, axis=1)
    m.setflags(write=False)
    return m


@dataclass(frozen=True)
class PixelMask(Operator):
    """Seeded Bernoulli(keep_rate) pixel selection; ``block`` > 1 masks whole blocks."""

    keep_rate: float = 0.3
    seed: int = 0
    block: int = 1
    name = "pixel_mask"

    def __post_init__(self):
        if not 0.0 < self.keep_rate <= 1.0:
            raise InvalidInputError("keep_rate must lie in (0, 1]")

    def mask(self, shape):
        return _keep_mask(tuple(shape), float(self.keep_rate), int(self.seed), int(self.block))

    def apply(self, x):
        x = _image(x)
        return x[self.mask(x.shape)]

    def adjoint(self, v, shape):
        m = self.mask(shape)
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (int(m.sum()),):
            raise InvalidInputError("measurement shape incompatible with mask adjoint")
        out = np.zeros(shape)
        out[m] = v
        return out


@dataclass(frozen=True)
class HDRClip(Operator):
    """clip(scale * image, lo, hi)."""

    scale: float = 2.0
    lo: float = -1.0
    hi: float = 1.0
    linear = False
    name = "hdr_clip"

    def apply(self, x):
        return np.clip(self.scale * _image(x), self.lo, self.hi)

    def vjp(self, x, g):
        s = self.scale * _image(x)
        inside = (s > self.lo) & (s < self.hi)
        return np.where(inside, self.scale * np.asarray(g, dtype=np.float64), 0.0)


@lru_cache(maxsize=64)
def _feature_matrix(seed, dim, n):
    rng = np.random.RandomState(seed)
    F = rng.standard_normal((dim, n)) / np.sqrt(n)
    F.setflags(write=False)
    return F


def _normalize_with_vjp(u):
    nrm = np.linalg.norm(u)
    if nrm == 0.0:
        raise DegenerateFeatureError("features have zero norm")
    n = u / nrm

    def back(g):
        return (g - n * (n @ g)) / nrm

    return n, back


@dataclass(frozen=True)
class FeatureCosine(Operator):
    """Seeded random linear features followed by L2 normalization."""

    seed: int = 0
    dim: int = 16
    linear = False
    name = "feature_cosine"

    def apply(self, x):
        x = _image(x)
        F = _feature_matrix(int(self.seed), int(self.dim), x.size)
        return _normalize_with_vjp(F @ x.ravel())[0]

    def vjp(self, x, g):
        x = _image(x)
        F = _feature_matrix(int(self.seed), int(self.dim), x.size)
        _, back = _normalize_with_vjp(F @ x.ravel())
        return (F.T @ back(np.asarray(g, dtype=np.float64))).reshape(x.shape)


OPERATORS = {
    "identity": lambda **kw: Identity(),
    "downsample": lambda factor=2, **kw: Downsample(int(factor)),
    "gaussian_blur": lambda kernel_side=7, kernel_std=1.5, **kw: GaussianBlur(kernel_side, kernel_std),
    "pixel_mask": lambda keep_rate=0.3, mask_seed=0, block=1, **kw: PixelMask(float(keep_rate), int(mask_seed), int(block)),
    "hdr_clip": lambda scale=2.0, lo=-1.0, hi=1.0, **kw: HDRClip(float(scale), float(lo), float(hi)),
    "conv_kernel": lambda kernel=None, kernel_file=None, **kw: Convolution(
        load_kernel(kernel_file) if kernel is None else np.asarray(kernel, dtype=np.float64)),
    "feature_cosine": lambda feature_seed=0, feature_dim=16, **kw: FeatureCosine(int(feature_seed), int(feature_dim)),
}

PRESETS = {
    "paper-sr4": dict(op="downsample", factor=4, sigma=0.05),
    "paper-gblur": dict(op="gaussian_blur", kernel_side=61, kernel_std=3.0, sigma=0.05),
    "paper-inpaint70": dict(op="pixel_mask", keep_rate=0.3, sigma=0.05),
    "paper-hdr": dict(op="hdr_clip", scale=2.0, lo=-1.0, hi=1.0, sigma=0.05),
}


def make_operator(name, **params):
    try:
        factory = OPERATORS[name]
    except KeyError:
        raise InvalidInputError(f"unknown measurement operator {name!r}") from None
    return factory(**params)


@dataclass(frozen=True, eq=False)
class MeasurementSpec:
    """Operator, noise level, observation and loss weights of one inverse problem.

    ``sigma = inf`` gives a flat likelihood. ``perceptual_seed`` and
    ``perceptual_dim`` configure the random feature map used by the default
    perceptual-loss plug-in.
    """

    operator: Operator = field(default_factory=Identity)
    sigma: float = 0.05
    y: np.ndarray = None
    loss: str = "l1"
    lambda_p: float = 0.0
    lambda_pp: float = 0.0
    perceptual_seed: int = 1
    perceptual_dim: int = 16

    def __post_init__(self):
        if not self.sigma >= 0:
            raise InvalidInputError("sigma must be non-negative")
        if self.loss not in LOSSES:
            raise InvalidInputError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.y is not None:
            y = np.array(self.y, dtype=np.float64)
            y.setflags(write=False)
            object.__setattr__(self, "y", y)

    def with_observation(self, y):
        return replace(self, y=y)

    def _require_y(self):
        if self.y is None:
            raise InvalidStateError("measurement spec has no observation y")
        return self.y


def apply(spec, image):
    return spec.operator.apply(image)


def observe(spec, clean_image, random_state=None):
    """A(image) + sigma * standard normal noise."""
    clean = spec.operator.apply(clean_image)
    if np.isinf(spec.sigma):
        raise InvalidInputError("cannot draw observations with infinite noise")
    if spec.sigma == 0:
        return clean
    rng = check_random_state(random_state)
    return clean + spec.sigma * rng.standard_normal(clean.shape)


def _cosine_loss(a, y):
    n_a, back = _normalize_with_vjp(np.ravel(a))
    n_y, _ = _normalize_with_vjp(np.ravel(y))
    return 1.0 - float(n_a @ n_y), -back(n_y).reshape(np.shape(a))


def data_loss(spec, predicted_image):
    """Measurement loss and its gradient with respect to the image.

    L1 uses the subgradient sign(0) = 0; L2 is half the squared residual norm.
    """
    y = spec._require_y()
    x = _image(predicted_image)
    a = spec.operator.apply(x)
    if a.shape != y.shape:
        raise InvalidInputError(f"prediction gives measurement shape {a.shape}, y has {y.shape}")
    r = a - y
    if spec.loss == "l1":
        loss, g = float(np.abs(r).sum()), np.sign(r)
    elif spec.loss == "l2":
        loss, g = 0.5 * float((r * r).sum()), r
    else:
        loss, g = _cosine_loss(a, y)
    return loss, spec.operator.vjp(x, g)


def residual_norm(spec, image):
    y = spec._require_y()
    return float(np.linalg.norm(spec.operator.apply(image) - y))


def log_likelihood(spec, predicted_image):
    """Unnormalized Gaussian log-likelihood -||y - A(x)||^2 / (2 sigma^2)."""
    if spec.sigma == 0:
        raise InvalidInputError("sigma = 0 gives a point-mass likelihood, unsupported")
    y = spec._require_y()
    if np.isinf(spec.sigma):
        return 0.0
    r = spec.operator.apply(predicted_image) - y
    return -float((r * r).sum()) / (2.0 * spec.sigma ** 2)


def style_target(spec, reference_image):
    """Normalized features of a reference image, for use as ``y``."""
    if not isinstance(spec.operator, FeatureCosine):
        raise InvalidInputError("style_target needs a feature_cosine operator")
    return spec.operator.apply(reference_image)


def style_loss(spec, predicted_image):
    """1 - <features(x), y> and its image gradient."""
    y = spec._require_y()
    x = _image(predicted_image)
    f = spec.operator.apply(x)
    return 1.0 - float(f @ y), spec.operator.vjp(x, -y)


def perceptual_loss(spec, predicted_image):
    """Feature-cosine distance between A(x) and y under a seeded random map.

    Default plug-in for the perceptual-loss slot; returns (loss, image grad).
    """
    y = spec._require_y()
    x = _image(predicted_image)
    a = spec.operator.apply(x)
    if a.size == 0:
        return 0.0, np.zeros_like(x)
    G = _feature_matrix(int(spec.perceptual_seed), int(spec.perceptual_dim), a.size)
    u = G @ a.ravel()
    n_u, back = _normalize_with_vjp(u)
    n_v, _ = _normalize_with_vjp(G @ y.ravel())
    loss = 1.0 - float(n_u @ n_v)
    g_a = (G.T @ -back(n_v)).reshape(a.shape)
    return loss, spec.operator.vjp(x, g_a)
