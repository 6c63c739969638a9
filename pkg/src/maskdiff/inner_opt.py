"""Quantized-expectation inner loop.

Pipeline for one reverse step::

    logits -> softmax -> expected embedding -> LFQ (straight-through)
           -> decode -> measurement / perceptual / prior-preservation loss

Gradients are a fixed hand-derived reverse-mode chain; no autodiff engine.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import measurements
from ._validation import check_finite, safe_log, softmax
from .codebook import lfq_quantize

logger = logging.getLogger(__name__)


def expected_embedding(probs, codebook):
    """Row-wise probability-weighted average of codebook entries."""
    return np.asarray(probs, dtype=np.float64) @ codebook.entries


def prior_preservation_loss(probs, prior_probs, mask_flags, with_grad=False):
    """-(1/L) sum_l log <probs^l, prior^l> over masked positions.

    With ``with_grad`` also returns the gradient w.r.t. ``probs``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    prior_probs = np.asarray(prior_probs, dtype=np.float64)
    m = np.asarray(mask_flags, dtype=bool)
    L = probs.shape[0]
    inner = (probs * prior_probs).sum(axis=1)
    loss = float(-(safe_log(inner[m])).sum() / L)
    if not with_grad:
        return loss
    g = np.zeros_like(probs)
    g[m] = -prior_probs[m] / (np.maximum(inner[m], 1e-30)[:, None] * L)
    return loss, g


def quantized_log_likelihood(spec, decoder, codebook):
    """Callable ``table -> log q(y | table)`` through the quantized expectation.

    This is the tilt used by the variational objectives and the oracle.
    """

    def loglik(table):
        xq = lfq_quantize(expected_embedding(table, codebook))
        return measurements.log_likelihood(spec, decoder.decode(xq))

    return loglik


@dataclass
class PipelineTape:
    """Intermediates of one forward pass.

    ``ste`` equals ``quantized`` numerically; in the backward pass it is
    treated as the identity of ``expected``.
    """

    logits: np.ndarray
    probs: np.ndarray
    expected: np.ndarray
    quantized: np.ndarray
    ste: np.ndarray
    image: np.ndarray
    data_loss: float
    perceptual_loss: float
    prior_loss: float
    total: float
    grad_image: np.ndarray = field(repr=False)
    grad_probs_prior: np.ndarray = field(repr=False)
    codebook: object = field(repr=False)
    decoder: object = field(repr=False)


class Pipeline:
    """Differentiable loss of a logit table for one reverse step.

    Parameters
    ----------
    codebook, decoder, spec
        Spec must carry an observation ``y``.
    prior_probs : (L, K) array, optional
        Pretrained prediction, needed only when ``spec.lambda_pp > 0``.
    mask_flags : (L,) bool array, optional
        Masked positions for the prior-preservation term.
    perceptual : callable, optional
        ``(spec, image) -> (loss, image_grad)``; defaults to
        :func:`maskdiff.measurements.perceptual_loss`.
    surrogate : bool
        Replace quantization by the identity but keep the straight-through
        offset frozen at ``offset``. Used by finite-difference probes.
    """

    def __init__(self, codebook, decoder, spec, prior_probs=None, mask_flags=None,
                 perceptual=None, surrogate=False, offset=None):
        self.codebook = codebook
        self.decoder = decoder
        self.spec = spec
        self.prior_probs = prior_probs
        self.mask_flags = mask_flags
        self.perceptual = perceptual or measurements.perceptual_loss
        self.surrogate = surrogate
        self.offset = offset

    def forward(self, logits):
        logits = check_finite(logits, "logits")
        spec = self.spec
        probs = softmax(logits)
        xbar = probs @ self.codebook.entries
        if self.surrogate:
            xq = xbar + self.offset
        else:
            xq = lfq_quantize(xbar)
        xt = xq.copy()  # value of xbar + sg(xq - xbar)
        image = self.decoder.decode(xt)
        d_loss, g_img = measurements.data_loss(spec, image)
        p_loss = 0.0
        if spec.lambda_p:
            p_loss, g_p = self.perceptual(spec, image)
            g_img = g_img + spec.lambda_p * g_p
        pp_loss = 0.0
        g_pp = None
        if spec.lambda_pp:
            pp_loss, g_pp = prior_preservation_loss(probs, self.prior_probs, self.mask_flags,
                                                    with_grad=True)
        total = d_loss + spec.lambda_p * p_loss + spec.lambda_pp * pp_loss
        return PipelineTape(logits, probs, xbar, xq, xt, image, d_loss, p_loss, pp_loss,
                            total, g_img, g_pp if g_pp is None else spec.lambda_pp * g_pp,
                            self.codebook, self.decoder)

    def loss(self, logits):
        return self.forward(logits).total

    @staticmethod
    def backward(tape):
        g_xt = tape.decoder.vjp(tape.ste, tape.grad_image)
        g_xbar = g_xt  # straight-through
        g_probs = g_xbar @ tape.codebook.entries.T
        if tape.grad_probs_prior is not None:
            g_probs = g_probs + tape.grad_probs_prior
        p = tape.probs
        return p * (g_probs - (p * g_probs).sum(axis=1, keepdims=True))


def forward(logits, codebook, decoder, spec, **kwargs):
    return Pipeline(codebook, decoder, spec, **kwargs).forward(logits)


def backward(tape):
    """Gradient of ``tape.total`` w.r.t. the logits (dense over every entry)."""
    return Pipeline.backward(tape)


def ste_offset(logits, codebook):
    """Frozen straight-through offset ``Q(xbar) - xbar`` at ``logits``."""
    xbar = expected_embedding(softmax(np.asarray(logits, dtype=np.float64)), codebook)
    return lfq_quantize(xbar) - xbar


@dataclass
class AdamState:
    """Adam moments for a logit table."""

    shape: tuple
    lr: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.shape)
        if self.v is None:
            self.v = np.zeros(self.shape)

    def update(self, params, grad, lr=None):
        lr = self.lr if lr is None else lr
        self.step += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.step)
        v_hat = self.v / (1.0 - self.beta2 ** self.step)
        return params - lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class OptConfig:
    inner_steps: int = 100
    lr: float = 1.0
    lr_decay: str = "harmonic"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warm_start: bool = False

    def lr_at(self, m):
        if self.lr_decay == "none":
            return self.lr
        return self.lr / (1.0 + m / max(self.inner_steps, 1))


@dataclass
class OptResult:
    probs: np.ndarray
    logits: np.ndarray
    tape: PipelineTape
    initial_loss: float
    final_loss: float
    history: list
    diverged: bool = False


def optimize(logits0, pipeline, config=None, trainable=None):
    """Run ``config.inner_steps`` Adam steps on the pipeline loss.

    ``trainable`` is an optional (L,) bool mask; other rows keep their initial
    logits. Returns an :class:`OptResult` whose ``probs`` is the softmax of the
    final logits (the last finite iterate if the loss diverges).
    """
    config = config or OptConfig()
    phi = check_finite(logits0, "logits").copy()
    row_mask = None if trainable is None else np.asarray(trainable, dtype=bool)[:, None]
    adam = AdamState(phi.shape, config.lr, config.beta1, config.beta2, config.eps)
    tape = pipeline.forward(phi)
    initial = tape.total
    history = [initial]
    diverged = False
    for m in range(int(config.inner_steps)):
        grad = pipeline.backward(tape)
        if row_mask is not None:
            grad = np.where(row_mask, grad, 0.0)
        new_phi = adam.update(phi, grad, config.lr_at(m))
        if not np.all(np.isfinite(new_phi)):
            diverged = True
            break
        new_tape = pipeline.forward(new_phi)
        if not math.isfinite(new_tape.total):
            diverged = True
            break
        phi, tape = new_phi, new_tape
        history.append(tape.total)
    if diverged:
        logger.warning("inner optimization diverged after %d steps; keeping last finite iterate",
                       len(history) - 1)
    return OptResult(tape.probs, phi, tape, initial, tape.total, history, diverged)
