"""Reverse-process drivers: anchored posterior sampling and its ablations.

Four kinds share one loop and differ in how tokens are proposed and scored:

==========  ===========================  ==============================
kind        proposed tokens              confidence
==========  ===========================  ==============================
aps         quantized expectation of     optimized table
            the optimized table
aps1        same as aps                  pretrained table
standard    sampled from pretrained      pretrained table
prior       sampled from pretrained      random order (no confidence)
==========  ===========================  ==============================
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.utils import check_random_state

from ._validation import MASK, is_masked, safe_log
from .codebook import lfq_quantize
from .exceptions import InvalidInputError, InvariantViolationError, ScheduleViolationError
from .inner_opt import OptConfig, Pipeline, expected_embedding, optimize
from .schedule import unmask_counts

logger = logging.getLogger(__name__)

KINDS = ("aps", "aps1", "standard", "prior")


def confidence(probs, tokens):
    """kappa^l = probs[l, tokens[l]]."""
    probs = np.asarray(probs, dtype=np.float64)
    tokens = np.asarray(tokens, dtype=np.int64)
    return probs[np.arange(tokens.shape[0]), tokens]


def select_anchors(kappa, frozen, target_count):
    """Top (target_count - |frozen|) non-frozen positions by confidence.

    Ties go to the lowest position index.
    """
    kappa = np.asarray(kappa, dtype=np.float64)
    frozen = np.asarray(frozen, dtype=bool)
    n_new = int(target_count) - int(frozen.sum())
    if n_new < 0:
        raise ScheduleViolationError(
            f"schedule asks for {target_count} revealed positions but {int(frozen.sum())} are frozen")
    free = np.flatnonzero(~frozen)
    if n_new > free.size:
        raise ScheduleViolationError("schedule asks for more positions than remain masked")
    order = free[np.lexsort((free, -kappa[free]))]
    return np.sort(order[:n_new])


def update_state(z, tokens, anchors):
    """Reveal ``tokens`` at ``anchors``; frozen positions are never overwritten."""
    z = np.asarray(z, dtype=np.int64)
    anchors = np.asarray(anchors, dtype=np.int64)
    if anchors.size and np.any(z[anchors] != MASK):
        raise InvariantViolationError("attempt to overwrite a frozen position")
    out = z.copy()
    out[anchors] = np.asarray(tokens, dtype=np.int64)[anchors]
    return out


@dataclass
class StepRecord:
    step: int
    state: np.ndarray
    prior_probs: np.ndarray
    probs: np.ndarray
    tokens: np.ndarray
    kappa: np.ndarray
    anchors: np.ndarray
    n_masked_after: int
    loss_initial: float = float("nan")
    loss_final: float = float("nan")


@dataclass
class SamplerRun:
    kind: str
    records: list = field(default_factory=list)
    tokens: np.ndarray = None
    image: np.ndarray = None
    error: str = None

    @property
    def masked_counts(self):
        return [r.n_masked_after for r in self.records]

    @property
    def ok(self):
        return self.error is None


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "aps"
    stochastic_reveal: bool = False
    gumbel: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown sampler kind {self.kind!r}; expected one of {KINDS}")


def _logits(probs):
    return safe_log(probs)


def run_sampler(denoiser, codebook, decoder, spec, schedule, opt_config=None,
                sampler_config=None, random_state=None, perceptual=None, strict=True):
    """Run one reverse trajectory from the all-MASK state.

    Records every step. With ``strict`` invariant violations raise; otherwise
    they are stored in ``run.error`` and the run stops.
    """
    opt_config = opt_config or OptConfig()
    sampler_config = sampler_config or SamplerConfig()
    kind = sampler_config.kind
    rng = check_random_state(random_state)
    L = decoder.length
    T = schedule.steps
    counts = unmask_counts(L, T)
    z = np.full(L, MASK, dtype=np.int64)
    run = SamplerRun(kind)
    prev_logits = None
    try:
        for j in range(1, T + 1):
            i = T - j + 1
            theta = np.asarray(denoiser(z, i), dtype=np.float64)
            masked = is_masked(z)
            loss0 = loss1 = float("nan")
            if kind in ("aps", "aps1"):
                phi0 = _logits(theta)
                if opt_config.warm_start and prev_logits is not None:
                    phi0 = np.where(masked[:, None], prev_logits, phi0)
                pipe = Pipeline(codebook, decoder, spec, prior_probs=theta, mask_flags=masked,
                                perceptual=perceptual)
                res = optimize(phi0, pipe, opt_config, trainable=masked)
                probs = res.probs
                prev_logits = res.logits
                loss0, loss1 = res.initial_loss, res.final_loss
                xq = lfq_quantize(expected_embedding(probs, codebook))
                if np.array_equal(xq, res.tape.quantized):
                    tokens = codebook.quantize_to_index(res.tape.expected)
                else:
                    tokens = codebook.quantize_to_index(expected_embedding(probs, codebook))
                tokens = np.asarray(tokens, dtype=np.int64)
                kappa = confidence(probs if kind == "aps" else theta, tokens)
            else:
                probs = theta
                cum = np.cumsum(theta, axis=1)
                u = rng.random_sample(L)[:, None]
                tokens = np.minimum((u > cum).sum(axis=1), theta.shape[1] - 1)
                if kind == "standard":
                    kappa = confidence(theta, tokens)
                else:
                    kappa = rng.random_sample(L)
            tokens = np.where(masked, tokens, z)
            score = kappa
            if sampler_config.gumbel > 0:
                score = kappa + sampler_config.gumbel * rng.gumbel(size=L)
            anchors = select_anchors(score, ~masked, counts[j - 1])
            if sampler_config.stochastic_reveal and anchors.size:
                keep = rng.random_sample(anchors.size) < schedule.reveal_weight(i)
                anchors = anchors[keep]
            z_next = update_state(z, tokens, anchors)
            if np.any(z_next[~masked] != z[~masked]):
                raise InvariantViolationError("frozen token changed")
            z = z_next
            run.records.append(StepRecord(j, z.copy(), theta, probs, tokens, kappa, anchors,
                                          int(is_masked(z).sum()), loss0, loss1))
            if not sampler_config.stochastic_reveal and run.records[-1].n_masked_after != L - counts[j - 1]:
                raise InvariantViolationError("masked count deviates from the unmask schedule")
        if np.any(is_masked(z)):
            raise InvariantViolationError("masked positions remain after the final step")
        run.tokens = z
        run.image = decoder.decode(codebook.embed(z))
    except Exception as exc:  # recorded for batch runs
        if strict:
            raise
        run.error = f"{type(exc).__name__}: {exc}"
        logger.warning("sampler run failed: %s", run.error)
    return run


def _kind(kind, kw):
    sc = kw.pop("sampler_config", None) or SamplerConfig()
    return SamplerConfig(kind, sc.stochastic_reveal, sc.gumbel)


def aps_sample(denoiser, codebook, decoder, spec, schedule, opt_config=None,
               random_state=None, **kw):
    """Anchored posterior sampling: quantized-expectation guidance + anchored remasking."""
    return run_sampler(denoiser, codebook, decoder, spec, schedule, opt_config,
                       _kind("aps", kw), random_state, **kw)


def aps1_sample(denoiser, codebook, decoder, spec, schedule, opt_config=None,
                random_state=None, **kw):
    """Quantized-expectation guidance with prior-confidence remasking."""
    return run_sampler(denoiser, codebook, decoder, spec, schedule, opt_config,
                       _kind("aps1", kw), random_state, **kw)


def standard_sample(denoiser, codebook, decoder, spec, schedule, opt_config=None,
                    random_state=None, **kw):
    """Sample tokens from the prior; reveal the most confident under the prior."""
    return run_sampler(denoiser, codebook, decoder, spec, schedule, opt_config,
                       _kind("standard", kw), random_state, **kw)


def prior_sample(denoiser, codebook, decoder, spec, schedule, opt_config=None,
                 random_state=None, **kw):
    """Ancestral sampling from the prior with a random reveal order."""
    return run_sampler(denoiser, codebook, decoder, spec, schedule, opt_config,
                       _kind("prior", kw), random_state, **kw)


SAMPLERS = {"aps": aps_sample, "aps1": aps1_sample, "standard": standard_sample,
            "prior": prior_sample}
