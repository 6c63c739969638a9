"""Masked discrete diffusion with anchored posterior sampling on toy worlds."""

from ._validation import MASK
from .codebook import Codebook, embedding_to_index, index_to_embedding, lfq_quantize
from .config import Config, parse_config
from .diffusion import aps_loss, ddps_loss, forward_sample, nelbo, posterior_step, step_kl
from .estimators import AnchoredPosteriorSampler
from .harness import ablate, render_pgm, run_experiment
from .inner_opt import OptConfig, Pipeline, optimize
from .measurements import MeasurementSpec, make_operator
from .sampler import (SamplerConfig, SamplerRun, aps1_sample, aps_sample, prior_sample,
                      run_sampler, standard_sample)
from .schedule import NoiseSchedule, unmask_counts
from .world import PatchDecoder, TemplateMixture, TemplatePrior

__version__ = "0.1.0"

__all__ = [
    "MASK", "AnchoredPosteriorSampler", "Config", "parse_config", "ablate", "render_pgm",
    "run_experiment", "aps1_sample", "prior_sample", "standard_sample", "Codebook", "embedding_to_index", "index_to_embedding", "lfq_quantize",
    "aps_loss", "ddps_loss", "forward_sample", "nelbo", "posterior_step", "step_kl",
    "OptConfig", "Pipeline", "optimize", "MeasurementSpec", "make_operator",
    "SamplerConfig", "SamplerRun", "aps_sample", "run_sampler", "NoiseSchedule",
    "unmask_counts", "PatchDecoder", "TemplateMixture", "TemplatePrior",
]
