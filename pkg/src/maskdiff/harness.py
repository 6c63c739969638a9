"""Experiment orchestration: task synthesis, seeded runs, metrics and file output."""

import csv
import logging
import math
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .codebook import Codebook
from .config import parse_templates
from .exceptions import InvalidInputError
from .inner_opt import OptConfig
from .measurements import MeasurementSpec, PixelMask, make_operator, observe, residual_norm
from .sampler import SamplerConfig, run_sampler
from .schedule import NoiseSchedule
from .world import PatchDecoder, TemplatePrior

logger = logging.getLogger(__name__)

_OP_PARAMS = ("factor", "kernel_side", "kernel_std", "keep_rate", "mask_seed", "block",
              "scale", "lo", "hi", "feature_seed", "feature_dim")

RUN_FIELDS = ("config_hash", "seed", "sampler", "ok", "residual", "psnr", "token_accuracy",
              "final_loss", "masked_trace", "tokens", "error")
SUMMARY_FIELDS = ("config_hash", "sampler", "n_runs", "n_failed", "residual_median",
                  "residual_iqr", "psnr_median", "psnr_iqr", "token_accuracy_mean")


@dataclass
class World:
    prior: TemplatePrior
    codebook: Codebook
    decoder: PatchDecoder
    schedule: NoiseSchedule
    spec: MeasurementSpec
    opt: OptConfig
    sampler: SamplerConfig


def build_prior(cfg):
    K, L = cfg["codebook.size"], cfg.length
    if cfg["prior.templates"]:
        templates = np.array(parse_templates(cfg["prior.templates"]), dtype=np.int64)
        if cfg["prior.weights"]:
            weights = np.array([float(w) for w in cfg["prior.weights"].split()])
        else:
            weights = np.full(len(templates), 1.0 / len(templates))
        return TemplatePrior(templates, weights / weights.sum(), cfg["prior.rho"], K)
    return TemplatePrior.random(cfg["prior.n_templates"], L, K, cfg["prior.rho"],
                                random_state=cfg["prior.seed"])


def build_spec(cfg):
    params = {k: cfg["measure." + k] for k in _OP_PARAMS}
    if cfg["measure.kernel_file"]:
        params["kernel_file"] = cfg["measure.kernel_file"]
    op = make_operator(cfg["measure.op"], **params)
    return MeasurementSpec(op, sigma=cfg["measure.sigma"], loss=cfg["measure.loss"],
                           lambda_p=cfg["measure.lambda_p"], lambda_pp=cfg["measure.lambda_pp"],
                           perceptual_seed=cfg["measure.perceptual_seed"],
                           perceptual_dim=cfg["measure.perceptual_dim"])


def build_world(cfg, kind=None):
    cfg.validate()
    decoder = PatchDecoder((cfg["decoder.grid_h"], cfg["decoder.grid_w"]), cfg["decoder.patch"],
                           cfg["decoder.dim"], seed=cfg["decoder.seed"], output=cfg["decoder.output"])
    opt = OptConfig(inner_steps=cfg["opt.inner_steps"], lr=cfg["opt.lr"], lr_decay=cfg["opt.lr_decay"],
                    beta1=cfg["opt.adam_beta1"], beta2=cfg["opt.adam_beta2"], eps=cfg["opt.adam_eps"],
                    warm_start=cfg["opt.warm_start"])
    sampler = SamplerConfig(kind or cfg["sampler.kind"][0], cfg["sampler.stochastic_reveal"],
                            cfg["sampler.gumbel"])
    return World(build_prior(cfg), Codebook(cfg["decoder.dim"], cfg["codebook.size"]), decoder,
                 NoiseSchedule(cfg["schedule.kind"], cfg.steps), build_spec(cfg), opt, sampler)


def stream(base, seed, purpose):
    """Independent RandomState for (base seed, run seed, purpose)."""
    state = np.random.SeedSequence([int(base), int(seed), int(purpose)]).generate_state(1)[0]
    return np.random.RandomState(state)


def synthesize_task(world, base_seed, seed, mask_per_seed=False):
    """Ground-truth tokens, clean image and measured spec for one seed."""
    rng = stream(base_seed, seed, 0)
    x = world.prior.sample(rng)
    clean = world.decoder(world.codebook.embed(x))
    spec = world.spec
    if mask_per_seed and isinstance(spec.operator, PixelMask):
        spec = replace(spec, operator=replace(spec.operator, seed=spec.operator.seed + int(seed)))
    spec = spec.with_observation(observe(spec, clean, rng))
    return x, clean, spec


def psnr(image, reference, value_range=2.0):
    mse = float(np.mean((np.asarray(image) - np.asarray(reference)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(value_range ** 2 / mse)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "inf" if v == math.inf else repr(v)
    return str(v)


def run_seed(cfg, seed):
    """All configured samplers on one seed's task. Returns (rows, images, seconds)."""
    kinds = cfg["sampler.kind"]
    world = build_world(cfg)
    x, clean, spec = synthesize_task(world, cfg["sampler.seed"], seed, cfg["measure.mask_per_seed"])
    rows, images, timing = [], {"truth": clean}, {}
    m = measurement_image(spec, clean.shape)
    if m is not None:
        images["measurement"] = m
    for kind in kinds:
        sc = SamplerConfig(kind, world.sampler.stochastic_reveal, world.sampler.gumbel)
        t0 = time.perf_counter()
        run = run_sampler(world.prior, world.codebook, world.decoder, spec, world.schedule,
                          world.opt, sc, random_state=stream(cfg["sampler.seed"], seed, 1),
                          strict=False)
        timing[kind] = time.perf_counter() - t0
        row = {"config_hash": cfg.hash(), "seed": seed, "sampler": kind, "ok": run.ok,
               "error": run.error or "", "masked_trace": " ".join(map(str, run.masked_counts))}
        if run.ok:
            losses = [r.loss_final for r in run.records if not math.isnan(r.loss_final)]
            row.update(residual=residual_norm(spec, run.image), psnr=psnr(run.image, clean),
                       token_accuracy=float(np.mean(run.tokens == x)),
                       final_loss=losses[-1] if losses else math.nan,
                       tokens=" ".join(map(str, run.tokens)))
            images[kind] = run.image
        else:
            row.update(residual=math.nan, psnr=math.nan, token_accuracy=math.nan,
                       final_loss=math.nan, tokens="")
        rows.append(row)
    return rows, images, timing


def measurement_image(spec, shape):
    y = np.asarray(spec.y)
    if y.ndim == 2:
        return y
    op = spec.operator
    if getattr(op, "linear", True) and y.ndim == 1:
        try:
            return op.adjoint(y, shape)
        except (InvalidInputError, NotImplementedError):
            return None
    return None


def render_pgm(image, path):
    """8-bit binary PGM; [-1, 1] maps linearly to [0, 255] with clamping."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise InvalidInputError("render_pgm needs a 2-D image")
    if not np.all(np.isfinite(image)):
        raise InvalidInputError("image contains non-finite values")
    data = np.clip(np.rint((image + 1.0) * 127.5), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise InvalidInputError(f"{path}: not a binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(raw[m.end(): m.end() + w * h], dtype=np.uint8).reshape(h, w)


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in fields})


def _quantiles(values):
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    with np.errstate(invalid="ignore"):
        q1, q3 = np.percentile(v, [25, 75])
        iqr = q3 - q1
    return float(np.median(v)), float(iqr)


def summarize(rows, kinds, config_hash):
    out = []
    for kind in kinds:
        sel = [r for r in rows if r["sampler"] == kind]
        okr = [r for r in sel if r["ok"]]
        rm, ri = _quantiles([r["residual"] for r in okr])
        pm, pi = _quantiles([r["psnr"] for r in okr])
        acc = float(np.mean([r["token_accuracy"] for r in okr])) if okr else math.nan
        out.append({"config_hash": config_hash, "sampler": kind, "n_runs": len(sel),
                    "n_failed": len(sel) - len(okr), "residual_median": rm, "residual_iqr": ri,
                    "psnr_median": pm, "psnr_iqr": pi, "token_accuracy_mean": acc})
    return out


def _map_seeds(cfg, seeds, parallel):
    if parallel > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(run_seed, [cfg] * len(seeds), seeds))
    return [run_seed(cfg, s) for s in seeds]


@dataclass
class ExperimentResult:
    rows: list
    summary: list
    out_dir: str

    @property
    def ok(self):
        return all(r["ok"] for r in self.rows)

    def residuals(self, kind):
        return np.array([r["residual"] for r in self.rows if r["sampler"] == kind])


def run_experiment(cfg, out_dir=None, seeds=None, parallel=None):
    """Run every configured sampler on seeds 0..n-1 and write CSVs and images.

    Rows are collected in seed order, so serial and parallel runs write
    identical files. Wall-clock goes to ``timing.csv`` only.
    """
    cfg.validate()
    n = cfg["run.seeds"] if seeds is None else int(seeds)
    parallel = cfg["run.parallel"] if parallel is None else int(parallel)
    out_dir = out_dir or cfg["run.out"]
    os.makedirs(out_dir, exist_ok=True)
    results = _map_seeds(cfg, list(range(n)), parallel)
    rows, timing_rows = [], []
    for seed, (seed_rows, images, timing) in enumerate(results):
        rows.extend(seed_rows)
        timing_rows.extend({"seed": seed, "sampler": k, "seconds": t} for k, t in timing.items())
        if cfg["run.images"]:
            for name, img in images.items():
                render_pgm(img, os.path.join(out_dir, f"seed{seed:04d}_{name}.pgm"))
    summary = summarize(rows, cfg["sampler.kind"], cfg.hash())
    _write_csv(os.path.join(out_dir, "runs.csv"), RUN_FIELDS, rows)
    _write_csv(os.path.join(out_dir, "summary.csv"), SUMMARY_FIELDS, summary)
    _write_csv(os.path.join(out_dir, "timing.csv"), ("seed", "sampler", "seconds"), timing_rows)
    with open(os.path.join(out_dir, "config.cfg"), "w") as fh:
        fh.write(cfg.render())
    return ExperimentResult(rows, summary, out_dir)


def win_rate(a, b):
    """Fraction of pairs where a has the smaller residual; ties count one half."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size == 0:
        raise InvalidInputError("win_rate needs equal-length non-empty arrays")
    return float(np.mean(np.where(a < b, 1.0, np.where(a == b, 0.5, 0.0))))


def ordering_rate(*residuals):
    """Fraction of seeds with residual[0] <= residual[1] <= ... pairwise."""
    r = np.vstack([np.asarray(x, dtype=np.float64) for x in residuals])
    return float(np.mean(np.all(r[:-1] <= r[1:], axis=0)))


def ablate(cfg, out_dir=None, seeds=None, parallel=None):
    """Paired comparison of the configured sampler kinds on identical tasks.

    Writes the ``run_experiment`` files plus ``paired.csv`` (per-seed
    residuals and deltas), ``winrates.csv`` and ``traces.csv`` (masked count
    per step). Returns ``(result, winrates)``.
    """
    kinds = cfg["sampler.kind"]
    if len(kinds) < 2:
        raise InvalidInputError("ablate needs at least two sampler kinds")
    res = run_experiment(cfg, out_dir, seeds, parallel)
    by = {k: res.residuals(k) for k in kinds}
    seeds_all = sorted({r["seed"] for r in res.rows})
    paired = []
    for idx, seed in enumerate(seeds_all):
        row = {"seed": seed}
        for k in kinds:
            row[f"residual_{k}"] = by[k][idx]
        for a in kinds:
            for b in kinds:
                if a < b:
                    row[f"delta_{a}_{b}"] = by[a][idx] - by[b][idx]
        paired.append(row)
    wins = [{"a": a, "b": b, "win_rate": win_rate(by[a], by[b]),
             "median_a": float(np.median(by[a])), "median_b": float(np.median(by[b]))}
            for a in kinds for b in kinds if a != b]
    traces = [{"seed": r["seed"], "sampler": r["sampler"], "step": j + 1, "n_masked": int(c)}
              for r in res.rows for j, c in enumerate(r["masked_trace"].split())]
    out = res.out_dir
    _write_csv(os.path.join(out, "paired.csv"), list(paired[0]) if paired else ["seed"], paired)
    _write_csv(os.path.join(out, "winrates.csv"), ("a", "b", "win_rate", "median_a", "median_b"), wins)
    _write_csv(os.path.join(out, "traces.csv"), ("seed", "sampler", "step", "n_masked"), traces)
    return res, wins
