"""Acceptance audits A1-A10.

Each ``check_*`` function returns a list of :class:`CheckResult`. The CLI and
the acceptance tests both call them, so the two always agree.
"""

import math
import os
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from . import measurements
from ._validation import MASK, is_masked
from .codebook import Codebook, embedding_to_index, index_to_embedding, lfq_quantize
from .config import preset
from .diffusion import aps_loss, ddps_loss, nelbo, posterior_step, step_kl
from .harness import ablate, build_world, ordering_rate, run_experiment, synthesize_task, win_rate
from .inner_opt import OptConfig, Pipeline, quantized_log_likelihood, ste_offset
from .measurements import (Convolution, Downsample, FeatureCosine, GaussianBlur, HDRClip,
                           Identity, MeasurementSpec, PixelMask)
from .oracle import (RandomCandidate, PerturbedDenoiser, all_sequences, brute_force_conditional,
                     categorical_kl, empirical_marginals, exact_model_posterior, exact_posterior,
                     tv_distance)
from .sampler import SamplerConfig, run_sampler
from .schedule import NoiseSchedule, unmask_counts
from .world import PatchDecoder, TemplatePrior


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""
    seconds: float = 0.0
    budget: float = math.inf
    gated: bool = True

    @property
    def ok(self):
        return self.passed and self.seconds <= self.budget

    def line(self):
        status = "PASS" if self.ok else "FAIL"
        if not self.gated:
            status = "INFO"
        timing = f"time={self.seconds:.2f}s/{self.budget:g}s " if math.isfinite(self.budget) else ""
        return (f"{status} {self.name}: value={self.value:.6g} threshold={self.threshold:.6g} "
                f"{timing}{self.detail}").rstrip()


def _timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


def _finish(results, seconds, budget):
    for r in results:
        r.seconds, r.budget = seconds, budget
    return results


# A1 ------------------------------------------------------------------------

def check_kl_identity(n=1000, seed=0):
    t0 = time.perf_counter()
    rng = np.random.RandomState(seed)
    worst = 0.0
    for _ in range(n):
        K = rng.randint(2, 9)
        sch = NoiseSchedule(("cosine", "linear")[rng.randint(2)], int(rng.randint(1, 21)))
        i = int(rng.randint(1, sch.steps + 1))
        row = rng.dirichlet(np.ones(K))
        x = int(rng.randint(K))
        masked = bool(rng.rand() < 0.8)
        z = np.array([MASK if masked else x])
        true = posterior_step(z, np.eye(K)[[x]], i, sch)[0]
        model = posterior_step(z, row[None], i, sch)[0]
        worst = max(worst, abs(categorical_kl(true, model) - step_kl(x, row, i, masked, sch)))
    res = CheckResult("A1 step_kl closed form", worst <= 1e-12, worst, 1e-12, f"n={n}")
    return _finish([res], time.perf_counter() - t0, 1.0)


# A2 / A3 ---------------------------------------------------------------------

def enumerable_instance(seed=0, K=3, L=3, T=3):
    """Codebook, decoder, schedule and pretrained prior of the tiny oracle instance."""
    cb = Codebook(2, K)
    dec = PatchDecoder((1, L), 2, 2, seed=seed)
    sch = NoiseSchedule("cosine", T)
    prior = TemplatePrior.random(2, L, K, 0.2, random_state=seed)
    return cb, dec, sch, prior


def _random_spec(rng, dec, cb, K):
    ops = [Identity(), PixelMask(0.5, int(rng.randint(100)), 2), Downsample(2)]
    op = ops[rng.randint(len(ops))]
    spec = MeasurementSpec(op, sigma=float(rng.uniform(0.2, 1.0)), loss="l2")
    x_obs = rng.randint(K, size=dec.length)
    return spec.with_observation(measurements.observe(spec, dec(cb.embed(x_obs)), rng))


def check_bounds(n=100, seed=0):
    t0 = time.perf_counter()
    cb, dec, sch, prior = enumerable_instance(seed)
    K = cb.size
    rng = np.random.RandomState(seed)
    gap_ddps = gap_aps = math.inf
    reduction = identity = 0.0
    for k in range(n):
        x = rng.randint(K, size=dec.length)
        spec = _random_spec(rng, dec, cb, K)
        phi = RandomCandidate(K, seed=1000 + k)
        ll = quantized_log_likelihood(spec, dec, cb)
        neg_log_p = -exact_model_posterior(x, phi, sch, K, ll)
        gap_ddps = min(gap_ddps, ddps_loss(x, phi, sch, ll) - neg_log_p)
        gap_aps = min(gap_aps, aps_loss(x, phi, prior, sch, ll) - neg_log_p)
        flat = quantized_log_likelihood(MeasurementSpec(spec.operator, math.inf, spec.y), dec, cb)
        reduction = max(reduction, abs(ddps_loss(x, phi, sch, flat) - nelbo(x, phi, sch)))
        tilt = -ddps_loss(x, prior, sch, ll) + nelbo(x, prior, sch)
        identity = max(identity, abs(aps_loss(x, prior, prior, sch, ll) - nelbo(x, prior, sch) + tilt))
    seconds = time.perf_counter() - t0
    a2 = [CheckResult("A2 ddps bound", gap_ddps >= -1e-9, gap_ddps, -1e-9, "min(ddps + log p)"),
          CheckResult("A2 flat-likelihood reduction", reduction <= 1e-12, reduction, 1e-12)]
    a3 = [CheckResult("A3 aps bound", gap_aps >= -1e-9, gap_aps, -1e-9, "min(aps + log p)"),
          CheckResult("A3 phi=theta identity", identity <= 1e-12, identity, 1e-12)]
    return _finish(a2, seconds, 30.0) + _finish(a3, seconds, 30.0)


# A4 --------------------------------------------------------------------------

def _operator_cases(rng):
    k = rng.rand(3, 3) + 0.1
    return [
        ("identity", Identity(), "l2"),
        ("downsample", Downsample(2), "l1"),
        ("gaussian_blur", GaussianBlur(5, 1.0), "l2"),
        ("conv_kernel", Convolution(k), "l1"),
        ("pixel_mask", PixelMask(0.6, int(rng.randint(100)), 1), "l2"),
        ("hdr_clip", HDRClip(1.5, -0.5, 0.5), "l2"),
        ("feature_cosine", FeatureCosine(int(rng.randint(100)), 8), "cosine"),
    ]


def _rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def gradient_error(pipe, logits, h=1e-6):
    """Relative error between backward and central differences of the surrogate."""
    g = pipe.backward(pipe.forward(logits))
    sur = Pipeline(pipe.codebook, pipe.decoder, pipe.spec, pipe.prior_probs, pipe.mask_flags,
                   pipe.perceptual, surrogate=True, offset=ste_offset(logits, pipe.codebook))
    fd = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        e = np.zeros_like(logits)
        e[idx] = h
        fd[idx] = (sur.loss(logits + e) - sur.loss(logits - e)) / (2 * h)
    return _rel_err(g, fd)


def check_gradients(n=50, seed=0):
    t0 = time.perf_counter()
    rng = np.random.RandomState(seed)
    worst, worst_name = 0.0, ""
    per_op = {}
    for k in range(n):
        name, op, loss = _operator_cases(rng)[k % 7]
        d = int(rng.randint(2, 4))
        cb = Codebook(d)
        dec = PatchDecoder((2, 2), 4, d, seed=int(rng.randint(100)))
        spec = MeasurementSpec(op, sigma=0.05, loss=loss, lambda_p=float(rng.choice([0.0, 0.1])),
                               lambda_pp=float(rng.choice([0.0, 0.1])), perceptual_dim=6)
        y = op.apply(dec(cb.embed(rng.randint(cb.size, size=dec.length))))
        y = y + 0.05 * rng.standard_normal(np.shape(y))
        if name == "feature_cosine":
            y = y / np.linalg.norm(y)
        spec = spec.with_observation(y)
        prior = rng.dirichlet(np.ones(cb.size), size=dec.length)
        mask = rng.rand(dec.length) < 0.7
        pipe = Pipeline(cb, dec, spec, prior, mask)
        err = gradient_error(pipe, rng.standard_normal((dec.length, cb.size)))
        per_op[name] = max(per_op.get(name, 0.0), err)
        if err > worst:
            worst, worst_name = err, name
    adj = 0.0
    shape = (8, 8)
    for name, op, _ in _operator_cases(rng):
        if not getattr(op, "linear", True):
            continue
        for _ in range(5):
            u = rng.standard_normal(shape)
            v = rng.standard_normal(np.shape(op.apply(u)))
            adj = max(adj, abs(float(np.sum(op.apply(u) * v) - np.sum(u * op.adjoint(v, shape)))))
    dec = PatchDecoder((2, 3), 3, 4, seed=1)
    for _ in range(5):
        E = rng.standard_normal((dec.length, 4))
        G = rng.standard_normal(dec.image_shape)
        adj = max(adj, abs(float(np.sum(dec.linear(E) * G) - np.sum(E * dec.vjp(E, G)))))
    detail = " ".join(f"{k}={v:.1e}" for k, v in per_op.items())
    res = [CheckResult("A4 STE gradient vs finite differences", worst <= 1e-5, worst, 1e-5,
                       f"worst={worst_name} {detail}"),
           CheckResult("A4 operator adjoints", adj <= 1e-10, adj, 1e-10)]
    return _finish(res, time.perf_counter() - t0, 10.0)


# A5 --------------------------------------------------------------------------

def _step_states(prior, schedule, i):
    """(z, q(z_t = z), q(x | z) table, mask) for every partially masked state."""
    K, L = prior.n_tokens, prior.length
    a = schedule.alpha_t(i)
    em = prior._emission()
    out = []
    for z in all_sequences(K + 1, L) - 1:
        m = is_masked(z)
        pz = (1 - a) ** m.sum() * a ** (L - m.sum())
        if not m.any() or pz == 0.0:
            continue
        rev = np.flatnonzero(~m)
        pz *= float(np.sum(prior.weights * np.prod(em[:, rev, z[rev]], axis=1)))
        out.append((z, pz, prior.denoise(z), m))
    return out


def expected_step_ce(denoiser, states, i):
    """E_{x ~ q, z ~ q(z_t | x)} sum_l 1{masked} CE(x^l, denoiser(z)^l)."""
    total = 0.0
    for z, pz, cond, m in states:
        pred = np.asarray(denoiser(z, i))
        total += pz * float(-(cond[m] * np.log(pred[m])).sum())
    return total


def check_denoiser(n_priors=5, n_states=20, n_perturb=100, seed=0):
    t0 = time.perf_counter()
    rng = np.random.RandomState(seed)
    K, L = 3, 4
    worst = 0.0
    for r in range(n_priors):
        prior = TemplatePrior.random(int(rng.randint(1, 4)), L, K, float(rng.uniform(0.0, 0.5)),
                                     random_state=rng)
        for _ in range(n_states):
            z = rng.randint(K, size=L)
            z[rng.rand(L) < 0.5] = MASK
            worst = max(worst, float(np.abs(prior.denoise(z) - brute_force_conditional(prior, z)).max()))
    prior = TemplatePrior.random(2, L, K, 0.2, random_state=seed)
    sch = NoiseSchedule("cosine", 4)
    i = 2
    states = _step_states(prior, sch, i)
    best = expected_step_ce(prior, states, i)
    margin = min(expected_step_ce(PerturbedDenoiser(prior, seed=s, scale=0.3), states, i) - best
                 for s in range(n_perturb))
    res = [CheckResult("A5 exact denoiser vs enumeration", worst <= 1e-12, worst, 1e-12),
           CheckResult("A5 Bayes optimality", margin > 0, margin, 0.0,
                       f"min CE excess over {n_perturb} perturbations")]
    return _finish(res, time.perf_counter() - t0, 10.0)


# A6 --------------------------------------------------------------------------

def check_sampler_invariants(n_runs=200, seed=0):
    t0 = time.perf_counter()
    cfg = preset("toy-inpaint")
    world = build_world(cfg)
    L, T = world.decoder.length, world.schedule.steps
    expected = [L - c for c in unmask_counts(L, T)]
    bad_counts = bad_frozen = bad_final = 0
    for s in range(seed, seed + n_runs):
        _, _, spec = synthesize_task(world, 0, s, True)
        run = run_sampler(world.prior, world.codebook, world.decoder, spec, world.schedule,
                          world.opt, SamplerConfig("aps"), random_state=s, strict=False)
        if not run.ok:
            bad_final += 1
            continue
        bad_counts += run.masked_counts != expected
        prev = np.full(L, MASK)
        for rec in run.records:
            fixed = prev != MASK
            if np.any(rec.state[fixed] != prev[fixed]):
                bad_frozen += 1
                break
            prev = rec.state
        bad_final += bool(np.any(is_masked(run.tokens)))
    res = [CheckResult("A6 masked counts follow schedule", bad_counts == 0, bad_counts, 0,
                       f"runs={n_runs} L={L} T={T}"),
           CheckResult("A6 frozen tokens permanent", bad_frozen == 0, bad_frozen, 0),
           CheckResult("A6 runs terminate fully revealed", bad_final == 0, bad_final, 0)]
    return _finish(res, time.perf_counter() - t0, 60.0)


# A7 / A8 ---------------------------------------------------------------------

def toy_ablation(n_seeds=50, parallel=1, out_dir=None):
    """Residuals per kind on the toy-inpaint preset (paired seeds)."""
    cfg = preset("toy-inpaint").copy(run__images=False)
    with tempfile.TemporaryDirectory() as tmp:
        res, _ = ablate(cfg, out_dir or tmp, seeds=n_seeds, parallel=parallel)
    acc = {k: float(np.mean([r["token_accuracy"] for r in res.rows if r["sampler"] == k]))
           for k in cfg["sampler.kind"]}
    return {k: res.residuals(k) for k in cfg["sampler.kind"]}, acc


def check_efficacy(residuals):
    a, s = residuals["aps"], residuals["standard"]
    wr = win_rate(a, s)
    med_a, med_s = float(np.median(a)), float(np.median(s))
    return [CheckResult("A7 median residual aps < standard", med_a < med_s, med_a, med_s),
            CheckResult("A7 win rate aps vs standard", wr >= 0.9, wr, 0.9, f"seeds={len(a)}")]


def check_ordering(residuals, accuracy=None):
    a, b, c = residuals["aps"], residuals["aps1"], residuals["standard"]
    rate = ordering_rate(a, b, c)
    detail = (f"aps<=aps1 {np.mean(a <= b):.2f} aps1<=standard {np.mean(b <= c):.2f} "
              f"exact ties aps=aps1 {np.mean(a == b):.2f}")
    if accuracy:
        detail += " token_accuracy " + " ".join(f"{k}={v:.3f}" for k, v in accuracy.items())
    return [CheckResult("A8 residual ordering aps<=aps1<=standard", rate >= 0.7, rate, 0.7, detail)]


def check_posterior_agreement(n_instances=5, n_runs=100, seed=0):
    t0 = time.perf_counter()
    cb, dec, sch, prior = enumerable_instance(seed)
    K = cb.size
    worst = 0.0
    for inst in range(n_instances):
        rng = np.random.RandomState(seed + inst)
        x = prior.sample(rng)
        spec = MeasurementSpec(Identity(), sigma=0.05, loss="l2", lambda_p=1e-3)
        spec = spec.with_observation(measurements.observe(spec, dec(cb.embed(x)), rng))
        post = exact_posterior(prior, spec, dec, cb)
        outs = np.array([run_sampler(prior, cb, dec, spec, sch, OptConfig(), SamplerConfig("aps"),
                                     random_state=s).tokens for s in range(n_runs)])
        em = empirical_marginals(outs, K)
        worst = max(worst, max(tv_distance(em[l], post.marginals[l]) for l in range(dec.length)))
    res = CheckResult("A7 enumerable marginals TV", worst <= 0.2, worst, 0.2,
                      f"outputs={n_instances * n_runs} K={K} L={dec.length}")
    return _finish([res], time.perf_counter() - t0, 300.0)


def efficacy_audits(n_seeds=50, parallel=1):
    t0 = time.perf_counter()
    residuals, acc = toy_ablation(n_seeds, parallel)
    seconds = time.perf_counter() - t0
    a7 = _finish(check_efficacy(residuals), seconds, 300.0)
    a8 = _finish(check_ordering(residuals, acc), seconds, 300.0)
    return a7 + check_posterior_agreement() + a8


# A9 --------------------------------------------------------------------------

def check_determinism(seeds=3):
    t0 = time.perf_counter()
    cfg = preset("toy-inpaint")
    differing = []
    with tempfile.TemporaryDirectory() as tmp:
        dirs = [os.path.join(tmp, n) for n in ("a", "b")]
        for d in dirs:
            run_experiment(cfg, d, seeds=seeds)
        names = sorted(f for f in os.listdir(dirs[0]) if f != "timing.csv")
        if names != sorted(f for f in os.listdir(dirs[1]) if f != "timing.csv"):
            differing.append("file sets")
        for f in names:
            with open(os.path.join(dirs[0], f), "rb") as fa, open(os.path.join(dirs[1], f), "rb") as fb:
                if fa.read() != fb.read():
                    differing.append(f)
    res = CheckResult("A9 bit-identical outputs", not differing, len(differing), 0,
                      f"files={len(names)} " + " ".join(differing[:3]))
    return _finish([res], time.perf_counter() - t0, 30.0)


# A10 -------------------------------------------------------------------------

def check_codebook(max_bijection_dim=10, max_nn_dim=8, n_random=200, seed=0):
    t0 = time.perf_counter()
    bij_fail = 0
    for d in range(1, max_bijection_dim + 1):
        js = np.arange(2 ** d)
        E = index_to_embedding(js, d)
        bij_fail += int(np.any(embedding_to_index(E) != js))
        bij_fail += int(len({tuple(e) for e in E}) != 2 ** d)
    rng = np.random.RandomState(seed)
    nn_fail = 0
    for d in range(1, max_nn_dim + 1):
        cb = Codebook(d)
        pts = np.vstack([cb.entries, cb.entries + 0.9 * rng.uniform(-1, 1, cb.entries.shape),
                         rng.standard_normal((n_random, d))])
        via_sign = embedding_to_index(lfq_quantize(pts))
        nn_fail += int(np.sum(via_sign != cb.nearest_index(pts)))
    res = [CheckResult("A10 bijection round trip", bij_fail == 0, bij_fail, 0,
                       f"d<={max_bijection_dim}"),
           CheckResult("A10 sign quantization equals nearest entry", nn_fail == 0, nn_fail, 0,
                       f"d<={max_nn_dim}")]
    return _finish(res, time.perf_counter() - t0, 5.0)


ORACLE_CHECKS = (check_kl_identity, check_bounds, check_denoiser, check_codebook,
                 check_posterior_agreement)
GRAD_CHECKS = (check_gradients,)


def run_checks(funcs):
    out = []
    for fn in funcs:
        out.extend(fn())
    return out
