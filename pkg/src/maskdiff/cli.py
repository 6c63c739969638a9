"""Command-line interface: ``maskdiff {run,ablate,oracle-check,grad-check,fit-prior}``.

Exit status is 0 iff every acceptance-gated check of the subcommand passes.
"""

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import audits, config
from .exceptions import MaskDiffError
from .harness import ablate, build_prior, run_experiment
from .schedule import NoiseSchedule
from .world import fit_prior


def _common(p):
    p.add_argument("--config", metavar="PATH", help="config file overlaid on the preset")
    p.add_argument("--preset", metavar="NAME", choices=sorted(config.PRESETS),
                   help="named preset (default: built-in defaults)")
    p.add_argument("--out", metavar="DIR", help="output directory (default: run.out)")
    p.add_argument("--seeds", metavar="N", type=int, help="number of seeds (default: run.seeds)")
    p.add_argument("--parallel", metavar="K", type=int, help="worker processes (default: run.parallel)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="maskdiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [("run", "run the configured samplers and write runs.csv, summary.csv, *.pgm"),
                        ("ablate", "paired comparison of >= 2 sampler kinds"),
                        ("oracle-check", "brute-force oracle audits"),
                        ("grad-check", "gradient and adjoint audits"),
                        ("fit-prior", "fit a template prior by EM and write its config section")]:
        _common(sub.add_parser(name, help=help_))
    sub.choices["fit-prior"].add_argument("--samples", metavar="PATH",
                                          help="token sequences, one per line (default: draw from the configured prior)")
    return parser


def _load(args):
    cfg = config.load(args.config, args.preset)
    if args.seeds is not None:
        cfg.set("run.seeds", args.seeds)
    if args.parallel is not None:
        cfg.set("run.parallel", args.parallel)
    if args.out is not None:
        cfg.set("run.out", args.out)
    return cfg.validate()


def _write_checks(results, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "checks.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "passed", "gated", "value", "threshold", "seconds", "budget", "detail"])
        for r in results:
            w.writerow([r.name, r.ok, r.gated, repr(float(r.value)), repr(float(r.threshold)),
                        f"{r.seconds:.3f}", r.budget, r.detail])
    return path


def _report(results, out_dir):
    for r in results:
        print(r.line())
    print(f"checks written to {_write_checks(results, out_dir)}")
    return 0 if all(r.ok for r in results if r.gated) else 1


def _run_check(result_rows):
    failed = [r for r in result_rows if not r["ok"]]
    detail = "; ".join(f"seed {r['seed']} {r['sampler']}: {r['error']}" for r in failed[:3])
    return audits.CheckResult("sampler invariants hold on every run", not failed, len(failed), 0, detail)


def cmd_run(args, cfg):
    res = run_experiment(cfg)
    for row in res.summary:
        print(f"{row['sampler']:>8}: residual median {row['residual_median']:.4g} "
              f"(IQR {row['residual_iqr']:.3g}), PSNR median {row['psnr_median']:.4g}, "
              f"token accuracy {row['token_accuracy_mean']:.3f}, failed {row['n_failed']}/{row['n_runs']}")
    return _report([_run_check(res.rows)], res.out_dir)


def cmd_ablate(args, cfg):
    res, wins = ablate(cfg)
    for w in wins:
        print(f"{w['a']} beats {w['b']}: {w['win_rate']:.3f}")
    kinds = cfg["sampler.kind"]
    checks = [_run_check(res.rows)]
    by = {k: res.residuals(k) for k in kinds}
    if "aps" in by and "standard" in by:
        checks += audits.check_efficacy(by)
    if all(k in by for k in ("aps", "aps1", "standard")):
        checks += audits.check_ordering(by)
    return _report(checks, res.out_dir)


def cmd_oracle(args, cfg):
    return _report(audits.run_checks(audits.ORACLE_CHECKS), cfg["run.out"])


def cmd_grad(args, cfg):
    return _report(audits.run_checks(audits.GRAD_CHECKS), cfg["run.out"])


def _read_samples(path):
    with open(path) as fh:
        rows = [[int(t) for t in line.split()] for line in fh if line.strip()]
    return np.array(rows, dtype=np.int64)


def cmd_fit(args, cfg):
    truth = build_prior(cfg)
    rng = np.random.RandomState(cfg["sampler.seed"])
    n = cfg["run.fit_samples"]
    X = _read_samples(args.samples) if args.samples else truth.sample(rng, n)
    held = truth.sample(rng, 50)
    schedule = NoiseSchedule(cfg["schedule.kind"], min(cfg.steps, 4))
    prior, report = fit_prior(X, cfg["prior.n_templates"], iters=cfg["run.fit_iters"],
                              n_tokens=cfg["codebook.size"], random_state=cfg["prior.seed"],
                              held_out=held if cfg.length <= 12 else None, schedule=schedule)
    out = cfg["run.out"]
    os.makedirs(out, exist_ok=True)
    fitted = cfg.copy()
    fitted.set("prior.templates", "; ".join(" ".join(map(str, t)) for t in prior.templates))
    fitted.set("prior.weights", " ".join(repr(float(w)) for w in prior.weights))
    fitted.set("prior.rho", prior.rho)
    fitted.set("prior.n_templates", prior.n_templates)
    path = os.path.join(out, "prior.cfg")
    with open(path, "w") as fh:
        fh.write(fitted.render())
    print(f"fitted {prior.n_templates} templates (rho={prior.rho:.4g}) on {len(X)} samples -> {path}")
    ll = report["log_likelihood_history"]
    monotone = all(b >= a - 1e-9 for a, b in zip(ll, ll[1:]))
    checks = [audits.CheckResult("EM log-likelihood non-decreasing", monotone, ll[-1] if ll else 0.0,
                                 0.0, f"iterations={len(ll)}")]
    if "held_out_nelbo" in report:
        print(f"held-out NELBO of the fitted denoiser: {report['held_out_nelbo']:.4f}")
    return _report(checks, out)


COMMANDS = {"run": cmd_run, "ablate": cmd_ablate, "oracle-check": cmd_oracle,
            "grad-check": cmd_grad, "fit-prior": cmd_fit}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        return COMMANDS[args.command](args, cfg)
    except (MaskDiffError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
