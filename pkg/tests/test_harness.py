import csv
import math
import os

import numpy as np
import pytest

from maskdiff.config import preset
from maskdiff.exceptions import InvalidInputError
from maskdiff.harness import (ablate, build_world, ordering_rate, psnr, read_pgm, render_pgm,
                              run_experiment, synthesize_task, win_rate)


def small():
    return preset("toy-inpaint").copy(sampler__steps=4, opt__inner_steps=10,
                                      sampler__kind="aps, standard", run__seeds=3)


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_pgm(tmp_path):
    p = tmp_path / "a.pgm"
    render_pgm(np.full((3, 5), -1.0), p)
    assert p.read_bytes().startswith(b"P5\n5 3\n255\n")
    assert np.all(read_pgm(p) == 0)
    render_pgm(np.array([[1.0, 0.0, 5.0, -7.0]]), p)
    np.testing.assert_array_equal(read_pgm(p), [[255, 128, 255, 0]])
    with pytest.raises(InvalidInputError):
        render_pgm(np.array([[np.nan]]), p)


def test_psnr():
    a = np.zeros((2, 2))
    assert psnr(a, a) == math.inf
    assert psnr(a + 0.2, a) == pytest.approx(10 * math.log10(4 / 0.04))


def test_win_and_ordering_rates():
    a = np.array([1.0, 2.0, 3.0, 4.0])
    assert win_rate(a, a) == 0.5
    assert win_rate(a, a + 1) == 1.0
    assert ordering_rate(a, a + 1, a + 0.5) == 0.0
    assert ordering_rate(a, a, a) == 1.0
    with pytest.raises(InvalidInputError):
        win_rate(a, a[:2])


def test_synthesize_task_is_seeded():
    world = build_world(small())
    x1, c1, s1 = synthesize_task(world, 0, 5, True)
    x2, c2, s2 = synthesize_task(world, 0, 5, True)
    np.testing.assert_array_equal(s1.y, s2.y)
    _, _, s3 = synthesize_task(world, 0, 6, True)
    assert s3.operator.seed != s1.operator.seed


def test_run_writes_outputs(tmp_path):
    res = run_experiment(small(), str(tmp_path))
    assert res.ok
    runs = _rows(tmp_path / "runs.csv")
    assert len(runs) == 3 * 2
    assert {r["sampler"] for r in runs} == {"aps", "standard"}
    summary = _rows(tmp_path / "summary.csv")
    assert [r["sampler"] for r in summary] == ["aps", "standard"]
    assert all(r["n_failed"] == "0" for r in summary)
    for seed in range(3):
        for name in ("truth", "measurement", "aps", "standard"):
            assert os.path.exists(tmp_path / f"seed{seed:04d}_{name}.pgm")
    for r in runs:
        float(r["residual"])
        assert not r["residual"].startswith("np.")


def test_parallel_matches_serial(tmp_path):
    a = run_experiment(small(), str(tmp_path / "a"), parallel=1)
    b = run_experiment(small(), str(tmp_path / "b"), parallel=2)
    for name in ("runs.csv", "summary.csv", "seed0002_aps.pgm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    np.testing.assert_array_equal(a.residuals("aps"), b.residuals("aps"))


def test_ablate_outputs(tmp_path):
    res, wins = ablate(small(), str(tmp_path))
    assert {(w["a"], w["b"]) for w in wins} == {("aps", "standard"), ("standard", "aps")}
    assert sum(w["win_rate"] for w in wins) == pytest.approx(1.0)
    assert len(_rows(tmp_path / "paired.csv")) == 3
    traces = _rows(tmp_path / "traces.csv")
    assert len(traces) == 3 * 2 * 4 and traces[-1]["n_masked"] == "0"
    with pytest.raises(InvalidInputError):
        ablate(small().copy(sampler__kind="aps"), str(tmp_path))


def test_infinite_psnr_sentinel(tmp_path):
    cfg = small().copy(measure__op="identity", measure__sigma=0.0, prior__rho=0.0,
                       sampler__kind="aps, prior", run__seeds=1, run__images=False)
    run_experiment(cfg, str(tmp_path))
    rows = _rows(tmp_path / "runs.csv")
    assert rows[0]["psnr"] == "inf"
