import csv

import pytest

from maskdiff.cli import build_parser, main


def _fast(tmp_path, body=""):
    p = tmp_path / "fast.cfg"
    p.write_text("[sampler]\nsteps = 4\n[opt]\ninner_steps = 10\n" + body)
    return str(p)


def test_parser_has_subcommands():
    parser = build_parser()
    for cmd in ("run", "ablate", "oracle-check", "grad-check", "fit-prior"):
        args = parser.parse_args([cmd, "--seeds", "2", "--parallel", "1", "--out", "x"])
        assert args.command == cmd and args.seeds == 2
    with pytest.raises(SystemExit):
        parser.parse_args(["run", "--preset", "unknown"])


def test_run(tmp_path, capsys):
    out = tmp_path / "o"
    code = main(["run", "--preset", "toy-inpaint", "--config", _fast(tmp_path), "--seeds", "2",
                 "--out", str(out)])
    assert code == 0
    assert (out / "runs.csv").exists() and (out / "summary.csv").exists()
    assert (out / "seed0001_aps.pgm").exists()
    with open(out / "checks.csv") as fh:
        assert all(r["passed"] == "True" for r in csv.DictReader(fh))
    assert "PASS" in capsys.readouterr().out


def test_ablate_reports_win_rates(tmp_path, capsys):
    code = main(["ablate", "--preset", "toy-inpaint", "--config", _fast(tmp_path),
                 "--seeds", "2", "--out", str(tmp_path / "o")])
    text = capsys.readouterr().out
    assert "aps beats standard" in text and "A8" in text
    assert code in (0, 1)
    assert (tmp_path / "o" / "winrates.csv").exists()


def test_config_error_exit_code(tmp_path, capsys):
    code = main(["run", "--config", _fast(tmp_path, "foo = 1\n"), "--out", str(tmp_path)])
    assert code == 2
    assert "line 5" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["run", "--config", str(tmp_path / "none.cfg")]) == 2


def test_grad_check(tmp_path):
    assert main(["grad-check", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "checks.csv").exists()


def test_fit_prior(tmp_path, capsys):
    samples = tmp_path / "s.txt"
    samples.write_text("\n".join(["0 1 2 3"] * 20 + ["3 2 1 0"] * 20) + "\n")
    cfg = tmp_path / "p.cfg"
    cfg.write_text("[decoder]\ngrid_h = 1\ngrid_w = 4\n[prior]\nn_templates = 2\n")
    out = tmp_path / "o"
    assert main(["fit-prior", "--config", str(cfg), "--samples", str(samples), "--out", str(out)]) == 0
    fitted = (out / "prior.cfg").read_text()
    assert "0 1 2 3" in fitted and "3 2 1 0" in fitted
    assert main(["run", "--config", str(out / "prior.cfg"), "--seeds", "1",
                 "--out", str(tmp_path / "r")]) == 0
