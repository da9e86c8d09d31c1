import dataclasses
import re
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from contraction import cli, hartman, picard, svg

SUMMARY = re.compile(r"^converged n=(\d+) h=(\S+) residual=(\S+)$")


def run_picard(capsys, *argv):
    code = cli.picard_main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def run_hg(capsys, *argv):
    code = cli.hg_main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


# ---------------------------------------------------------------- exit codes


def test_picard_converges(capsys):
    code, out, _ = run_picard(capsys, "solve", "--f", "y", "--y0", "1")
    assert code == 0
    m = SUMMARY.match(out.splitlines()[0])
    assert m
    assert float(m.group(2)) == pytest.approx(1 / 2.1, rel=1e-5)
    assert float(m.group(3)) <= 1e-7


def test_centre_field_is_a_hypothesis_failure(capsys):
    code, _, err = run_hg(capsys, "conjugacy", "--field", "y, -x")
    assert code == 2
    assert "hyperbolic" in err


def test_linearize_reports_centre(capsys):
    code, out, err = run_hg(capsys, "linearize", "--field", "x2, -x1")
    assert code == 2
    assert "NOT hyperbolic" in out


def test_missing_f_prints_usage(capsys):
    code, _, err = run_picard(capsys, "solve", "--y0", "1")
    assert code == 1
    assert "usage:" in err and "--f" in err


def test_unknown_flag_is_usage_error(capsys):
    code, _, err = run_picard(capsys, "solve", "--f", "y", "--bogus", "1")
    assert code == 1 and "usage:" in err


def test_bad_expression_is_usage_error(capsys):
    code, _, err = run_picard(capsys, "solve", "--f", "2y")
    assert code == 1 and "byte" in err


def test_non_positive_tolerance_is_usage_error(capsys):
    code, _, _ = run_picard(capsys, "solve", "--f", "y", "--tol", "0")
    assert code == 1


def test_cusp_is_a_hypothesis_failure(capsys):
    code, _, err = run_picard(capsys, "solve", "--f", "y^(2/3)")
    assert code == 2 and "LipschitzUnbounded" in err


def test_budget_exhaustion(capsys):
    code, out, _ = run_picard(capsys, "solve", "--f", "y", "--y0", "1", "--max-iter", "2")
    assert code == 3
    assert out.startswith("not-converged n=2 ")


def test_conjugacy_budget(capsys):
    code, out, _ = run_hg(capsys, "conjugacy", "--field", "-x1, x2 + x1^2", "--grid", "17",
                          "--max-iter", "1", "--gap-tol", "1e-12")
    assert code == 3 and out.startswith("not-converged")


def test_even_grid_is_usage_error(capsys):
    code, _, _ = run_hg(capsys, "conjugacy", "--field", "-x1, x2", "--grid", "16")
    assert code == 1


def test_guess_dimension_is_checked(capsys):
    code, _, err = run_hg(capsys, "linearize", "--field", "-x1, x2", "--guess", "1,2,3")
    assert code == 1 and "--guess" in err


def test_help_exits_cleanly(capsys):
    assert cli.picard_main(["--help"]) == 0
    assert "solve" in capsys.readouterr().out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "contraction", "picard", "solve", "--f", "x"],
                          capture_output=True, text=True, timeout=60)
    assert proc.returncode == 0
    assert SUMMARY.match(proc.stdout.splitlines()[0])
    proc = subprocess.run([sys.executable, "-m", "contraction"], capture_output=True, text=True,
                          timeout=60)
    assert proc.returncode == 1


# ---------------------------------------------------------------- outputs


def test_bounds_command(capsys, tmp_path):
    code, out, _ = run_picard(capsys, "bounds", "--f", "y", "--y0", "1", "--terms", "3",
                              "--emit", "csv", "--out", str(tmp_path))
    assert code == 0
    assert out.startswith("M=2.1 L=1.05 h=0.47619")
    lines = (tmp_path / "bounds.csv").read_text().splitlines()
    assert lines[0] == "n,apriori,cauchy_tail" and len(lines) == 4


def test_linearize_output(capsys, tmp_path):
    code, out, _ = run_hg(capsys, "linearize", "--field", "-x, y + x^2", "--guess", "0.1,0.1",
                          "--emit", "csv", "--out", str(tmp_path))
    assert code == 0
    assert "fixed_point = [0, 0]" in out
    assert "jacobian = [[-1, 0], [0, 1]]" in out
    assert "verdict = hyperbolic" in out
    rows = (tmp_path / "linearize.csv").read_text().splitlines()
    assert rows[0] == "quantity,i,j,value"
    assert "jacobian,0,0,-1" in rows


def test_conjugacy_output(capsys, tmp_path):
    code, out, _ = run_hg(capsys, "conjugacy", "--field", "-x1, x2 + x1^2", "--grid", "17",
                          "--emit", "both", "--out", str(tmp_path))
    assert code == 0
    assert re.search(r"^a=\S+ b=0\.367879 c=0\.367879 s0=\S+ delta=\S+ r=\S+ M_H=\S+$", out,
                     re.M)
    header = (tmp_path / "H.csv").read_text().splitlines()[0]
    assert header == "y1,z1,H_y1,H_z1"
    assert len((tmp_path / "H.csv").read_text().splitlines()) == 17 * 17 + 1
    assert {p.name for p in tmp_path.iterdir()} == {"H.csv", "gaps.csv", "constants.csv",
                                                    "hg.svg"}


def test_csv_digits_round_trip(capsys, tmp_path):
    run_picard(capsys, "solve", "--f", "y", "--y0", "1", "--emit", "csv", "--out", str(tmp_path))
    data = np.loadtxt(tmp_path / "iterates.csv", delimiter=",", skiprows=1)
    run = picard.solve(picard.Ivp.from_source("y", 0, 1), picard.Rectangle(0, 1, 1, 1))
    assert np.array_equal(data[:, -1], run.final.values)
    assert np.array_equal(data[:, 0], run.final.nodes)


def test_per_iterate_layout(capsys, tmp_path):
    run_picard(capsys, "solve", "--f", "x", "--layout", "per-iterate", "--emit", "csv",
               "--out", str(tmp_path))
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["gaps.csv", "iterate_000.csv", "iterate_001.csv", "iterate_002.csv"]


def test_backward_flag(capsys, tmp_path):
    code, out, _ = run_picard(capsys, "solve", "--f", "y", "--y0", "1", "--backward",
                              "--emit", "csv", "--out", str(tmp_path))
    assert code == 0
    assert "interval=[-0.47619, 0]" in out


def test_emit_none_writes_nothing(capsys, tmp_path):
    run_picard(capsys, "solve", "--f", "y", "--y0", "1", "--out", str(tmp_path))
    assert list(tmp_path.iterdir()) == []


def test_no_temporary_files_remain(capsys, tmp_path):
    run_picard(capsys, "solve", "--f", "y", "--y0", "1", "--emit", "both", "--out",
               str(tmp_path))
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".")]


def test_failed_write_leaves_no_partial_file(tmp_path, monkeypatch):
    target = tmp_path / "out.csv"

    def broken_replace(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(cli.os, "replace", broken_replace)
    with pytest.raises(OSError):
        cli.write_atomic(target, "x,value\n")
    assert list(tmp_path.iterdir()) == []


def test_outputs_are_deterministic(capsys, tmp_path):
    dirs = [tmp_path / "one", tmp_path / "two"]
    for d in dirs:
        run_hg(capsys, "conjugacy", "--field", "-x1, x2 + x1^2", "--grid", "17", "--emit",
               "both", "--out", str(d))
    for p in sorted(dirs[0].iterdir()):
        assert p.read_bytes() == (dirs[1] / p.name).read_bytes()


# ---------------------------------------------------------------- config files


def test_config_supplies_values(capsys, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[run]\ncommand = solve\nf = y\ny0 = 1\nmax-iter = 2\n")
    code, out, _ = run_picard(capsys, "solve", "--config", str(cfg))
    assert code == 3
    # flags override the file
    code, out, _ = run_picard(capsys, "solve", "--config", str(cfg), "--max-iter", "50")
    assert code == 0 and SUMMARY.match(out.splitlines()[0])


def test_config_underscore_keys_and_flags(capsys, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[run]\nfield = -x1, x2\nhyperbolic_tol = 1e-6\ngrid = 9\n")
    code, out, _ = run_hg(capsys, "conjugacy", "--config", str(cfg))
    assert code == 0


def test_config_unknown_key(capsys, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[run]\nf = y\nspeed = 11\n")
    code, _, err = run_picard(capsys, "solve", "--config", str(cfg))
    assert code == 1 and "speed" in err


def test_config_for_other_command(capsys, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[run]\ncommand = bounds\nf = y\n")
    code, _, _ = run_picard(capsys, "solve", "--config", str(cfg))
    assert code == 1


@pytest.mark.parametrize("text", ["f = y\n", "[run\nf = y\n"])
def test_malformed_config(capsys, tmp_path, text):
    cfg = tmp_path / "run.ini"
    cfg.write_text(text)
    code, _, _ = run_picard(capsys, "solve", "--config", str(cfg))
    assert code == 1


def test_missing_config_file(capsys, tmp_path):
    code, _, _ = run_picard(capsys, "solve", "--config", str(tmp_path / "absent.ini"))
    assert code == 1


def test_config_booleans(capsys, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[run]\nf = y\ny0 = 1\nbackward = yes\n")
    code, out, _ = run_picard(capsys, "solve", "--config", str(cfg))
    assert code == 0 and "interval=[-0.47619, 0]" in out


# ---------------------------------------------------------------- SVG


@pytest.fixture(scope="module")
def exp_run():
    return picard.solve(picard.Ivp.from_source("y", 0, 1), picard.Rectangle(0, 1, 1, 1))


@pytest.fixture(scope="module")
def hg_run():
    return hartman.conjugacy(hartman.VectorFieldND.from_sources("-x1, x2 + x1^2"), grid_count=17)


def check_canvas(text):
    root = ET.fromstring(text)
    assert root.tag.endswith("svg")
    assert root.get("width") == "800" and root.get("height") == "600"
    body = ET.tostring(root, encoding="unicode")
    assert "<text" in body or ":text" in body
    return root


def test_picard_svg(exp_run):
    text = svg.picard_svg(exp_run)
    check_canvas(text)
    assert "phi_0" in text and f"phi_{exp_run.iterations}" in text
    assert text == svg.picard_svg(exp_run)


def test_conjugacy_svg(hg_run):
    text = svg.conjugacy_svg(hg_run)
    check_canvas(text)
    assert text.count("<polyline") >= 2 * 8
    assert text == svg.conjugacy_svg(hg_run)


def test_empty_iterates_are_refused(exp_run, tmp_path):
    empty = dataclasses.replace(exp_run, iterates=())
    with pytest.raises(ValueError):
        svg.picard_svg(empty)
