"""Acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (visible in
``pytest -v`` output and when run as a script) and then asserts it.

    python tests/test_acceptance.py
"""

from __future__ import annotations

import subprocess
import sys
import time
from math import factorial

import numpy as np
import pytest

from contraction import hartman, numcore, picard
from contraction import exprparse as ep
from contraction.errors import LipschitzUnbounded

from fuzz import random_expression

TOL = 1e-8
INTEGRATOR_TOL = 1e-10


def report(n: int, ok: bool, detail: str, capsys=None) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    else:
        print(line)
    assert ok, line


# --------------------------------------------------------------------------
# shared runs


@pytest.fixture(scope="module")
def exp_run():
    ivp = picard.Ivp.from_source("y", 0.0, 1.0)
    R = picard.Rectangle(0.0, 1.0, 1.0, 1.0)
    t0 = time.perf_counter()
    run = picard.solve(ivp, R, tol=TOL, n_nodes=1025)
    return run, time.perf_counter() - t0


@pytest.fixture(scope="module")
def example_run():
    field = hartman.VectorFieldND.from_sources("-x, y + x^2")
    t0 = time.perf_counter()
    run = hartman.conjugacy(field, [0.1, 0.1], grid_count=65, tol=INTEGRATOR_TOL)
    return run, time.perf_counter() - t0


@pytest.fixture(scope="module")
def example_run_tight():
    field = hartman.VectorFieldND.from_sources("-x, y + x^2")
    return hartman.conjugacy(field, [0.1, 0.1], grid_count=65, tol=INTEGRATOR_TOL,
                             gap_tol=1e-10)


SMOOTH_CORPUS = [
    ("y", 0.0, 1.0), ("-y", 0.0, 1.0), ("x", 0.0, 0.0), ("0", 0.0, 5.0),
    ("x*y", 0.0, 1.0), ("sin(y)", 0.0, 0.5), ("cos(x) + y", 0.0, 0.0),
    ("y^2", 0.0, 0.5), ("x^2 + y^2", 0.0, 0.0), ("exp(-y)", 0.0, 0.0),
    ("1 + y^2", 0.0, 0.0), ("sin(x*y)", 0.0, 1.0), ("y - x", 1.0, 2.0),
    ("2*y + x^3", 0.0, -1.0), ("cos(y) * exp(x)", 0.0, 0.0),
    ("sqrt(1 + y^2)", 0.0, 0.0), ("log(2 + x + y)", 0.0, 0.5),
    ("y / (1 + x^2)", -1.0, 1.0), ("-x*y^3", 0.0, 0.8), ("pow(y, 3) - y", 0.0, 0.3),
]


# --------------------------------------------------------------------------


def test_criterion_01_picard_convergence_oracle(exp_run, capsys):
    run, elapsed = exp_run
    x = run.final.nodes
    err = float(np.max(np.abs(run.final.values - np.exp(x))))
    taylor = 0.0
    for k, phi in enumerate(run.iterates):
        partial = sum(x ** j / factorial(j) for j in range(k + 1))
        taylor = max(taylor, float(np.max(np.abs(phi.values - partial))))
    ok = (run.converged and run.iterations <= 30 and err <= 1e-6 and elapsed < 1.0
          and taylor <= 1e-9)
    report(1, ok, f"iterations={run.iterations} sup|phi-e^x|={err:.3g} "
                  f"taylor_dev={taylor:.3g} runtime={elapsed:.3f}s", capsys)


def test_criterion_02_apriori_gap_domination(exp_run, capsys):
    run, _ = exp_run
    violations = sum(1 for n, g in enumerate(run.gaps)
                     if g > picard.apriori_gap_bound(run.M, run.L, run.h, n + 1) + 1e-9)
    report(2, violations == 0, f"gaps={len(run.gaps)} violations={violations}", capsys)


def test_criterion_03_cauchy_tail(exp_run, capsys):
    run, _ = exp_run
    its = run.iterates
    violations = 0
    pairs = 0
    for n in range(len(its)):
        bound = picard.cauchy_tail_bound(run.M, run.L, run.h, n)
        for m in range(n + 1, len(its)):
            pairs += 1
            if its[m].sup_distance(its[n]) > bound + 1e-9:
                violations += 1
    report(3, violations == 0, f"pairs={pairs} violations={violations}", capsys)


def test_criterion_04_rectangle_confinement(capsys):
    violations = 0
    converged = 0
    for src, x0, y0 in SMOOTH_CORPUS:
        ivp = picard.Ivp.from_source(src, x0, y0)
        R = picard.Rectangle(x0, y0, 1.0, 1.0)
        run = picard.solve(ivp, R, tol=TOL)
        if not run.converged:
            continue
        converged += 1
        Mh = run.M * run.h
        if Mh > R.b * (1 + 1e-12):
            violations += 1
        violations += sum(1 for c in run.confinement() if c > Mh + 1e-12)
    ok = violations == 0 and converged == len(SMOOTH_CORPUS)
    report(4, ok, f"problems={len(SMOOTH_CORPUS)} converged={converged} "
                  f"violations={violations}", capsys)


def test_criterion_05_uniqueness(capsys):
    ivp = picard.Ivp.from_source("y", 0.0, 1.0)
    R = picard.Rectangle(0.0, 1.0, 1.0, 1.0)
    run1 = picard.solve(ivp, R, tol=TOL)
    run2 = picard.solve(ivp, R, tol=TOL, start=1.3)
    distance = picard.uniqueness_residual(run1, run2)
    A = numcore.SampledFunction1D.from_function(lambda x: 3.0 + np.sin(5 * x) ** 2, 0.0, 1.0, 257)
    envelope = picard.gronwall_envelope(0.0, A)
    zero = bool(np.all(envelope.values == 0.0))
    ok = distance <= 2 * TOL and zero
    report(5, ok, f"sup|phi1-phi2|={distance:.3g} (<= {2 * TOL:g}) gronwall(C=0)==0: {zero}",
           capsys)


def test_criterion_06_hypothesis_failure(capsys, tmp_path):
    ivp = picard.Ivp.from_source("3*y^(2/3)", 0.0, 0.0)
    R = picard.Rectangle(0.0, 0.0, 1.0, 1.0)
    t0 = time.perf_counter()
    raised = False
    try:
        picard.solve(ivp, R)
    except LipschitzUnbounded:
        raised = True
    elapsed = time.perf_counter() - t0
    code = subprocess.run([sys.executable, "-m", "contraction", "picard", "solve",
                           "--f", "3*y^(2/3)", "--x0", "0", "--y0", "0"],
                          capture_output=True, text=True, cwd=tmp_path).returncode
    ok = raised and elapsed < 1.0 and code == 2
    report(6, ok, f"LipschitzUnbounded={raised} exit={code} runtime={elapsed:.3f}s", capsys)


def test_criterion_07_hyperbolicity_gate(capsys):
    center = hartman.check_hyperbolic(hartman.jacobian_at(
        hartman.VectorFieldND.from_sources("y, -x"), [0.0, 0.0]))
    eig = sorted(center.eigenvalues, key=lambda z: z.imag)
    eig_ok = (abs(eig[0] - (-1j)) <= 1e-9 and abs(eig[1] - 1j) <= 1e-9)
    rejected = not center.hyperbolic
    try:
        hartman.conjugacy(hartman.VectorFieldND.from_sources("y, -x"))
        gate = False
    except hartman.NotHyperbolic:
        gate = True
    A = np.diag([-1.0, 2.0])
    split = hartman.SpectralSplit.from_matrix(A)
    block = split.basis_inv @ A @ split.basis
    split_ok = (hartman.check_hyperbolic(A).hyperbolic
                and np.allclose(block, np.diag([-1.0, 2.0]), atol=1e-9)
                and split.dim_stable == 1 and split.dim_unstable == 1)
    ok = eig_ok and rejected and gate and split_ok
    report(7, ok, f"center eigenvalues={eig} rejected={rejected and gate} "
                  f"diag(-1,2) split ok={split_ok}", capsys)


def test_criterion_08_linear_degeneracy(capsys):
    field = hartman.VectorFieldND.linear(np.diag([-1.0, 1.0]))
    t0 = time.perf_counter()
    run = hartman.conjugacy(field, grid_count=65, tol=INTEGRATOR_TOL)
    elapsed = time.perf_counter() - t0
    nodes = run.grid.nodes()
    id_err = float(np.max(np.abs(run.H.values - nodes)))
    gaps_zero = all(g == 0.0 for g in run.psi_gaps + run.phi_gaps)
    ok = (id_err <= 10 * INTEGRATOR_TOL and gaps_zero and run.residual <= 1e-8
          and elapsed < 10.0)
    report(8, ok, f"|H-id|={id_err:.3g} gaps_zero={gaps_zero} residual={run.residual:.3g} "
                  f"runtime={elapsed:.2f}s", capsys)


def _analytic_H(W):
    W = np.asarray(W, dtype=float)
    return np.stack([W[..., 0], W[..., 1] + W[..., 0] ** 2 / 3.0], axis=-1)


def test_criterion_09_nonlinear_conjugacy(example_run, capsys):
    run, elapsed = example_run
    system = run.problem.system
    k = run.constants
    basis_is_identity = np.array_equal(run.split.basis, np.eye(2))
    analytic = hartman.conjugacy_residual(_analytic_H, system, None, k, k.s0 / 4)
    h0 = run.H(np.zeros(2))
    ok = (basis_is_identity and analytic <= 10 * INTEGRATOR_TOL and run.residual <= 1e-3
          and np.all(h0 == 0.0) and elapsed < 60.0)
    report(9, ok, f"analytic H* residual={analytic:.3g} constructed residual={run.residual:.3g} "
                  f"H(0)={h0.tolist()} runtime={elapsed:.2f}s", capsys)


def test_criterion_10_holder_envelope(example_run_tight, capsys):
    run = example_run_tight
    k = run.constants
    holder = hartman.verify_holder_bound(run)
    floor = 1e3 * INTEGRATOR_TOL
    ratios = hartman.gap_ratios(run.psi_gaps, floor) + hartman.gap_ratios(run.phi_gaps, floor)
    ratio_ok = all(q <= k.r + 0.05 for _, q in ratios)
    ok = (k.r < 1 and all(holder["psi"]) and all(holder["phi"]) and ratio_ok
          and len(ratios) >= 1)
    worst = max((q for _, q in ratios), default=float("nan"))
    report(10, ok, f"r={k.r:.6g} delta={k.delta:g} envelope psi {sum(holder['psi'])}/"
                   f"{len(holder['psi'])} phi {sum(holder['phi'])}/{len(holder['phi'])} "
                   f"ratios checked={len(ratios)} max ratio={worst:.3g}", capsys)


def test_criterion_11_kernel_checks(capsys):
    # Simpson exactness on cubics
    x = numcore.uniform_nodes(0.0, 1.0, 1025)
    rng = np.random.default_rng(11)
    simpson = 0.0
    for _ in range(20):
        c = rng.uniform(-2, 2, size=4)
        f = numcore.SampledFunction1D(0.0, 1.0, c[0] + c[1] * x + c[2] * x ** 2 + c[3] * x ** 3)
        exact = c[0] * x + c[1] * x ** 2 / 2 + c[2] * x ** 3 / 3 + c[3] * x ** 4 / 4
        simpson = max(simpson, float(np.max(np.abs(numcore.cumulative_integral(f).values - exact))))
    # exponential inverse identity
    expm = 0.0
    for _ in range(50):
        A = rng.normal(scale=1.5, size=(3, 3))
        P = numcore.matrix_exponential(A) @ numcore.matrix_exponential(-A)
        expm = max(expm, float(np.max(np.abs(P - np.eye(3)))))
    # symbolic derivative against Richardson central differences
    worst = 0.0
    for seed in range(100):
        expr, point = random_expression(np.random.default_rng(seed))
        names = ("x", "y")
        for var_index, var in enumerate(names):
            d = ep.compile_expr(ep.differentiate(expr, var), names)(*point)
            fd = _richardson(ep.compile_expr(expr, names), point, var_index)
            worst = max(worst, abs(float(d) - fd) / max(1.0, abs(float(d))))
    # flow time additivity
    field = hartman.VectorFieldND.from_sources("x2, -sin(x1) - 0.1*x2")
    f = field.rhs()
    p = np.array([0.7, -0.2])
    two_step = numcore.integrate_flow(f, numcore.integrate_flow(f, p, 0.6, INTEGRATOR_TOL),
                                      0.9, INTEGRATOR_TOL)
    one_step = numcore.integrate_flow(f, p, 1.5, INTEGRATOR_TOL)
    additivity = float(np.max(np.abs(two_step - one_step)))
    ok = (simpson <= 1e-14 and expm <= 1e-10 and worst <= 1e-6
          and additivity <= 10 * INTEGRATOR_TOL)
    report(11, ok, f"simpson={simpson:.2g} expm_inverse={expm:.2g} "
                   f"derivative_rel={worst:.2g} flow_additivity={additivity:.2g}", capsys)


def _richardson(fn, point, index, h=1e-3):
    def central(step):
        lo, hi = list(point), list(point)
        lo[index] -= step
        hi[index] += step
        return (float(fn(*hi)) - float(fn(*lo))) / (2 * step)

    d1, d2, d3 = central(h), central(h / 2), central(h / 4)
    r1, r2 = (4 * d2 - d1) / 3, (4 * d3 - d2) / 3
    return (16 * r2 - r1) / 15


def test_criterion_12_determinism(tmp_path, capsys):
    runs = [
        ["picard", "solve", "--f", "sin(x*y) + y", "--y0", "0.5", "--emit", "csv"],
        ["picard", "solve", "--f", "y", "--y0", "1", "--layout", "per-iterate", "--emit", "csv"],
        ["hg", "conjugacy", "--field", "-x, y + x^2", "--grid", "33", "--emit", "csv"],
    ]
    identical = True
    files = 0
    for k, cmd in enumerate(runs):
        outs = []
        for rep in range(2):
            out = tmp_path / f"run{k}_{rep}"
            proc = subprocess.run([sys.executable, "-m", "contraction", *cmd, "--out", str(out)],
                                  capture_output=True, text=True)
            assert proc.returncode == 0, proc.stderr
            outs.append({p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))})
        files += len(outs[0])
        identical &= bool(outs[0]) and outs[0] == outs[1]
    report(12, identical, f"commands={len(runs)} csv files compared={files} "
                          f"byte-identical={identical}", capsys)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
