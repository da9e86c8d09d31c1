"""Command-line front end: ``picard solve|bounds`` and ``hg linearize|conjugacy``.

Exit codes: 0 success, 1 usage or parse error, 2 a hypothesis of the theorem
fails (non-Lipschitz field, non-hyperbolic fixed point, ...), 3 an iteration
ran out of budget.
"""

from __future__ import annotations

import argparse
import configparser
import math
import os
import sys
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

from . import exprparse as ep
from . import hartman, picard
from .errors import ContractionError, HypothesisError, IterateEscapedRectangle, NoConvergence
from .numcore import IntegrationError, format_real
from .svg import conjugacy_svg, picard_svg

EXIT_OK, EXIT_USAGE, EXIT_HYPOTHESIS, EXIT_BUDGET = 0, 1, 2, 3


class UsageError(Exception):
    """Bad command line or config file."""

    def __init__(self, message: str, usage: str | None = None):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}", self.format_usage())


def _h(value: float) -> str:
    """Six significant digits for human-readable summaries."""
    return f"{value:.6g}"


def positive_float(text: str) -> float:
    value = float(text)
    if not (value > 0 and math.isfinite(value)):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return value


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def finite_float(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise argparse.ArgumentTypeError(f"expected a finite number, got {text!r}")
    return value


def point(text: str) -> tuple[float, ...]:
    try:
        return tuple(finite_float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def write_atomic(path: Path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cell(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(v)
    return format_real(v)


def _csv(header: Sequence[str], rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_cell(v) for v in row))
    return "\n".join(lines) + "\n"


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with a [run] section; flags override it")
    p.add_argument("--emit", choices=("none", "csv", "svg", "both"), default="none",
                   help="artifacts to write into --out")
    p.add_argument("--out", default=".", help="output directory (default: current)")


def build_picard_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="picard", description="Picard iterates for y' = f(x, y).")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, helptext in (("solve", "iterate to convergence"),
                           ("bounds", "print M, L, h and a-priori bounds only")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--f", dest="f", help="right-hand side f(x, y)")
        p.add_argument("--x0", type=finite_float, default=0.0)
        p.add_argument("--y0", type=finite_float, default=0.0)
        p.add_argument("--a", type=positive_float, default=1.0, help="rectangle half-width in x")
        p.add_argument("--b", type=positive_float, default=1.0, help="rectangle half-width in y")
        p.add_argument("--samples", type=positive_int, default=33, help="grid per axis for M, L")
        p.add_argument("--lipschitz-cap", type=positive_float, default=1e6)
        p.add_argument("--backward", action="store_true",
                       help="solve on [x0 - h, x0] through the mirrored problem")
        if name == "solve":
            p.add_argument("--tol", type=positive_float, default=1e-8)
            p.add_argument("--max-iter", type=positive_int, default=50)
            p.add_argument("--nodes", type=positive_int, default=1025)
            p.add_argument("--start", type=finite_float, default=None,
                           help="constant starting iterate (default y0)")
            p.add_argument("--layout", choices=("wide", "per-iterate"), default="wide",
                           help="CSV layout for iterates")
        else:
            p.add_argument("--terms", type=positive_int, default=20,
                           help="number of a-priori bounds to list")
        _common(p)
    return parser


def build_hg_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hg", description="Time-1 conjugacy near a hyperbolic fixed point.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, helptext in (("linearize", "fixed point, Jacobian, spectrum and split"),
                           ("conjugacy", "build H with H o T = L o H")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--field", help="comma-separated components in x1..xn (or x, y, z)")
        p.add_argument("--guess", type=point, default=None, help="Newton starting point")
        p.add_argument("--hyperbolic-tol", type=positive_float, default=1e-9)
        if name == "linearize":
            p.add_argument("--tol", type=positive_float, default=1e-12, help="Newton tolerance")
        else:
            p.add_argument("--tol", type=positive_float, default=1e-10,
                           help="integrator tolerance")
            p.add_argument("--grid", type=positive_int, default=65, help="nodes per axis (odd)")
            p.add_argument("--max-iter", type=positive_int, default=200)
            p.add_argument("--gap-tol", type=positive_float, default=1e-4)
        _common(p)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    """Parse ``argv``; a ``--config`` file supplies defaults that flags override."""
    args = parser.parse_args(argv)
    args.usage_text = _subparser(parser, args.command).format_usage()
    if not args.config:
        return args
    cfg = configparser.ConfigParser(interpolation=None)
    try:
        with open(args.config, encoding="utf-8") as fh:
            cfg.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if not cfg.has_section("run"):
        raise UsageError(f"config {args.config} has no [run] section")
    sub = _subparser(parser, args.command)
    known = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in cfg.items("run"):
        dest = key.replace("-", "_")
        if dest == "command":
            if raw != args.command:
                raise UsageError(f"config is for command {raw!r}, not {args.command!r}")
            continue
        if dest not in known:
            raise UsageError(f"unknown config key {key!r}")
        action = known[dest]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[dest] = cfg.getboolean("run", key)
        else:
            defaults[dest] = raw
    sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    args.usage_text = sub.format_usage()
    return args


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise UsageError(f"unknown command {command!r}")


def _require(args, name: str, flag: str) -> str:
    value = getattr(args, name)
    if value is None or value == "":
        raise UsageError(f"missing required option {flag}", getattr(args, "usage_text", None))
    return value


def _emit(args, artifacts: dict[str, str]) -> None:
    """Write the requested artifacts; ``artifacts`` maps file names to content."""
    wanted = {"none": (), "csv": (".csv",), "svg": (".svg",), "both": (".csv", ".svg")}[args.emit]
    out = Path(args.out)
    for name, text in artifacts.items():
        if Path(name).suffix in wanted:
            write_atomic(out / name, text)


# --------------------------------------------------------------------------
# picard


def _picard_problem(args):
    f_src = _require(args, "f", "--f")
    ivp = picard.Ivp.from_source(f_src, args.x0, args.y0)
    R = picard.Rectangle(args.x0, args.y0, args.a, args.b)
    return ivp, R


def picard_solve(args) -> int:
    ivp, R = _picard_problem(args)
    kwargs = dict(tol=args.tol, max_iter=args.max_iter, n_nodes=args.nodes,
                  samples_per_axis=args.samples, lipschitz_cap=args.lipschitz_cap,
                  start=args.start)
    run = picard.solve_backward(ivp, R, **kwargs) if args.backward else picard.solve(ivp, R, **kwargs)
    status = "converged" if run.converged else "not-converged"
    print(f"{status} n={run.iterations} h={_h(run.h)} residual={_h(run.residual)}")
    print(f"M={_h(run.M)} L={_h(run.L)} interval=[{_h(min(run.x_nodes[0], run.x_nodes[-1]))}, "
          f"{_h(max(run.x_nodes[0], run.x_nodes[-1]))}] final_gap={_h(run.gaps[-1])}")

    artifacts: dict[str, str] = {}
    x = run.x_nodes
    if args.layout == "wide":
        header = ["x"] + [f"phi_{k}" for k in range(len(run.iterates))]
        cols = np.column_stack([x] + [phi.values for phi in run.iterates])
        artifacts["iterates.csv"] = _csv(header, cols)
    else:
        for k, phi in enumerate(run.iterates):
            artifacts[f"iterate_{k:03d}.csv"] = _csv(["x", "value"], zip(x, phi.values))
    tails = [picard.cauchy_tail_bound(run.M, run.L, run.h, n + 1) for n in range(len(run.gaps))]
    artifacts["gaps.csv"] = _csv(["n", "gap", "apriori", "cauchy_tail"],
                                 [(n + 1, g, b, t) for n, (g, b, t)
                                  in enumerate(zip(run.gaps, run.apriori, tails))])
    artifacts["picard.svg"] = picard_svg(run)
    _emit(args, artifacts)
    return EXIT_OK if run.converged else EXIT_BUDGET


def picard_bounds(args) -> int:
    ivp, R = _picard_problem(args)
    target = picard.mirrored(ivp) if args.backward else ivp
    M = picard.bound_M(target.f, R, args.samples)
    L = picard.estimate_L(target.f, R, args.samples, args.lipschitz_cap)
    h = picard.existence_interval(R.a, R.b, M)
    print(f"M={_h(M)} L={_h(L)} h={_h(h)} Mh={_h(M * h)} b={_h(R.b)}")
    rows = []
    for n in range(1, args.terms + 1):
        bound = picard.apriori_gap_bound(M, L, h, n)
        tail = picard.cauchy_tail_bound(M, L, h, n)
        rows.append((n, bound, tail))
        print(f"n={n} apriori={_h(bound)} tail={_h(tail)}")
    _emit(args, {"bounds.csv": _csv(["n", "apriori", "cauchy_tail"], rows)})
    return EXIT_OK


# --------------------------------------------------------------------------
# hg


def _matrix_lines(name: str, A: np.ndarray) -> list[str]:
    if A.size == 0:
        return [f"{name} = []"]
    rows = ["[" + ", ".join(_h(v) for v in row) + "]" for row in np.asarray(A)]
    return [f"{name} = [" + ", ".join(rows) + "]"]


def _eig_text(eigs) -> str:
    parts = []
    for lam in eigs:
        parts.append(_h(lam.real) if lam.imag == 0 else f"{_h(lam.real)}{lam.imag:+.6g}i")
    return "[" + ", ".join(parts) + "]"


def hg_linearize(args) -> int:
    field = hartman.VectorFieldND.from_sources(_require(args, "field", "--field"))
    guess = _guess(args, field)
    x_star = hartman.find_fixed_point(field, guess, tol=args.tol)
    J = hartman.jacobian_at(field, x_star)
    report = hartman.check_hyperbolic(J, args.hyperbolic_tol)
    print("fixed_point = [" + ", ".join(_h(v) for v in x_star) + "]")
    for line in _matrix_lines("jacobian", J):
        print(line)
    print(f"eigenvalues = {_eig_text(report.eigenvalues)}")
    print(f"verdict = {report.describe()}")
    if not report.hyperbolic:
        raise hartman.NotHyperbolic(
            f"fixed point is not hyperbolic; eigenvalues {_eig_text(report.eigenvalues)}",
            report.eigenvalues)
    split = hartman.SpectralSplit.from_matrix(J, args.hyperbolic_tol)
    print(f"dim_stable = {split.dim_stable} dim_unstable = {split.dim_unstable}")
    for name, A in (("P", split.P), ("Q", split.Q), ("basis", split.basis)):
        for line in _matrix_lines(name, A):
            print(line)
    rows = [("x_star", i, 0, v) for i, v in enumerate(x_star)]
    rows += [("jacobian", i, j, J[i, j]) for i in range(J.shape[0]) for j in range(J.shape[1])]
    rows += [("basis", i, j, split.basis[i, j]) for i in range(split.dim) for j in range(split.dim)]
    _emit(args, {"linearize.csv": _csv(["quantity", "i", "j", "value"], rows)})
    return EXIT_OK


def _guess(args, field):
    if args.guess is None:
        return None
    if len(args.guess) != field.dim:
        raise UsageError(f"--guess needs {field.dim} coordinates")
    return np.array(args.guess)


def hg_conjugacy(args) -> int:
    field = hartman.VectorFieldND.from_sources(_require(args, "field", "--field"))
    if args.grid < 3 or args.grid % 2 == 0:
        raise UsageError("--grid must be odd and at least 3")
    run = hartman.conjugacy(field, _guess(args, field), grid_count=args.grid,
                            max_iter=args.max_iter, gap_tol=args.gap_tol, tol=args.tol,
                            hyperbolic_tol=args.hyperbolic_tol)
    k = run.constants
    status = "converged" if run.converged else "not-converged"
    print(f"{status} iterations={run.iterations} residual={_h(run.residual)}")
    print(f"a={_h(k.a)} b={_h(k.b)} c={_h(k.c)} s0={_h(k.s0)} delta={_h(k.delta)} "
          f"r={_h(k.r)} M_H={_h(k.M_H)}")
    print("fixed_point = [" + ", ".join(_h(v) for v in run.fixed_point) + "]")
    holder = hartman.verify_holder_bound(run)
    print(f"holder_ok psi={all(holder['psi'])} phi={all(holder['phi'])}")

    ds, n = run.split.dim_stable, run.split.dim
    names = [f"y{i + 1}" for i in range(ds)] + [f"z{i + 1}" for i in range(n - ds)]
    header = names + [f"H_{nm}" for nm in names]
    nodes = run.grid.nodes().reshape(-1, n)
    vals = run.H.values.reshape(-1, n)
    artifacts = {
        "H.csv": _csv(header, np.column_stack([nodes, vals])),
        "gaps.csv": _csv(["j", "psi_gap", "phi_gap"],
                         [(j + 1, g[0], g[1]) for j, g in
                          enumerate(zip(_pad(run.psi_gaps, run.iterations),
                                        _pad(run.phi_gaps, run.iterations)))]),
        "constants.csv": "name,value\n" + "".join(
            f"{name},{format_real(getattr(k, name))}\n"
            for name in ("a", "b", "c", "s0", "delta", "r", "M_H", "a_target")),
        "hg.svg": conjugacy_svg(run),
    }
    _emit(args, artifacts)
    return EXIT_OK if run.converged else EXIT_BUDGET


def _pad(gaps, n):
    return list(gaps) + [0.0] * (n - len(gaps))


# --------------------------------------------------------------------------
# entry points


def _run(parser: argparse.ArgumentParser, handlers, argv) -> int:
    try:
        args = _apply_config(parser, list(sys.argv[1:] if argv is None else argv))
        return handlers[args.command](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        if exc.usage:
            print(exc.usage.rstrip("\n"), file=sys.stderr)
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except ep.ExprError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except HypothesisError as exc:
        print(f"hypothesis failure ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_HYPOTHESIS
    except (NoConvergence, IterateEscapedRectangle, IntegrationError) as exc:
        print(f"no convergence ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (ValueError, OSError, ContractionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def picard_main(argv: Sequence[str] | None = None) -> int:
    return _run(build_picard_parser(), {"solve": picard_solve, "bounds": picard_bounds}, argv)


def hg_main(argv: Sequence[str] | None = None) -> int:
    return _run(build_hg_parser(), {"linearize": hg_linearize, "conjugacy": hg_conjugacy}, argv)


def main(argv: Sequence[str] | None = None) -> int:
    """``python -m contraction picard ...`` or ``python -m contraction hg ...``."""
    argv = list(sys.argv[1:] if argv is None else argv)
    tools = {"picard": picard_main, "hg": hg_main}
    if not argv or argv[0] not in tools:
        print("usage: python -m contraction {picard,hg} ...", file=sys.stderr)
        return EXIT_USAGE
    return tools[argv[0]](argv[1:])


def _console(entry):
    def run():
        sys.exit(entry())
    return run


picard_console = _console(picard_main)
hg_console = _console(hg_main)
