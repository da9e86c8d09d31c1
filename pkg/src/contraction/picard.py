"""Picard iterates for scalar initial value problems ``y' = f(x, y)``.

The solver works on the forward interval ``[x0, x0 + h]`` with
``h = min(a, b / M)``, where ``M`` bounds ``|f|`` and ``L`` bounds
``|df/dy|`` on the rectangle ``|x - x0| <= a, |y - y0| <= b``.  Every run
records the successive sup-gaps together with the a-priori bounds
``(M/L) (Lh)^n / n!`` so the convergence argument can be checked directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import exprparse as ep
from .errors import FieldNotFinite, IterateEscapedRectangle, LipschitzUnbounded
from .numcore import DEFAULT_NODES, SampledFunction1D, cumulative_integral

__all__ = [
    "Ivp",
    "Rectangle",
    "PicardRun",
    "SAFETY",
    "bound_M",
    "estimate_L",
    "existence_interval",
    "picard_step",
    "solve",
    "solve_backward",
    "mirrored",
    "apriori_gap_bound",
    "cauchy_tail_bound",
    "gronwall_envelope",
    "uniqueness_residual",
    "residual",
]

#: Inflation applied to grid-sampled maxima of |f| and |df/dy|.
SAFETY = 1.05
VARS = ("x", "y")


@dataclass(frozen=True)
class Ivp:
    f: ep.Expr
    x0: float
    y0: float

    def __post_init__(self):
        extra = ep.free_vars(self.f) - set(VARS)
        if extra:
            raise ValueError(f"f may only use x and y, found {sorted(extra)}")

    @classmethod
    def from_source(cls, source: str, x0: float, y0: float) -> Ivp:
        return cls(ep.parse(source, VARS), float(x0), float(y0))

    def rhs(self):
        return ep.compile_expr(self.f, VARS)


@dataclass(frozen=True)
class Rectangle:
    x0: float
    y0: float
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("rectangle half-widths a and b must be positive")


@dataclass(frozen=True)
class PicardRun:
    """A finished Picard solve.

    ``gaps[n]`` is ``sup|phi_{n+1} - phi_n|`` and ``apriori[n]`` the matching
    bound ``apriori_gap_bound(M, L, h, n + 1)``.
    """

    ivp: Ivp
    rectangle: Rectangle
    M: float
    L: float
    h: float
    iterates: tuple[SampledFunction1D, ...]
    gaps: tuple[float, ...]
    apriori: tuple[float, ...]
    converged: bool
    residual: float
    tol: float
    direction: int = 1
    standard_start: bool = field(default=True)

    @property
    def final(self) -> SampledFunction1D:
        return self.iterates[-1]

    @property
    def iterations(self) -> int:
        return len(self.iterates) - 1

    @property
    def x_nodes(self) -> np.ndarray:
        """Node positions in the original variable (mirrored for backward runs)."""
        nodes = self.final.nodes
        if self.direction < 0:
            return 2.0 * self.ivp.x0 - nodes
        return nodes

    def confinement(self) -> list[float]:
        """``sup|phi_n - y0|`` for every iterate."""
        return [float(np.max(np.abs(phi.values - self.ivp.y0))) for phi in self.iterates]


def _centered_axis(center: float, half: float, n: int) -> np.ndarray:
    i = np.arange(n, dtype=float)
    return center + half * ((2 * i - (n - 1)) / (n - 1))


def _as_rhs(f):
    return ep.compile_expr(f, VARS) if isinstance(f, ep.Expr) else f


def _rect_mesh(R: Rectangle, samples: int):
    xs = _centered_axis(R.x0, R.a, samples)
    ys = _centered_axis(R.y0, R.b, samples)
    return np.meshgrid(xs, ys, indexing="ij")


def bound_M(f: ep.Expr, R: Rectangle, samples_per_axis: int = 33) -> float:
    """``1.05 * max |f|`` over a uniform grid on ``R``."""
    if samples_per_axis < 33:
        raise ValueError("samples_per_axis must be at least 33")
    X, Y = _rect_mesh(R, samples_per_axis)
    try:
        values = _as_rhs(f)(X, Y)
    except ep.DomainError as exc:
        raise FieldNotFinite(f"f is not finite on the rectangle: {exc}") from None
    return SAFETY * float(np.max(np.abs(values)))


def _diverges(estimates: list[float]) -> bool:
    return all(later > 1.5 * earlier for earlier, later in zip(estimates, estimates[1:]))


def _quotient_estimates(fn, R: Rectangle, samples: int, refinements: int = 2):
    """Max adjacent-pair quotient per halving, plus the worst pair's left node."""
    xs = _centered_axis(R.x0, R.a, samples)
    base = 2 * R.b / (samples - 1)
    out = []
    worst = (R.x0, R.y0)
    for k in range(refinements + 1):
        d = base / 2**k
        m = (samples - 1) * 2**k
        ys = _centered_axis(R.y0, R.b, m + 1)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        try:
            vals = fn(X, Y)
        except ep.DomainError as exc:
            raise FieldNotFinite(f"f is not finite on the rectangle: {exc}") from None
        q = np.abs(np.diff(vals, axis=1)) / d
        i, j = np.unravel_index(np.argmax(q), q.shape)
        worst = (float(X[i, j]), float(Y[i, j]))
        out.append(float(q[i, j]))
    return out, worst


def _probe_singular_point(fn, R: Rectangle, x: float, y: float, d0: float) -> list[float]:
    """One-sided difference quotients at a suspected singular point.

    Spacings shrink by 16 per refinement so Holder-type singularities
    (``|y|^alpha`` with ``alpha`` up to about 0.85) fail the 50 % growth test.
    """
    out = []
    for k in range(3):
        d = d0 / 16**k
        best = 0.0
        for side in (1.0, -1.0):
            y2 = y + side * d
            if abs(y2 - R.y0) > R.b * (1 + 1e-12):
                continue
            try:
                q = abs(float(fn(x, y2)) - float(fn(x, y))) / d
            except ep.DomainError as exc:
                raise FieldNotFinite(f"f is not finite on the rectangle: {exc}") from None
            best = max(best, q)
        out.append(best)
    return out


def estimate_L(f: ep.Expr, R: Rectangle, samples_per_axis: int = 33,
               cap: float = 1e6) -> float:
    """Lipschitz constant of ``f`` in ``y`` on ``R`` (inflated by 1.05).

    Uses ``max |df/dy|`` on the sample grid when the symbolic derivative
    exists, otherwise difference quotients refined twice by halving.
    Raises :class:`LipschitzUnbounded` when the estimate exceeds ``cap`` or
    keeps growing by more than 50 % per refinement.
    """
    if samples_per_axis < 33:
        raise ValueError("samples_per_axis must be at least 33")
    if not cap > 0:
        raise ValueError("cap must be positive")
    fn = _as_rhs(f)
    try:
        dfdy = ep.compile_expr(ep.differentiate(f, "y"), VARS)
    except ep.DifferentiationError:
        estimates, (xw, yw) = _quotient_estimates(fn, R, samples_per_axis)
        if _diverges(estimates):
            raise LipschitzUnbounded(
                f"difference quotients keep growing under refinement: {estimates}")
        d_fine = 2 * R.b / (samples_per_axis - 1) / 4
        for y in (yw, yw + d_fine):
            probe = _probe_singular_point(fn, R, xw, y, d_fine)
            if _diverges(probe):
                raise LipschitzUnbounded(
                    f"difference quotients near (x={xw:.6g}, y={y:.6g}) grow without "
                    f"bound: {[f'{q:.4g}' for q in probe]}")
            estimates.append(max(probe))
        return _capped(SAFETY * max(estimates), cap)

    X, Y = _rect_mesh(R, samples_per_axis)
    try:
        return _capped(SAFETY * float(np.max(np.abs(dfdy(X, Y)))), cap)
    except ep.DomainError:
        pass
    # derivative undefined at some sample: examine those points one by one
    d0 = 2 * R.b / (samples_per_axis - 1)
    best = 0.0
    for x, y in zip(X.ravel(), Y.ravel()):
        try:
            best = max(best, abs(float(dfdy(x, y))))
            continue
        except ep.DomainError:
            pass
        probe = _probe_singular_point(fn, R, x, y, d0)
        if _diverges(probe) or SAFETY * probe[-1] > cap:
            raise LipschitzUnbounded(
                f"df/dy is singular at (x={x:.6g}, y={y:.6g}); difference quotients "
                f"grow without bound: {[f'{q:.4g}' for q in probe]}")
        best = max(best, *probe)
    return _capped(SAFETY * best, cap)


def _capped(L: float, cap: float) -> float:
    if not L <= cap:
        raise LipschitzUnbounded(f"Lipschitz estimate {L:.6g} exceeds cap {cap:.6g}")
    return L


def existence_interval(a: float, b: float, M: float) -> float:
    """``h = min(a, b/M)``; ``a`` when ``M == 0``."""
    if not (a > 0 and b > 0) or M < 0:
        raise ValueError("need a, b > 0 and M >= 0")
    if M == 0:
        return float(a)
    return float(min(a, b / M))


def picard_step(f, phi: SampledFunction1D, x0: float, y0: float) -> SampledFunction1D:
    """``y0 + integral from x0 to x of f(t, phi(t)) dt`` on the grid of ``phi``."""
    if phi.x_start != x0:
        raise ValueError("phi must start at x0")
    try:
        g = _as_rhs(f)(phi.nodes, phi.values)
    except ep.DomainError as exc:
        raise FieldNotFinite(f"f is undefined along the iterate: {exc}") from None
    integral = cumulative_integral(phi.with_values(g))
    return phi.with_values(y0 + integral.values)


def residual(f, phi: SampledFunction1D) -> float:
    """Sup over interior nodes of ``|phi' - f(x, phi)|`` with centred differences.

    Uses the five-point stencil where it fits (all but the two outermost
    nodes on each side) so the check is not limited by O(dx^2) truncation;
    three-node grids fall back to the three-point stencil.
    """
    y = phi.values
    d = phi.spacing
    if phi.n_nodes < 5:
        x = phi.nodes[1:-1]
        slope = (y[2:] - y[:-2]) / (2 * d)
        return float(np.max(np.abs(slope - _as_rhs(f)(x, y[1:-1]))))
    x = phi.nodes[2:-2]
    slope = (y[:-4] - 8 * y[1:-3] + 8 * y[3:-1] - y[4:]) / (12 * d)
    return float(np.max(np.abs(slope - _as_rhs(f)(x, y[2:-2]))))


def apriori_gap_bound(M: float, L: float, h: float, n: int) -> float:
    """``(M/L) (Lh)^n / n!`` evaluated in the log domain.

    For ``L == 0`` the limit ``M L^(n-1) h^n / n!`` is used: ``M h`` for
    ``n == 1`` and 0 beyond.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if M < 0 or L < 0 or h <= 0:
        raise ValueError("need M, L >= 0 and h > 0")
    if M == 0:
        return 0.0
    if L == 0:
        return M * h if n == 1 else 0.0
    log_value = math.log(M) - math.log(L) + n * math.log(L * h) - math.lgamma(n + 1)
    return math.exp(log_value)


def cauchy_tail_bound(M: float, L: float, h: float, n: int) -> float:
    """``(M/L) * sum_{k >= n} (Lh)^k / k!``, the tail of ``(M/L) e^{Lh}``.

    Summed term by term from ``k = n`` rather than as ``e^{Lh}`` minus a
    partial sum, which would cancel catastrophically for large ``n``.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    if M < 0 or L < 0 or h <= 0:
        raise ValueError("need M, L >= 0 and h > 0")
    if M == 0:
        return 0.0
    if L == 0:
        return math.inf if n == 0 else (M * h if n == 1 else 0.0)
    z = L * h
    if n == 0:
        term = 1.0
    else:
        term = math.exp(n * math.log(z) - math.lgamma(n + 1))
    total = 0.0
    k = n
    while term > 0.0:
        total += term
        k += 1
        term *= z / k
        if k > n + 2 * z + 30 and term < 1e-18 * total:
            break
    return max(0.0, M / L * total)


def gronwall_envelope(C: float, A: SampledFunction1D) -> SampledFunction1D:
    """``C * exp(integral of A)`` pointwise; identically zero when ``C == 0``."""
    if C < 0:
        raise ValueError("C must be nonnegative")
    if np.any(A.values < 0):
        raise ValueError("A must be nonnegative")
    if C == 0:
        return A.with_values(np.zeros(A.n_nodes))
    return A.with_values(C * np.exp(cumulative_integral(A).values))


def uniqueness_residual(run1: PicardRun, run2: PicardRun) -> float:
    """Sup distance between the final iterates of two converged runs."""
    if not (run1.converged and run2.converged):
        raise ValueError("both runs must have converged")
    if not run1.final.same_grid(run2.final):
        raise ValueError("runs live on different grids")
    return run1.final.sup_distance(run2.final)


def solve(ivp: Ivp, R: Rectangle, tol: float = 1e-8, max_iter: int = 50,
          n_nodes: int = DEFAULT_NODES, start: SampledFunction1D | float | None = None,
          samples_per_axis: int = 33, lipschitz_cap: float = 1e6) -> PicardRun:
    """Iterate ``phi_{n+1} = y0 + int f(t, phi_n)`` from ``phi_0 = y0``.

    Stops once the sup-gap is at most ``tol`` and the differential residual at
    most ``10 * tol``; otherwise returns the full history with
    ``converged=False`` after ``max_iter`` steps.  ``start`` replaces the
    constant starting iterate (used to check independence of the start).
    """
    if not tol > 0 or max_iter < 1:
        raise ValueError("need tol > 0 and max_iter >= 1")
    if (R.x0, R.y0) != (ivp.x0, ivp.y0):
        raise ValueError("rectangle must be centred on (x0, y0)")
    fn = ivp.rhs()
    M = bound_M(fn, R, samples_per_axis)
    L = estimate_L(ivp.f, R, samples_per_axis, lipschitz_cap)
    h = existence_interval(R.a, R.b, M)
    x_end = ivp.x0 + h

    if start is None:
        phi = SampledFunction1D.constant(ivp.y0, ivp.x0, x_end, n_nodes)
    elif isinstance(start, SampledFunction1D):
        phi = start
    else:
        phi = SampledFunction1D.constant(float(start), ivp.x0, x_end, n_nodes)
    if phi.x_start != ivp.x0 or phi.x_end != x_end or phi.n_nodes != n_nodes:
        raise ValueError("starting iterate must live on the solver grid")
    if np.max(np.abs(phi.values - ivp.y0)) > R.b:
        raise ValueError("starting iterate leaves the rectangle")

    iterates = [phi]
    gaps: list[float] = []
    apriori: list[float] = []
    converged = False
    res = math.inf
    for n in range(max_iter):
        nxt = picard_step(fn, phi, ivp.x0, ivp.y0)
        escape = float(np.max(np.abs(nxt.values - ivp.y0)))
        if escape > R.b:
            raise IterateEscapedRectangle(
                f"iterate {n + 1} reached |phi - y0| = {escape:.6g} > b = {R.b:.6g}")
        gaps.append(nxt.sup_distance(phi))
        apriori.append(apriori_gap_bound(M, L, h, n + 1))
        iterates.append(nxt)
        phi = nxt
        if gaps[-1] <= tol:
            res = residual(fn, phi)
            if res <= 10 * tol:
                converged = True
                break
    if not converged:
        res = residual(fn, phi)
    return PicardRun(ivp=ivp, rectangle=R, M=M, L=L, h=h, iterates=tuple(iterates),
                     gaps=tuple(gaps), apriori=tuple(apriori), converged=converged,
                     residual=res, tol=tol, standard_start=start is None)


def mirrored(ivp: Ivp) -> Ivp:
    """The IVP in ``s = 2 x0 - x``: ``u'(s) = -f(2 x0 - s, u)``."""
    reflected = ep.BinOp("-", ep.Num(2.0 * ivp.x0), ep.Var("x"))
    g = ep.Neg(ep.substitute(ivp.f, {"x": reflected}))
    return Ivp(g, ivp.x0, ivp.y0)


def solve_backward(ivp: Ivp, R: Rectangle, **kwargs) -> PicardRun:
    """Solve on ``[x0 - h, x0]`` through the mirrored problem."""
    run = solve(mirrored(ivp), R, **kwargs)
    return PicardRun(**{**run.__dict__, "ivp": ivp, "direction": -1})
