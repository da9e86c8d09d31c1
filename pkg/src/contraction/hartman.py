"""Numerical Hartman-Grobman conjugacy for hyperbolic fixed points (n <= 3).

Pipeline: locate the fixed point and move it to the origin, split the
linearisation into a stable block ``P`` and an unstable block ``Q``, and work
in split coordinates ``w = (y, z)`` in which the time-1 linear map is
``L = diag(B, C)`` with ``B = e^P`` and ``C = e^Q``.  The nonlinear time-1
map is written ``T(w) = L w + q(|w|) E(w)`` where ``E = phi_1 - L`` is the
error field and ``q`` a C^1 cutoff equal to 1 on the ``s0/2`` ball and 0
outside the ``s0`` ball.  The two conjugacy components solve

    psi = C^-1 psi o T        Phi = B Phi o T^-1

and are found by successive approximation on a tensor grid, starting from
``psi_0 = z`` and ``Phi_0 = y``.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
from scipy.spatial import cKDTree

from . import exprparse as ep
from .errors import (CalibrationError, FieldNotFinite, NoConvergence, NotHyperbolic,
                     SingularJacobian)
from .numcore import (BoxGrid, IntegrationError, SpectrumError, integrate_flow,
                      matrix_exponential, multilinear_interpolate, operator_norm,
                      real_schur_split)

__all__ = [
    "VectorFieldND",
    "HyperbolicityReport",
    "SpectralSplit",
    "SplitSystem",
    "ConjugacyConstants",
    "GridMapND",
    "ConjugacyProblem",
    "ConjugacyRun",
    "find_fixed_point",
    "jacobian_at",
    "check_hyperbolic",
    "time_one_map",
    "inverse_time_one_map",
    "error_fields",
    "cutoff_weight",
    "truncated_error",
    "calibrate_cutoff",
    "iterate_psi",
    "iterate_phi",
    "assemble_H",
    "conjugacy_residual",
    "fractional_time_residual",
    "verify_holder_bound",
    "gap_ratios",
    "injectivity_violations",
    "conjugacy",
]

DELTA_LADDER = (0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1)
HOLDER_SLACK = 1e-9
_ALIASES = ("x", "y", "z")


def _split_top_level(source: str) -> list[str]:
    """Split on commas that are not inside parentheses."""
    parts, depth, start = [], 0, 0
    for i, ch in enumerate(source):
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        elif ch == "," and depth == 0:
            parts.append(source[start:i])
            start = i + 1
    parts.append(source[start:])
    return [p.strip() for p in parts]


@dataclass(frozen=True)
class VectorFieldND:
    """Autonomous vector field ``x' = f(x)`` on R^n with ``n <= 3``.

    Components are expressions in ``x1 .. xn``.
    """

    components: tuple[ep.Expr, ...]

    def __post_init__(self):
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        n = len(comps)
        if not 1 <= n <= 3:
            raise ValueError("vector fields must have 1, 2 or 3 components")
        allowed = set(self.names)
        for k, c in enumerate(comps):
            extra = ep.free_vars(c) - allowed
            if extra:
                raise ValueError(f"component {k + 1} uses unknown variables {sorted(extra)}")

    @classmethod
    def from_sources(cls, sources: str | Sequence[str]) -> VectorFieldND:
        """Parse component strings; ``x, y, z`` are accepted for ``x1, x2, x3``.

        A single string is split on top-level commas.
        """
        if isinstance(sources, str):
            sources = _split_top_level(sources)
        sources = list(sources)
        n = len(sources)
        if not 1 <= n <= 3:
            raise ValueError("vector fields must have 1, 2 or 3 components")
        names = [f"x{k + 1}" for k in range(n)]
        aliases = {_ALIASES[k]: ep.Var(names[k]) for k in range(n)}
        comps = []
        for s in sources:
            expr = ep.parse(s, names + list(aliases))
            comps.append(ep.substitute(expr, aliases))
        return cls(tuple(comps))

    @classmethod
    def linear(cls, A) -> VectorFieldND:
        """The field ``x' = A x``."""
        A = np.asarray(A, dtype=float)
        n = A.shape[0]
        names = [f"x{k + 1}" for k in range(n)]
        comps = []
        for i in range(n):
            expr: ep.Expr = ep.Num(0.0)
            for j in range(n):
                expr = ep.BinOp("+", expr, ep.BinOp("*", ep.Num(float(A[i, j])), ep.Var(names[j])))
            comps.append(ep.simplify(expr))
        return cls(tuple(comps))

    @property
    def dim(self) -> int:
        return len(self.components)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f"x{k + 1}" for k in range(len(self.components)))

    def rhs(self) -> Callable[[np.ndarray], np.ndarray]:
        """Vectorised ``f``: accepts ``(..., n)`` and returns ``(..., n)``."""
        fns = [ep.compile_expr(c, self.names) for c in self.components]

        def f(X):
            X = np.asarray(X, dtype=float)
            cols = [X[..., k] for k in range(X.shape[-1])]
            return np.stack([fn(*cols) for fn in fns], axis=-1)

        return f

    def __call__(self, p) -> np.ndarray:
        return self.rhs()(np.asarray(p, dtype=float))

    def recentered(self, p) -> VectorFieldND:
        """Field in the shifted variable ``x - p``."""
        p = np.asarray(p, dtype=float)
        if not np.any(p):
            return self
        shift = {name: ep.BinOp("+", ep.Var(name), ep.Num(float(v)))
                 for name, v in zip(self.names, p) if v != 0.0}
        return VectorFieldND(tuple(ep.simplify(ep.substitute(c, shift)) for c in self.components))

    def is_linear(self) -> bool:
        """True when every second partial derivative simplifies to zero."""
        try:
            for c in self.components:
                for u in self.names:
                    du = ep.differentiate(c, u)
                    for v in self.names:
                        if not ep.is_constant_zero(ep.differentiate(du, v)):
                            return False
        except ep.DifferentiationError:
            return False
        return True

    def to_sources(self) -> list[str]:
        return [ep.to_source(c) for c in self.components]


# --------------------------------------------------------------------------
# fixed point, Jacobian, hyperbolicity


def _fd_jacobian(f, p: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences with one Richardson extrapolation step."""
    n = p.size

    def central(step):
        J = np.empty((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = step
            J[:, j] = (f(p + e) - f(p - e)) / (2 * step)
        return J

    return (4.0 * central(h / 2) - central(h)) / 3.0


def jacobian_at(field: VectorFieldND, p) -> np.ndarray:
    """``J[i, j] = df_i/dx_j`` at ``p``.

    Entries come from symbolic derivatives; a component whose derivative is
    refused (``abs`` of a state-dependent argument) falls back to
    Richardson-extrapolated central differences.
    """
    p = np.asarray(p, dtype=float).reshape(field.dim)
    n = field.dim
    J = np.empty((n, n))
    rhs = field.rhs()
    for i, comp in enumerate(field.components):
        try:
            row = [ep.compile_expr(ep.differentiate(comp, v), field.names)(*p)
                   for v in field.names]
            J[i] = np.array(row, dtype=float)
        except ep.DifferentiationError:
            try:
                J[i] = _fd_jacobian(lambda q: rhs(q), p)[i]
            except ep.DomainError as exc:
                raise FieldNotFinite(f"derivative of component {i + 1} undefined at {p}: {exc}") from None
        except ep.DomainError as exc:
            raise FieldNotFinite(f"derivative of component {i + 1} undefined at {p}: {exc}") from None
    return J


def find_fixed_point(field: VectorFieldND, guess=None, tol: float = 1e-12,
                     max_iter: int = 50) -> np.ndarray:
    """Root of ``f`` by Newton's method.

    Stops once ``|f(x)| <= tol`` and the last step is below ``1e-12``
    relative.  Raises :class:`SingularJacobian` when the Jacobian becomes
    numerically singular on the way (condition > 1e12) or at the root
    (condition > 1e8), and :class:`NoConvergence` after ``max_iter`` steps.
    """
    n = field.dim
    x = np.zeros(n) if guess is None else np.asarray(guess, dtype=float).reshape(n).copy()
    rhs = field.rhs()
    try:
        fx = rhs(x)
    except ep.DomainError as exc:
        raise FieldNotFinite(f"field undefined at the initial guess: {exc}") from None
    for _ in range(max_iter):
        J = jacobian_at(field, x)
        if np.linalg.cond(J) > 1e12:
            raise SingularJacobian(f"Jacobian is singular near x = {x.tolist()}")
        step = np.linalg.solve(J, fx)
        x = x - step
        try:
            fx = rhs(x)
        except ep.DomainError as exc:
            raise FieldNotFinite(f"Newton step left the domain of f: {exc}") from None
        if (np.linalg.norm(fx) <= tol
                and np.linalg.norm(step) <= 1e-12 * max(1.0, np.linalg.norm(x))):
            break
    else:
        raise NoConvergence(f"Newton did not converge in {max_iter} iterations "
                            f"(|f| = {np.linalg.norm(fx):.3g})")
    # snap round-off sized coordinates to zero when that is at least as good a root
    snapped = np.where(np.abs(x) < 1e-12, 0.0, x)
    if np.any(snapped != x) and np.linalg.norm(rhs(snapped)) <= np.linalg.norm(fx):
        x = snapped
    if np.linalg.cond(jacobian_at(field, x)) > 1e8:
        raise SingularJacobian(f"Jacobian is singular at the root x = {x.tolist()}")
    return x


@dataclass(frozen=True)
class HyperbolicityReport:
    eigenvalues: tuple[complex, ...]
    hyperbolic: bool
    min_abs_real: float
    tol: float

    @property
    def n_stable(self) -> int:
        return sum(1 for lam in self.eigenvalues if lam.real < 0)

    def describe(self) -> str:
        verdict = "hyperbolic" if self.hyperbolic else "NOT hyperbolic"
        return f"{verdict} (min |Re lambda| = {self.min_abs_real:.6g})"


def _polish_root(coeffs: Sequence[float], z: complex, steps: int = 4) -> complex:
    """A few Newton steps on a monic polynomial given high-order first."""
    for _ in range(steps):
        p = dp = 0j
        for c in coeffs:
            dp = dp * z + p
            p = p * z + c
        if dp == 0:
            break
        dz = p / dp
        z -= dz
        if abs(dz) <= 1e-16 * max(1.0, abs(z)):
            break
    return z


def _eigenvalues_closed_form(A: np.ndarray) -> list[complex]:
    n = A.shape[0]
    if n == 1:
        return [complex(A[0, 0])]
    tr = float(np.trace(A))
    if n == 2:
        det = float(A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0])
    else:
        det = float(A[0, 0] * (A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1])
                    - A[0, 1] * (A[1, 0] * A[2, 2] - A[1, 2] * A[2, 0])
                    + A[0, 2] * (A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0]))
    if n == 2:
        disc = cmath.sqrt(complex(tr * tr / 4 - det))
        roots = [tr / 2 + disc, tr / 2 - disc]
        coeffs = (1.0, -tr, det)
    else:
        m2 = (A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0] + A[0, 0] * A[2, 2] - A[0, 2] * A[2, 0]
              + A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1])
        a, b, c = -tr, float(m2), -det
        coeffs = (1.0, a, b, c)
        p = b - a * a / 3
        q = 2 * a ** 3 / 27 - a * b / 3 + c
        s = cmath.sqrt(q * q / 4 + p ** 3 / 27)
        u3 = -q / 2 + s if abs(-q / 2 + s) >= abs(-q / 2 - s) else -q / 2 - s
        if u3 == 0:
            ts = [0j, 0j, 0j]
        else:
            u = u3 ** (1 / 3)
            omega = cmath.exp(2j * math.pi / 3)
            ts = []
            for k in range(3):
                uk = u * omega ** k
                ts.append(uk - p / (3 * uk))
        roots = [t - a / 3 for t in ts]
    scale = max(1.0, max(abs(r) for r in roots))
    out = []
    for r in roots:
        r = _polish_root(coeffs, r)
        if abs(r.imag) <= 1e-12 * scale:
            r = complex(r.real, 0.0)
        out.append(r)
    return sorted(out, key=lambda z: (z.real, z.imag))


def check_hyperbolic(A, tol: float = 1e-9) -> HyperbolicityReport:
    """Eigenvalues of a matrix of size at most 3 from its characteristic polynomial.

    >>> check_hyperbolic([[-1.0, 0.0], [0.0, 2.0]]).hyperbolic
    True
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or not 1 <= A.shape[0] <= 3:
        raise ValueError("check_hyperbolic needs a square matrix of size 1..3")
    eig = tuple(_eigenvalues_closed_form(A))
    m = min(abs(lam.real) for lam in eig)
    return HyperbolicityReport(eig, bool(m > tol), float(m), tol)


@dataclass(frozen=True)
class SpectralSplit:
    """Block-diagonalisation ``basis_inv @ A @ basis = diag(P, Q)``."""

    P: np.ndarray
    Q: np.ndarray
    basis: np.ndarray
    basis_inv: np.ndarray

    @property
    def dim_stable(self) -> int:
        return self.P.shape[0]

    @property
    def dim_unstable(self) -> int:
        return self.Q.shape[0]

    @property
    def dim(self) -> int:
        return self.dim_stable + self.dim_unstable

    @property
    def block(self) -> np.ndarray:
        return scipy.linalg.block_diag(self.P, self.Q) if self.dim else np.zeros((0, 0))

    @classmethod
    def from_matrix(cls, A, tol: float = 1e-9) -> SpectralSplit:
        report = check_hyperbolic(A, tol)
        if not report.hyperbolic:
            raise NotHyperbolic(
                f"linearisation is not hyperbolic; eigenvalues {_fmt_eigs(report.eigenvalues)}",
                report.eigenvalues)
        try:
            P, Q, basis, basis_inv = real_schur_split(A, tol)
        except SpectrumError as exc:
            raise NotHyperbolic(str(exc), report.eigenvalues) from None
        split = cls(P, Q, basis, basis_inv)
        for block, sign in ((P, -1), (Q, 1)):
            if block.size and any(sign * lam.real <= 0 for lam in check_hyperbolic(block).eigenvalues):
                raise NotHyperbolic("spectral split failed to separate the spectrum",
                                    report.eigenvalues)
        return split


def _fmt_eigs(eigs) -> str:
    parts = []
    for lam in eigs:
        if lam.imag == 0:
            parts.append(f"{lam.real:.6g}")
        else:
            parts.append(f"{lam.real:.6g}{lam.imag:+.6g}i")
    return "[" + ", ".join(parts) + "]"


# --------------------------------------------------------------------------
# flows


def time_one_map(field: VectorFieldND, p, tol: float = 1e-10) -> np.ndarray:
    """Flow of ``field`` from ``p`` (a point or a batch) to time 1."""
    return integrate_flow(field.rhs(), p, 1.0, tol)


def inverse_time_one_map(field: VectorFieldND, p, tol: float = 1e-10) -> np.ndarray:
    """Flow of ``field`` from ``p`` back to time -1."""
    return integrate_flow(field.rhs(), p, -1.0, tol)


def cutoff_weight(rho, s0: float) -> np.ndarray:
    """C^1 smoothstep: 1 for ``rho <= s0/2``, 0 for ``rho >= s0``."""
    rho = np.asarray(rho, dtype=float)
    u = np.clip((rho - 0.5 * s0) / (0.5 * s0), 0.0, 1.0)
    return 1.0 - 3.0 * u * u + 2.0 * u ** 3


class SplitSystem:
    """A recentred field seen in split coordinates ``w = basis_inv @ x``."""

    def __init__(self, field: VectorFieldND, split: SpectralSplit, tol: float = 1e-10):
        if field.dim != split.dim:
            raise ValueError("field and split dimensions differ")
        self.field = field
        self.split = split
        self.tol = float(tol)
        self.ds = split.dim_stable
        self.B = matrix_exponential(split.P) if self.ds else np.zeros((0, 0))
        self.C = matrix_exponential(split.Q) if split.dim_unstable else np.zeros((0, 0))
        self.C_inv = np.linalg.inv(self.C) if split.dim_unstable else np.zeros((0, 0))
        self.B_inv = np.linalg.inv(self.B) if self.ds else np.zeros((0, 0))
        self.L = scipy.linalg.block_diag(self.B, self.C)
        self.L_inv = scipy.linalg.block_diag(self.B_inv, self.C_inv)
        self.linear = field.is_linear()
        f = field.rhs()
        basis, basis_inv = split.basis, split.basis_inv
        self.rhs = lambda W: f(W @ basis.T) @ basis_inv.T

    @property
    def dim(self) -> int:
        return self.split.dim

    def norms(self, W) -> tuple[np.ndarray, np.ndarray]:
        W = np.asarray(W, dtype=float)
        return (np.linalg.norm(W[..., :self.ds], axis=-1),
                np.linalg.norm(W[..., self.ds:], axis=-1))

    def flow(self, W, t: float = 1.0) -> np.ndarray:
        return integrate_flow(self.rhs, np.asarray(W, dtype=float), t, self.tol)

    def error(self, W) -> np.ndarray:
        """Raw error field ``E(w) = phi_1(w) - L w`` for a batch ``(m, n)``.

        Exactly zero at the origin and for linear fields.
        """
        W = np.atleast_2d(np.asarray(W, dtype=float))
        E = np.zeros_like(W)
        if self.linear:
            return E
        live = np.any(W != 0.0, axis=1)
        if np.any(live):
            E[live] = self.flow(W[live]) - W[live] @ self.L.T
        return E

    def T(self, W, s0: float) -> np.ndarray:
        """Cutoff-modified time-1 map ``L w + q(|w|) E(w)``."""
        W = np.atleast_2d(np.asarray(W, dtype=float))
        out = W @ self.L.T
        if self.linear:
            return out
        rho = np.linalg.norm(W, axis=1)
        active = rho < s0
        if np.any(active):
            Wa = W[active]
            out[active] += cutoff_weight(rho[active], s0)[:, None] * self.error(Wa)
        return out

    def T_inv(self, P, s0: float, max_iter: int = 30) -> np.ndarray:
        """Inverse of :meth:`T` by Newton iteration.

        Seeds are the backward time-1 flow (exact whenever it lands in the
        ``s0/2`` ball) or ``L^-1 p``; the origin maps to itself exactly.
        """
        P = np.atleast_2d(np.asarray(P, dtype=float))
        Q = P @ self.L_inv.T
        if self.linear:
            return Q
        live = np.any(P != 0.0, axis=1)
        Q[~live] = 0.0
        idx = np.flatnonzero(live)
        if idx.size == 0:
            return Q
        try:
            back = self.flow(P[idx], -1.0)
        except IntegrationError:
            back = None
        if back is not None:
            inner = np.linalg.norm(back, axis=1) <= 0.5 * s0
            Q[idx[inner]] = back[inner]
            idx = idx[~inner]
        target_tol = 0.1 * self.tol
        h = 1e-4 * s0
        n = self.dim
        for _ in range(max_iter):
            if idx.size == 0:
                return Q
            q = Q[idx]
            F = self.T(q, s0) - P[idx]
            bad = np.max(np.abs(F), axis=1) > target_tol
            idx, q, F = idx[bad], q[bad], F[bad]
            if idx.size == 0:
                return Q
            J = np.empty((idx.size, n, n))
            for j in range(n):
                e = np.zeros(n)
                e[j] = h
                J[:, :, j] = (self.T(q + e, s0) - self.T(q - e, s0)) / (2 * h)
            Q[idx] = q - np.linalg.solve(J, F[..., None])[..., 0]
        F = self.T(Q[idx], s0) - P[idx]
        worst = float(np.max(np.abs(F))) if idx.size else 0.0
        if worst > 10 * self.tol:
            raise NoConvergence(f"inverting the cutoff time-1 map failed (residual {worst:.3g})")
        return Q


def error_fields(field: VectorFieldND, split: SpectralSplit, p, tol: float = 1e-10):
    """``(Y~, Z~)`` at split-coordinate point(s) ``p``.

    ``Y~ = y(1) - B y0`` and ``Z~ = z(1) - C z0`` where ``(y(1), z(1))`` is the
    time-1 flow of the recentred field from ``(y0, z0)``.
    """
    system = field if isinstance(field, SplitSystem) else SplitSystem(field, split, tol)
    p = np.asarray(p, dtype=float)
    E = system.error(p.reshape(-1, system.dim)).reshape(p.shape)
    return E[..., :system.ds], E[..., system.ds:]


# --------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class ConjugacyConstants:
    """Contraction data for the conjugacy iteration.

    ``kappa`` is the rate prefactor in ``r = kappa (2 max(a, b, c))^delta``:
    ``c`` when an unstable block exists, ``b`` for a pure sink.
    """

    a: float
    b: float
    c: float
    s0: float
    delta: float
    r: float
    M_H: float
    a_target: float
    kappa: float

    def envelope(self, j: int, l1: np.ndarray) -> np.ndarray:
        """``M_H r^j (|y| + |z|)^delta``."""
        return self.M_H * self.r ** j * np.asarray(l1, dtype=float) ** self.delta


def _ball_samples(s0: float, dim: int, per_axis: int = 17) -> np.ndarray:
    axis = np.linspace(-s0, s0, per_axis)
    mesh = np.stack(np.meshgrid(*([axis] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    return mesh[np.linalg.norm(mesh, axis=1) <= s0 * (1 + 1e-12)]


def _error_derivative_sup(system: SplitSystem, s0: float) -> float:
    """Sampled sup of ``||DY~||`` and ``||DZ~||`` on the ``s0`` ball."""
    pts = _ball_samples(s0, system.dim)
    n = system.dim
    h = s0 / 64
    stencil = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        stencil.extend([pts + e, pts - e])
    E = system.error(np.concatenate(stencil)).reshape(2 * n, len(pts), n)
    D = np.empty((len(pts), n, n))
    for j in range(n):
        D[:, :, j] = (E[2 * j] - E[2 * j + 1]) / (2 * h)
    if not np.all(np.isfinite(D)):
        raise IntegrationError("non-finite error-field derivative")
    sup = 0.0
    for rows in (slice(0, system.ds), slice(system.ds, n)):
        block = D[:, rows, :]
        if block.shape[1]:
            sup = max(sup, float(np.max(np.linalg.svd(block, compute_uv=False))))
    return sup


def calibrate_cutoff(field, split: SpectralSplit | None = None, a_target: float | None = None,
                     tol: float = 1e-10, s0_min: float = 1e-6) -> ConjugacyConstants:
    """Choose the cutoff radius ``s0`` and the Holder constants.

    ``s0`` halves from 1 until the error-field derivative bound ``a`` is at
    most ``a_target`` (default ``min(1 - b, 1/c - 1, 1) / 4``), then ``delta``
    is the largest ladder value with ``r < 1``.
    """
    system = field if isinstance(field, SplitSystem) else SplitSystem(field, split, tol)
    b = operator_norm(system.B) if system.ds else 0.0
    c = operator_norm(system.C_inv) if system.split.dim_unstable else 0.0
    if b >= 1 or c >= 1:
        raise CalibrationError(f"linear part is not contracting (b = {b:.6g}, c = {c:.6g})")
    limits = [1.0]
    if system.ds:
        limits.append(1.0 - b)
    if system.split.dim_unstable:
        limits.append(1.0 / c - 1.0)
    target = min(limits) / 4 if a_target is None else float(a_target)
    if not target > 0:
        raise ValueError("a_target must be positive")
    kappa = c if system.split.dim_unstable else b

    s0 = 1.0
    while True:
        if s0 < s0_min:
            raise CalibrationError(
                f"cutoff radius fell below {s0_min:g}: error-field derivatives do not vanish "
                "at the origin (field not C^1 there, or wrong fixed point)")
        if system.linear:
            a = 0.0
            break
        try:
            a = _error_derivative_sup(system, s0)
        except (IntegrationError, ep.DomainError):
            a = math.inf
        if a <= target:
            break
        s0 /= 2

    m = max(a, b, c)
    for delta in DELTA_LADDER:
        r = kappa * (2 * m) ** delta
        if r < 1:
            break
    else:
        raise CalibrationError(f"no delta in the ladder gives r < 1 (kappa = {kappa:.6g})")
    M_H = a * kappa * (2 * s0) ** (1 - delta) / r * 1.05 if r > 0 else 0.0
    return ConjugacyConstants(a=a, b=b, c=c, s0=s0, delta=delta, r=r, M_H=M_H,
                              a_target=target, kappa=kappa)


def truncated_error(p, cutoff: ConjugacyConstants, raw):
    """Apply the cutoff weight at ``p`` to the raw error pair ``(Y~, Z~)``."""
    p = np.asarray(p, dtype=float)
    q = cutoff_weight(np.linalg.norm(p, axis=-1), cutoff.s0)
    Yr, Zr = (np.asarray(v, dtype=float) for v in raw)
    return q[..., None] * Yr, q[..., None] * Zr


# --------------------------------------------------------------------------
# grid maps and the successive approximations


@dataclass(frozen=True)
class GridMapND:
    """Map tabulated on a grid, extended by an identity component.

    Outside the grid box, or where ``|y| + |z| >= 2 s0``, the map returns the
    input coordinates listed in ``identity`` unchanged.
    """

    grid: BoxGrid
    values: np.ndarray
    identity: tuple[int, ...]
    dim_stable: int
    s0: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (*self.grid.shape, len(self.identity)):
            raise ValueError("values must have shape (*grid.shape, len(identity))")
        if not np.all(np.isfinite(values)):
            raise ValueError("grid map values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "identity", tuple(int(i) for i in self.identity))

    @classmethod
    def identity_map(cls, grid: BoxGrid, identity: Sequence[int], dim_stable: int,
                     s0: float) -> GridMapND:
        nodes = grid.nodes()
        return cls(grid, nodes[..., list(identity)], tuple(identity), dim_stable, s0)

    @property
    def width(self) -> int:
        return len(self.identity)

    def identity_zone(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        l1 = (np.linalg.norm(p[..., :self.dim_stable], axis=-1)
              + np.linalg.norm(p[..., self.dim_stable:], axis=-1))
        return ~self.grid.contains(p) | (l1 >= 2 * self.s0)

    def __call__(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        lead = p.shape[:-1]
        flat = p.reshape(-1, self.grid.dim)
        out = flat[:, list(self.identity)].copy()
        inside = ~self.identity_zone(flat)
        if np.any(inside):
            out[inside] = multilinear_interpolate(self.grid, self.values, flat[inside])
        return out.reshape(*lead, self.width)

    def with_values(self, values) -> GridMapND:
        return GridMapND(self.grid, values, self.identity, self.dim_stable, self.s0)

    def pointwise_distance(self, other: GridMapND) -> np.ndarray:
        if self.grid != other.grid or self.identity != other.identity:
            raise ValueError("grid maps live on different grids")
        return np.linalg.norm(self.values - other.values, axis=-1)

    def sup_distance(self, other: GridMapND) -> float:
        d = self.pointwise_distance(other)
        return float(np.max(d)) if d.size else 0.0


class ConjugacyProblem:
    """Grid, constants and the cached images ``T(node)``, ``T^-1(node)``."""

    def __init__(self, system: SplitSystem, constants: ConjugacyConstants, grid_count: int = 65):
        if grid_count < 3 or grid_count % 2 == 0:
            raise ValueError("grid_count must be odd and at least 3")
        self.system = system
        self.constants = constants
        self.grid = BoxGrid.symmetric(constants.s0, system.dim, grid_count)
        nodes = self.grid.nodes().reshape(-1, system.dim)
        self.nodes = nodes
        ys, zs = system.norms(nodes)
        self.l1 = ys + zs
        self.zone = ~self.grid.contains(nodes) | (self.l1 >= 2 * constants.s0)
        s0 = constants.s0
        ds, n = system.ds, system.dim
        self.T_nodes = system.T(nodes, s0) if system.split.dim_unstable else None
        self.Tinv_nodes = system.T_inv(nodes, s0) if ds else None
        self.stable_index = tuple(range(ds))
        self.unstable_index = tuple(range(ds, n))

    @property
    def linear(self) -> bool:
        return self.system.linear

    def psi0(self) -> GridMapND:
        return GridMapND.identity_map(self.grid, self.unstable_index, self.system.ds,
                                      self.constants.s0)

    def phi0(self) -> GridMapND:
        return GridMapND.identity_map(self.grid, self.stable_index, self.system.ds,
                                      self.constants.s0)

    def _finish(self, prev: GridMapND, flat_values: np.ndarray) -> tuple[GridMapND, float]:
        ident = self.nodes[:, list(prev.identity)]
        flat_values[self.zone] = ident[self.zone]
        if not np.all(np.isfinite(flat_values)):
            raise FloatingPointError("non-finite grid map value (grid too coarse?)")
        nxt = prev.with_values(flat_values.reshape(prev.values.shape))
        return nxt, nxt.sup_distance(prev)


def iterate_psi(problem: ConjugacyProblem, psi: GridMapND) -> tuple[GridMapND, float]:
    """``psi_{k+1}(w) = C^-1 psi_k(T(w))`` on the grid; returns the map and its gap."""
    if problem.linear:
        # T = L and psi_k = z is an exact fixed point; skip the round-off
        return psi, 0.0
    img = psi(problem.T_nodes)
    return problem._finish(psi, img @ problem.system.C_inv.T)


def iterate_phi(problem: ConjugacyProblem, phi: GridMapND) -> tuple[GridMapND, float]:
    """``Phi_{k+1}(w) = B Phi_k(T^-1(w))`` on the grid; returns the map and its gap."""
    if problem.linear:
        return phi, 0.0
    img = phi(problem.Tinv_nodes)
    return problem._finish(phi, img @ problem.system.B.T)


def assemble_H(phi: GridMapND | None, psi: GridMapND | None) -> GridMapND:
    """Stack ``H = (Phi, psi)``; either block may be absent (pure sink or source)."""
    parts = [m for m in (phi, psi) if m is not None]
    if not parts:
        raise ValueError("nothing to assemble")
    ref = parts[0]
    for m in parts[1:]:
        if m.grid != ref.grid or m.s0 != ref.s0 or m.dim_stable != ref.dim_stable:
            raise ValueError("Phi and psi live on different grids")
    values = np.concatenate([m.values for m in parts], axis=-1)
    identity = tuple(i for m in parts for i in m.identity)
    return GridMapND(ref.grid, values, identity, ref.dim_stable, ref.s0)


def _lattice_in_ball(radius: float, dim: int, per_axis: int) -> np.ndarray:
    return _ball_samples(radius, dim, per_axis)


def conjugacy_residual(H, field, split: SpectralSplit | None, constants: ConjugacyConstants,
                       region_radius: float, tol: float = 1e-10,
                       samples_per_axis: int = 33) -> float:
    """``sup |H(T p) - L H(p)|`` over a lattice in the ``region_radius`` ball.

    ``H`` is any callable on split coordinates (a :class:`GridMapND` or an
    analytic map).  ``T`` is the true time-1 flow, which agrees with the
    cutoff map on the region.
    """
    if region_radius > constants.s0 / 2 * (1 + 1e-12):
        raise ValueError("region_radius must not exceed s0/2 (cutoff inactive there)")
    system = field if isinstance(field, SplitSystem) else SplitSystem(field, split, tol)
    pts = _lattice_in_ball(region_radius, system.dim, samples_per_axis)
    Tp = system.T(pts, constants.s0)
    lhs = np.asarray(H(Tp), dtype=float)
    rhs = np.asarray(H(pts), dtype=float) @ system.L.T
    return float(np.max(np.linalg.norm(lhs - rhs, axis=-1)))


def fractional_time_residual(H, system: SplitSystem, t: float, region_radius: float,
                             samples_per_axis: int = 17) -> float:
    """Diagnostic ``sup |H(phi_t p) - e^{t D} H(p)|`` for a non-integer time ``t``.

    The construction only guarantees the ``t = 1`` identity; this measures how
    far the discrete conjugacy is from intertwining the whole flow.
    """
    pts = _lattice_in_ball(region_radius, system.dim, samples_per_axis)
    Et = matrix_exponential(t * system.split.block)
    lhs = np.asarray(H(system.flow(pts, t)), dtype=float)
    rhs = np.asarray(H(pts), dtype=float) @ Et.T
    return float(np.max(np.linalg.norm(lhs - rhs, axis=-1)))


@dataclass(frozen=True)
class ConjugacyRun:
    field: VectorFieldND
    fixed_point: np.ndarray
    split: SpectralSplit
    constants: ConjugacyConstants
    psi_iterates: tuple[GridMapND, ...]
    phi_iterates: tuple[GridMapND, ...]
    psi_gaps: tuple[float, ...]
    phi_gaps: tuple[float, ...]
    H: GridMapND
    residual: float
    converged: bool
    tol: float
    gap_tol: float
    problem: ConjugacyProblem = field(repr=False, compare=False)

    @property
    def iterations(self) -> int:
        return max(len(self.psi_gaps), len(self.phi_gaps))

    @property
    def grid(self) -> BoxGrid:
        return self.H.grid

    def gaps(self) -> list[float]:
        n = self.iterations
        pad = lambda g: list(g) + [0.0] * (n - len(g))
        return [max(p, q) for p, q in zip(pad(self.psi_gaps), pad(self.phi_gaps))]


def _holder_checks(iterates: Sequence[GridMapND], l1: np.ndarray,
                   constants: ConjugacyConstants, slack: float) -> list[bool]:
    out = []
    for j in range(1, len(iterates)):
        d = iterates[j].pointwise_distance(iterates[j - 1]).reshape(-1)
        out.append(bool(np.all(d <= constants.envelope(j, l1) + slack)))
    return out


def verify_holder_bound(run: ConjugacyRun, slack: float = HOLDER_SLACK) -> dict[str, list[bool]]:
    """Pointwise ``|g_j - g_{j-1}| <= M_H r^j (|y| + |z|)^delta + slack`` per ``j``."""
    l1 = run.problem.l1
    return {"psi": _holder_checks(run.psi_iterates, l1, run.constants, slack),
            "phi": _holder_checks(run.phi_iterates, l1, run.constants, slack)}


def gap_ratios(gaps: Sequence[float], floor: float) -> list[tuple[int, float]]:
    """``(j, gap_j / gap_{j-1})`` for ``j >= 2`` with both gaps above ``floor``.

    Iterates are numbered from 1, so ``gaps[j - 1]`` is ``sup|g_j - g_{j-1}|``.
    """
    out = []
    for j in range(2, len(gaps) + 1):
        prev, cur = gaps[j - 2], gaps[j - 1]
        if prev > floor and cur > floor:
            out.append((j, cur / prev))
    return out


def injectivity_violations(H: GridMapND, distance: float = 1e-9) -> int:
    """Number of node pairs whose images lie within ``distance``."""
    pts = H.values.reshape(-1, H.width)
    return len(cKDTree(pts).query_pairs(distance))


def conjugacy(field: VectorFieldND, guess=None, *, grid_count: int = 65, max_iter: int = 200,
              gap_tol: float = 1e-4, tol: float = 1e-10, a_target: float | None = None,
              hyperbolic_tol: float = 1e-9) -> ConjugacyRun:
    """Full construction of the time-1 conjugacy ``H`` near a hyperbolic fixed point."""
    if not (tol > 0 and gap_tol > 0 and max_iter >= 1):
        raise ValueError("tol and gap_tol must be positive, max_iter at least 1")
    x_star = find_fixed_point(field, guess)
    centred = field.recentered(x_star)
    split = SpectralSplit.from_matrix(jacobian_at(centred, np.zeros(field.dim)), hyperbolic_tol)
    system = SplitSystem(centred, split, tol)
    constants = calibrate_cutoff(system, a_target=a_target)
    problem = ConjugacyProblem(system, constants, grid_count)

    psi = problem.psi0() if split.dim_unstable else None
    phi = problem.phi0() if split.dim_stable else None
    psi_its, phi_its = ([psi] if psi else []), ([phi] if phi else [])
    psi_gaps: list[float] = []
    phi_gaps: list[float] = []
    converged = False
    for _ in range(max_iter):
        gap = 0.0
        if psi is not None:
            psi, g = iterate_psi(problem, psi)
            psi_its.append(psi)
            psi_gaps.append(g)
            gap = max(gap, g)
        if phi is not None:
            phi, g = iterate_phi(problem, phi)
            phi_its.append(phi)
            phi_gaps.append(g)
            gap = max(gap, g)
        if gap <= gap_tol:
            converged = True
            break
    H = assemble_H(phi, psi)
    residual = conjugacy_residual(H, system, None, constants, constants.s0 / 4)
    return ConjugacyRun(field=centred, fixed_point=x_star, split=split, constants=constants,
                        psi_iterates=tuple(psi_its), phi_iterates=tuple(phi_its),
                        psi_gaps=tuple(psi_gaps), phi_gaps=tuple(phi_gaps), H=H,
                        residual=residual, converged=converged, tol=tol, gap_tol=gap_tol,
                        problem=problem)
