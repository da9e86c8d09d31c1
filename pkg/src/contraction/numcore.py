"""Shared numerical kernels.

Uniform 1-D samples with cumulative quadrature and Hermite interpolation,
an adaptive Dormand-Prince integrator for autonomous flows, the matrix
exponential, a stable/unstable block split of small real matrices, Sylvester
solves, spectral norms and box grids with multilinear interpolation.

Everything here is a pure function of its inputs.  Matrices are plain
``numpy`` arrays; dimensions are capped at 3 where noted.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

__all__ = [
    "SampledFunction1D",
    "BoxGrid",
    "IntegrationError",
    "StepSizeUnderflow",
    "SpectrumError",
    "cumulative_integral",
    "interpolate",
    "integrate_flow",
    "matrix_exponential",
    "real_schur_split",
    "solve_sylvester",
    "operator_norm",
    "singular_values",
    "multilinear_interpolate",
    "format_real",
]

DEFAULT_NODES = 1025


def format_real(value: float) -> str:
    """17 significant digits; enough to round-trip a double."""
    return f"{float(value):.17g}"


# --------------------------------------------------------------------------
# 1-D samples


@dataclass(frozen=True, eq=False)
class SampledFunction1D:
    """Values of a function at ``n_nodes`` uniform nodes of ``[x_start, x_end]``."""

    x_start: float
    x_end: float
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 1:
            raise ValueError("values must be one-dimensional")
        n = values.size
        if n < 3 or n % 2 == 0:
            raise ValueError(f"n_nodes must be odd and >= 3, got {n}")
        if not np.all(np.isfinite(values)):
            raise ValueError("sampled values must be finite")
        if not (math.isfinite(self.x_start) and math.isfinite(self.x_end)):
            raise ValueError("interval endpoints must be finite")
        if not self.x_end > self.x_start:
            raise ValueError("x_end must exceed x_start")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "x_start", float(self.x_start))
        object.__setattr__(self, "x_end", float(self.x_end))

    @classmethod
    def from_function(cls, fn: Callable[[np.ndarray], np.ndarray], x_start: float,
                      x_end: float, n_nodes: int = DEFAULT_NODES) -> SampledFunction1D:
        nodes = uniform_nodes(x_start, x_end, n_nodes)
        return cls(x_start, x_end, np.broadcast_to(fn(nodes), nodes.shape))

    @classmethod
    def constant(cls, value: float, x_start: float, x_end: float,
                 n_nodes: int = DEFAULT_NODES) -> SampledFunction1D:
        return cls(x_start, x_end, np.full(n_nodes, float(value)))

    @property
    def n_nodes(self) -> int:
        return self.values.size

    @property
    def spacing(self) -> float:
        return (self.x_end - self.x_start) / (self.n_nodes - 1)

    @property
    def nodes(self) -> np.ndarray:
        return uniform_nodes(self.x_start, self.x_end, self.n_nodes)

    def same_grid(self, other: SampledFunction1D) -> bool:
        return (self.x_start, self.x_end, self.n_nodes) == (
            other.x_start, other.x_end, other.n_nodes)

    def with_values(self, values) -> SampledFunction1D:
        return SampledFunction1D(self.x_start, self.x_end, values)

    def sup_distance(self, other: SampledFunction1D) -> float:
        if not self.same_grid(other):
            raise ValueError("functions live on different grids")
        return float(np.max(np.abs(self.values - other.values)))

    def __call__(self, x):
        return interpolate(self, x)

    def to_csv(self, header: tuple[str, str] = ("x", "value")) -> str:
        buf = io.StringIO()
        buf.write(f"{header[0]},{header[1]}\n")
        for x, v in zip(self.nodes, self.values):
            buf.write(f"{format_real(x)},{format_real(v)}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> SampledFunction1D:
        rows = [line.split(",") for line in text.strip().splitlines()[1:]]
        xs = np.array([float(r[0]) for r in rows])
        return cls(xs[0], xs[-1], np.array([float(r[1]) for r in rows]))


def uniform_nodes(x_start: float, x_end: float, n_nodes: int) -> np.ndarray:
    i = np.arange(n_nodes, dtype=float)
    nodes = x_start + i * ((x_end - x_start) / (n_nodes - 1))
    nodes[-1] = x_end
    return nodes


def cumulative_integral(f: SampledFunction1D) -> SampledFunction1D:
    """``F(node_k) = integral of f from x_start to node_k``, ``F(x_start) = 0``.

    Even nodes accumulate composite Simpson panels.  Each odd node adds the
    integral over its left half panel from the cubic through the four
    nearest nodes, so every node is exact for cubic integrands.
    """
    y = f.values
    h = f.spacing
    n = y.size
    F = np.zeros(n)
    panels = h / 3.0 * (y[0:-2:2] + 4.0 * y[1:-1:2] + y[2::2])
    F[2::2] = np.cumsum(panels)
    if n == 3:
        F[1] = h / 12.0 * (5.0 * y[0] + 8.0 * y[1] - y[2])
        return f.with_values(F)
    half = np.empty(n // 2)
    half[0] = h / 24.0 * (9.0 * y[0] + 19.0 * y[1] - 5.0 * y[2] + y[3])
    k = np.arange(2, n - 1, 2)
    half[1:] = h / 24.0 * (-y[k - 1] + 13.0 * y[k] + 13.0 * y[k + 1] - y[k + 2])
    F[1::2] = F[0:-1:2] + half
    return f.with_values(F)


def _node_slopes(y: np.ndarray, h: float) -> np.ndarray:
    n = y.size
    d = np.empty(n)
    if n < 5:
        d[1:-1] = (y[2:] - y[:-2]) / (2 * h)
        d[0] = (-3 * y[0] + 4 * y[1] - y[2]) / (2 * h)
        d[-1] = (3 * y[-1] - 4 * y[-2] + y[-3]) / (2 * h)
        return d
    # fourth-order stencils: exact on quartics, so Hermite cubics reproduce cubics
    d[2:-2] = (y[:-4] - 8 * y[1:-3] + 8 * y[3:-1] - y[4:]) / (12 * h)
    d[0] = (-25 * y[0] + 48 * y[1] - 36 * y[2] + 16 * y[3] - 3 * y[4]) / (12 * h)
    d[1] = (-3 * y[0] - 10 * y[1] + 18 * y[2] - 6 * y[3] + y[4]) / (12 * h)
    d[-1] = (25 * y[-1] - 48 * y[-2] + 36 * y[-3] - 16 * y[-4] + 3 * y[-5]) / (12 * h)
    d[-2] = (3 * y[-1] + 10 * y[-2] - 18 * y[-3] + 6 * y[-4] - y[-5]) / (12 * h)
    return d


def interpolate(f: SampledFunction1D, x):
    """Piecewise cubic Hermite value of ``f`` at ``x`` (scalar or array)."""
    xa = np.asarray(x, dtype=float)
    if np.any(xa < f.x_start) or np.any(xa > f.x_end) or not np.all(np.isfinite(xa)):
        raise ValueError(f"x outside [{f.x_start}, {f.x_end}]")
    h = f.spacing
    y = f.values
    d = _node_slopes(y, h)
    s = (xa - f.x_start) / h
    i = np.clip(np.floor(s).astype(int), 0, y.size - 2)
    t = s - i
    t2, t3 = t * t, t * t * t
    h00 = 2 * t3 - 3 * t2 + 1
    h10 = t3 - 2 * t2 + t
    h01 = -2 * t3 + 3 * t2
    h11 = t3 - t2
    out = h00 * y[i] + h10 * h * d[i] + h01 * y[i + 1] + h11 * h * d[i + 1]
    # exact reproduction at nodes
    exact = t == 0.0
    out = np.where(exact, y[i], out)
    out = np.where(t == 1.0, y[np.minimum(i + 1, y.size - 1)], out)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# adaptive Dormand-Prince 5(4)


class IntegrationError(RuntimeError):
    """The flow could not be integrated (escape, stiffness, non-finite state)."""


class StepSizeUnderflow(IntegrationError):
    pass


_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200,
                   187 / 2100, 1 / 40])
_DP_E = _DP_B - _DP_B4


def _safe_rhs(rhs, x):
    from .exprparse import DomainError

    try:
        k = np.asarray(rhs(x), dtype=float)
    except DomainError:
        return None
    if k.shape != x.shape or not np.all(np.isfinite(k)):
        return None
    return k


def integrate_flow(rhs: Callable[[np.ndarray], np.ndarray], x0, t: float,
                   tol: float = 1e-10, max_steps: int = 100_000) -> np.ndarray:
    """State at time ``t`` of ``x' = rhs(x)`` from ``x0``.

    ``x0`` may be a single point of shape ``(n,)`` or a batch ``(m, n)``;
    a batch shares one step sequence, controlled by the worst member.  Local
    error is held below ``tol`` in the mixed absolute/relative max norm.
    ``t`` may be negative.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    x = np.array(x0, dtype=float)
    if t == 0:
        return x
    if not np.all(np.isfinite(x)):
        raise IntegrationError("non-finite initial state")
    direction = 1.0 if t > 0 else -1.0
    span = abs(float(t))

    def f(state):
        k = _safe_rhs(rhs, state)
        return None if k is None else direction * k

    k1 = f(x)
    if k1 is None:
        raise IntegrationError("field undefined at the initial state")

    def err_scale(a, b=None):
        m = np.abs(a) if b is None else np.maximum(np.abs(a), np.abs(b))
        return tol + tol * m

    # initial step (Hairer, Norsett & Wanner II.4)
    sc = err_scale(x)
    d0 = np.max(np.abs(x) / sc)
    d1 = np.max(np.abs(k1) / sc)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    k_probe = f(x + h0 * k1)
    if k_probe is None:
        h = h0 * 1e-3
    else:
        d2 = np.max(np.abs(k_probe - k1) / sc) / h0
        dm = max(d1, d2)
        h1 = max(1e-6, h0 * 1e-3) if dm <= 1e-15 else (0.01 / dm) ** 0.2
        h = min(100 * h0, h1, span)

    elapsed = 0.0
    for _ in range(max_steps):
        if elapsed >= span:
            break
        last = elapsed + h >= span
        if last:
            h = span - elapsed
        ks = [k1]
        bad = False
        for s in range(1, 7):
            with np.errstate(over="ignore", invalid="ignore"):
                stage = x + h * sum(a * k for a, k in zip(_DP_A[s], ks) if a != 0.0)
            k = f(stage)
            if k is None:
                bad = True
                break
            ks.append(k)
        if bad:
            err = math.inf
        else:
            x_new = x + h * sum(b * k for b, k in zip(_DP_B, ks) if b != 0.0)
            err_vec = h * sum(e * k for e, k in zip(_DP_E, ks))
            err = float(np.max(np.abs(err_vec) / err_scale(x, x_new)))
        if err <= 1.0:
            elapsed = span if last else elapsed + h
            x = x_new
            k1 = ks[6]
            factor = 5.0 if err == 0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
            h *= factor
        else:
            factor = 0.2 if not math.isfinite(err) else max(0.2, 0.9 * err ** -0.2)
            h *= factor
            if h <= 1e-14 * max(1.0, span):
                raise StepSizeUnderflow(
                    f"step size underflow at t={direction * elapsed:.6g}; "
                    "trajectory is stiff or escaping")
    else:
        raise IntegrationError(f"exceeded {max_steps} steps")
    if not np.all(np.isfinite(x)):
        raise IntegrationError("non-finite state")
    return x


# --------------------------------------------------------------------------
# matrices

_PADE = {
    3: (120.0, 60.0, 12.0, 1.0),
    5: (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0),
    7: (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0),
    9: (17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
        2162160.0, 110880.0, 3960.0, 90.0, 1.0),
    13: (64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
         1187353796428800.0, 129060195264000.0, 10559470521600.0, 670442572800.0,
         33522128640.0, 1323241920.0, 40840800.0, 960960.0, 16380.0, 182.0, 1.0),
}
_THETA = {3: 1.495585217958292e-2, 5: 2.539398330063230e-1, 7: 9.504178996162932e-1,
          9: 2.097847961257068e0, 13: 5.371920351148152e0}


def _pade_uv(A: np.ndarray, m: int):
    b = _PADE[m]
    n = A.shape[0]
    ident = np.eye(n)
    A2 = A @ A
    if m == 13:
        A4 = A2 @ A2
        A6 = A4 @ A2
        U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
                 + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident)
        V = A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2) + b[6] * A6 + b[4] * A4 \
            + b[2] * A2 + b[0] * ident
        return U, V
    powers = [ident, A2]
    for _ in range(2, (m + 1) // 2):
        powers.append(powers[-1] @ A2)
    U = sum(b[2 * j + 1] * powers[j] for j in range((m + 1) // 2))
    V = sum(b[2 * j] * powers[j] for j in range((m + 1) // 2))
    return A @ U, V


def matrix_exponential(M) -> np.ndarray:
    """``e^M`` by Pade scaling and squaring (Higham 2005)."""
    A = np.array(M, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("matrix_exponential needs a square matrix")
    if A.size == 0:
        return A.copy()
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix entries must be finite")
    norm1 = np.max(np.sum(np.abs(A), axis=0))
    squarings = 0
    for m in (3, 5, 7, 9):
        if norm1 <= _THETA[m]:
            U, V = _pade_uv(A, m)
            break
    else:
        m = 13
        if norm1 > _THETA[13]:
            squarings = max(0, int(math.ceil(math.log2(norm1 / _THETA[13]))))
        U, V = _pade_uv(A / 2.0**squarings, 13)
    R = np.linalg.solve(V - U, V + U)
    for _ in range(squarings):
        R = R @ R
    return R


def singular_values(M) -> np.ndarray:
    """Singular values, descending, by one-sided Jacobi rotations."""
    A = np.array(M, dtype=float)
    if A.ndim != 2:
        raise ValueError("need a matrix")
    if A.size == 0:
        return np.zeros(0)
    if A.shape[0] < A.shape[1]:
        A = A.T.copy()
    n = A.shape[1]
    eps = np.finfo(float).eps
    for _ in range(100):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = A[:, i] @ A[:, i]
                beta = A[:, j] @ A[:, j]
                gamma = A[:, i] @ A[:, j]
                if abs(gamma) <= eps * math.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                if abs(beta - alpha) > 1e150 * abs(gamma):
                    # tiny rotation; the closed form would overflow
                    t = gamma / (beta - alpha)
                else:
                    zeta = (beta - alpha) / (2.0 * gamma)
                    t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                ai = A[:, i].copy()
                A[:, i] = c * ai - s * A[:, j]
                A[:, j] = s * ai + c * A[:, j]
        if not rotated:
            break
    return np.sort(np.sqrt(np.sum(A * A, axis=0)))[::-1]


def operator_norm(M) -> float:
    """Spectral norm (largest singular value); 0 for an empty matrix."""
    sv = singular_values(M)
    return float(sv[0]) if sv.size else 0.0


def solve_sylvester(A, B, C) -> np.ndarray:
    """Solve ``A X - X B = C`` through the vectorised (Kronecker) system."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    C = np.asarray(C, dtype=float)
    p, q = C.shape
    if p == 0 or q == 0:
        return np.zeros((p, q))
    K = np.kron(np.eye(q), A) - np.kron(B.T, np.eye(p))
    vec = np.linalg.solve(K, C.reshape(-1, order="F"))
    return vec.reshape((p, q), order="F")


class SpectrumError(ValueError):
    """Spectrum unsuitable for a stable/unstable split."""


def _canonical_block_basis(T: np.ndarray) -> np.ndarray:
    """Real basis putting a small block in real canonical (normal) form.

    Real eigenvalues get unit eigenvectors; a complex pair ``a +- ib`` gets
    ``[Re v, Im v]`` so the block becomes ``[[a, b], [-b, a]]``.  Defective
    blocks keep their Schur form with the coupling scaled down.
    """
    k = T.shape[0]
    if k <= 1:
        return np.eye(k)
    vals, vecs = np.linalg.eig(T)
    order = np.lexsort((-vals.imag, vals.real))
    columns = []
    used = np.zeros(k, dtype=bool)
    for idx in order:
        if used[idx]:
            continue
        lam, v = vals[idx], vecs[:, idx]
        if abs(lam.imag) <= 1e-12 * max(1.0, abs(lam)):
            u = v.real / np.linalg.norm(v.real)
            u = u if u[np.argmax(np.abs(u))] > 0 else -u
            columns.append(u)
            used[idx] = True
        else:
            if lam.imag < 0:
                continue
            # fix the phase so the real part carries the largest entry
            v = v / v[np.argmax(np.abs(v))]
            v = v / np.linalg.norm(v)
            columns.extend([v.real, v.imag])
            used[idx] = True
            conj = np.argmin(np.abs(vals - np.conj(lam)) + used * 1e300)
            used[conj] = True
    if len(columns) == k:
        V = np.column_stack(columns)
        if np.linalg.cond(V) < 1e6:
            return V
    return np.diag(1e-3 ** np.arange(k))


def real_schur_split(A, tol: float = 1e-9):
    """Split ``A`` into a stable block ``P`` and an unstable block ``Q``.

    Returns ``(P, Q, basis, basis_inv)`` with ``basis_inv @ A @ basis ==
    diag(P, Q)``.  A real Schur form ordered stable-first is decoupled by a
    Sylvester solve, then each block is brought to real canonical form.
    Either block may be empty.
    """
    A = np.array(A, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n) or not 1 <= n <= 3:
        raise ValueError("real_schur_split needs a square matrix of size 1..3")
    T, Z, sdim = scipy.linalg.schur(A, output="real", sort=lambda re, im: re < 0)
    eig_re = np.real(np.linalg.eigvals(T))
    if np.any(np.abs(eig_re) <= tol):
        raise SpectrumError("spectrum has eigenvalues with (near) zero real part")
    k = int(sdim)
    T11, T12, T22 = T[:k, :k], T[:k, k:], T[k:, k:]
    X = solve_sylvester(T11, T22, -T12)
    S = np.eye(n)
    S[:k, k:] = X
    S_inv = np.eye(n)
    S_inv[:k, k:] = -X
    VP = _canonical_block_basis(T11)
    VQ = _canonical_block_basis(T22)
    V = scipy.linalg.block_diag(VP, VQ)
    V_inv = scipy.linalg.block_diag(np.linalg.inv(VP), np.linalg.inv(VQ))
    basis = Z @ S @ V
    basis_inv = V_inv @ S_inv @ Z.T
    if np.linalg.cond(basis) > 1e8:
        raise SpectrumError("change of basis is ill-conditioned (condition number > 1e8)")
    D = basis_inv @ A @ basis
    P = D[:k, :k].copy()
    Q = D[k:, k:].copy()
    return P, Q, basis, basis_inv


# --------------------------------------------------------------------------
# box grids


@dataclass(frozen=True)
class BoxGrid:
    """Uniform tensor grid on a box in at most three dimensions."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    counts: tuple[int, ...]
    _axes: tuple[np.ndarray, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lower = tuple(float(v) for v in self.lower)
        upper = tuple(float(v) for v in self.upper)
        counts = tuple(int(c) for c in self.counts)
        if not (len(lower) == len(upper) == len(counts)) or not 1 <= len(lower) <= 3:
            raise ValueError("grid dimension must be 1..3 with matching bounds")
        if any(c < 2 for c in counts) or any(u <= lo for lo, u in zip(lower, upper)):
            raise ValueError("need at least two nodes per axis and upper > lower")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "counts", counts)
        axes = []
        for lo, up, c in zip(lower, upper, counts):
            mid, half = 0.5 * (lo + up), 0.5 * (up - lo)
            i = np.arange(c, dtype=float)
            # centred form keeps the midpoint node exact (0.0 on symmetric grids)
            axes.append(mid + half * ((2 * i - (c - 1)) / (c - 1)))
        object.__setattr__(self, "_axes", tuple(axes))

    @classmethod
    def symmetric(cls, radius: float, dim: int, count: int) -> BoxGrid:
        return cls((-radius,) * dim, (radius,) * dim, (count,) * dim)

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.counts

    @property
    def axes(self) -> tuple[np.ndarray, ...]:
        return self._axes

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((u - lo) / (c - 1) for lo, u, c in zip(self.lower, self.upper, self.counts))

    def nodes(self) -> np.ndarray:
        """Node coordinates, shape ``(*counts, dim)``."""
        mesh = np.meshgrid(*self._axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        lo = np.array(self.lower)
        up = np.array(self.upper)
        return np.all((p >= lo) & (p <= up), axis=-1)


def multilinear_interpolate(grid: BoxGrid, values: np.ndarray, points) -> np.ndarray:
    """Interpolate node ``values`` (shape ``(*counts, m)``) at ``points`` (…, dim).

    Points are clamped into the box; callers handle the outside.
    """
    p = np.asarray(points, dtype=float)
    lead = p.shape[:-1]
    p = p.reshape(-1, grid.dim)
    m = values.shape[-1]
    idx = []
    wts = []
    for d in range(grid.dim):
        c = grid.counts[d]
        s = (p[:, d] - grid.lower[d]) / (grid.upper[d] - grid.lower[d]) * (c - 1)
        s = np.clip(s, 0.0, c - 1.0)
        r = np.round(s)
        s = np.where(np.abs(s - r) < 1e-12, r, s)
        i = np.clip(np.floor(s).astype(int), 0, c - 2)
        idx.append(i)
        wts.append(s - i)
    out = np.zeros((p.shape[0], m))
    for corner in range(2 ** grid.dim):
        w = np.ones(p.shape[0])
        index = []
        for d in range(grid.dim):
            bit = (corner >> d) & 1
            w = w * (wts[d] if bit else 1.0 - wts[d])
            index.append(idx[d] + bit)
        nz = w != 0.0
        if np.any(nz):
            out[nz] += w[nz, None] * values[tuple(ix[nz] for ix in index)]
    return out.reshape(*lead, m)
