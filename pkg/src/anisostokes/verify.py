"""Manufactured solutions, error norms, projections and the experiment drivers."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import stabilize
from .errors import AnisoStokesError, InvalidArgumentError
from .mesh import (
    TAG_IDS,
    Mesh,
    QualityReport,
    build_alternating_mesh,
    build_circle_mesh,
    mesh_quality_report,
)
from .solver import SolveReport, solve
from .spaces import FeSpace, build_space, cell_batches
from .stokes import (
    StokesSystem,
    assemble_stokes,
    constrain,
    pressure_gauge,
    stiffness_matrix,
)

# ---------------------------------------------------------------------------
# exact solution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExactSolution:
    """Divergence-free velocity from the stream function ``k^2 (x-1)^3``.

    ``k = (x-x0)^2 + (y-y0)^2 - r^2`` vanishes on the circle, and every term
    carries a factor ``(x-1)`` so that ``v``, ``p`` and ``d_x v`` vanish on
    the line ``x = 1``.
    """

    x0: float = 0.0
    y0: float = 0.0
    r: float = 0.4
    nu: float = 1.0

    def _parts(self, pts):
        pts = np.asarray(pts, float)
        X = pts[..., 0] - self.x0
        Y = pts[..., 1] - self.y0
        u = pts[..., 0] - 1.0
        k = X * X + Y * Y - self.r ** 2
        return X, Y, u, k

    def v(self, pts) -> np.ndarray:
        X, Y, u, k = self._parts(pts)
        v1 = 4 * k * Y * u ** 3
        v2 = -4 * k * X * u ** 3 - 3 * k * k * u ** 2
        return np.stack([v1, v2], axis=-1)

    def p(self, pts) -> np.ndarray:
        X, Y, u, k = self._parts(pts)
        return 8 * X * Y * u ** 3 + 12 * k * Y * u ** 2

    def grad_v(self, pts) -> np.ndarray:
        """``(..., 2, 2)`` with ``[..., c, j] = d_j v_c``."""
        X, Y, u, k = self._parts(pts)
        v1x = self.p(pts)
        v1y = 4 * u ** 3 * (2 * Y * Y + k)
        v2x = -4 * (2 * X * X + k) * u ** 3 - 24 * k * X * u ** 2 - 6 * k * k * u
        v2y = -v1x
        return np.stack([np.stack([v1x, v1y], -1), np.stack([v2x, v2y], -1)], -2)

    def grad_p(self, pts) -> np.ndarray:
        X, Y, u, k = self._parts(pts)
        px = 8 * Y * u ** 3 + 48 * X * Y * u ** 2 + 24 * k * Y * u
        py = 8 * X * u ** 3 + 12 * (2 * Y * Y + k) * u ** 2
        return np.stack([px, py], axis=-1)

    def laplace_v(self, pts) -> np.ndarray:
        X, Y, u, k = self._parts(pts)
        l1 = 32 * Y * u ** 3 + 48 * X * Y * u ** 2 + 24 * k * Y * u
        l2 = -32 * X * u ** 3 - (72 * X * X + 24 * Y * Y + 48 * k) * u ** 2 - 72 * k * X * u - 6 * k * k
        return np.stack([l1, l2], axis=-1)

    def f(self, pts) -> np.ndarray:
        return -self.nu * self.laplace_v(pts) + self.grad_p(pts)


def manufactured_solution(x0: float = 0.0, y0: float = 0.0, r: float = 0.4, nu: float = 1.0) -> ExactSolution:
    return ExactSolution(x0, y0, r, nu)


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------


def _fe_at_quadrature(b, coeffs):
    c = np.asarray(coeffs)[b.dofs]
    val = np.einsum("qa,ca->cq", b.phi, c)
    grad = np.einsum("cqai,ca->cqi", b.grad, c)
    return val, grad


def error_norms(m: Mesh, v1, v2, p, exact: ExactSolution) -> dict:
    """L2 and H1-seminorm errors of velocity and pressure over the meshed domain."""
    acc = dict(v_h1=0.0, v_l2=0.0, p_l2=0.0, p_h1=0.0)
    for b in cell_batches(m, "norm"):
        pts = b.points
        ve, gve = exact.v(pts), exact.grad_v(pts)
        pe, gpe = exact.p(pts), exact.grad_p(pts)
        for c, coeff in enumerate((v1, v2)):
            val, g = _fe_at_quadrature(b, coeff)
            acc["v_l2"] += float(np.sum((ve[..., c] - val) ** 2 * b.JxW))
            acc["v_h1"] += float(np.sum(((gve[..., c, :] - g) ** 2).sum(-1) * b.JxW))
        val, g = _fe_at_quadrature(b, p)
        acc["p_l2"] += float(np.sum((pe - val) ** 2 * b.JxW))
        acc["p_h1"] += float(np.sum(((gpe - g) ** 2).sum(-1) * b.JxW))
    return {
        "err_v_h1": math.sqrt(acc["v_h1"]),
        "err_v_l2": math.sqrt(acc["v_l2"]),
        "err_p_l2": math.sqrt(acc["p_l2"]),
        "err_p_h1": math.sqrt(acc["p_h1"]),
    }


def function_norms(m: Mesh, u) -> tuple:
    """``(||u||, ||grad u||)`` of a finite element function."""
    l2 = h1 = 0.0
    for b in cell_batches(m, "norm"):
        val, g = _fe_at_quadrature(b, u)
        l2 += float(np.sum(val ** 2 * b.JxW))
        h1 += float(np.sum((g ** 2).sum(-1) * b.JxW))
    return math.sqrt(l2), math.sqrt(h1)


def triple_norm(v1, v2, p, m: Mesh, nu: float = 1.0) -> float:
    """``(nu ||grad v||^2 + ||p||^2 + H^2 ||grad p||^2)^(1/2)``."""
    _, g1 = function_norms(m, v1)
    _, g2 = function_norms(m, v2)
    pl2, ph1 = function_norms(m, p)
    return math.sqrt(nu * (g1 ** 2 + g2 ** 2) + pl2 ** 2 + m.H ** 2 * ph1 ** 2)


def fit_order(H: Sequence[float], e: Sequence[float]) -> tuple:
    """Least-squares fit of ``e = c H^alpha`` in log-log space; returns ``(c, alpha)``."""
    H = np.asarray(H, float)
    e = np.asarray(e, float)
    if len(H) < 2 or len(H) != len(e):
        raise InvalidArgumentError("need at least two (H, e) pairs")
    if (H <= 0).any() or (e <= 0).any() or not np.isfinite(e).all():
        raise InvalidArgumentError("mesh sizes and errors must be positive")
    alpha, logc = np.polyfit(np.log(H), np.log(e), 1)
    return float(np.exp(logc)), float(alpha)


# ---------------------------------------------------------------------------
# Ritz projections
# ---------------------------------------------------------------------------


def _grad_rhs(space: FeSpace, grad_u: Callable) -> np.ndarray:
    out = np.zeros(space.ndofs)
    for b in cell_batches(space.mesh, "norm"):
        g = np.asarray(grad_u(b.points.reshape(-1, 2)), float).reshape(b.points.shape)
        np.add.at(out, b.dofs, np.einsum("cqi,cqai,cq->ca", g, b.grad, b.JxW))
    return out


def _integral_weights(space: FeSpace) -> np.ndarray:
    w = np.zeros(space.ndofs)
    for b in cell_batches(space.mesh, "norm"):
        np.add.at(w, b.dofs, np.einsum("qa,cq->ca", b.phi, b.JxW))
    return w


def _integral(space: FeSpace, u: Callable) -> float:
    s = 0.0
    for b in cell_batches(space.mesh, "norm"):
        s += float(np.sum(np.asarray(u(b.points.reshape(-1, 2))).reshape(b.JxW.shape) * b.JxW))
    return s


def ritz_project(space: FeSpace, u: Callable, grad_u: Callable, bc: str = "dirichlet") -> np.ndarray:
    """H1 projection of ``u``.

    ``"dirichlet"`` keeps the nodal values of ``u`` on the space's Dirichlet
    vertices; ``"mean-value"`` preserves the mean of ``u`` instead.
    """
    K = stiffness_matrix(space)
    rhs = _grad_rhs(space, grad_u)
    if bc == "dirichlet":
        fixed = space.dirichlet_mask
        if not fixed.any():
            raise InvalidArgumentError("Dirichlet Ritz projection needs at least one Dirichlet vertex")
        g = np.zeros(space.ndofs)
        g[fixed] = np.asarray(u(space.coords[fixed]), float)
        free = ~fixed
        Kff = K[free][:, free]
        x = g.copy()
        x[free], _ = solve(Kff, rhs[free] - K[free] @ g)
        return x
    if bc == "mean-value":
        w = _integral_weights(space)
        A = sp.bmat([[K, sp.csr_matrix(w[:, None])], [sp.csr_matrix(w[None, :]), None]], format="csr")
        b = np.r_[rhs, _integral(space, u)]
        x, _ = solve(A, b)
        return x[:-1]
    raise InvalidArgumentError(f"unknown boundary mode {bc!r}")


# ---------------------------------------------------------------------------
# solving the Stokes problem
# ---------------------------------------------------------------------------

DIRICHLET_SIDES = ("left", "top", "bottom")


@dataclass
class StokesSolution:
    mesh: Mesh
    v1: np.ndarray
    v2: np.ndarray
    p: np.ndarray
    report: SolveReport
    system: StokesSystem = field(repr=False)
    stab: Optional[stabilize.StabMatrix] = field(repr=False, default=None)

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.v1, self.v2, self.p])


def solve_stokes(
    m: Mesh,
    exact: ExactSolution,
    cfg: Optional[stabilize.StabConfig],
    dirichlet_sides: Sequence[str] = DIRICHLET_SIDES,
    interface_zero: bool = True,
    gauge: str = "none",
    tol: float = 1e-10,
) -> StokesSolution:
    """Assemble, stabilise, constrain and solve one Stokes problem.

    Velocity is prescribed from ``exact`` on ``dirichlet_sides`` and set to
    zero on interface chords; the remaining outer sides are outflow
    boundaries.  ``cfg=None`` solves without stabilisation.
    """
    tags = tuple(dirichlet_sides) + (("interface",) if interface_zero else ())
    V = build_space(m, tags)
    P = build_space(m)
    sys = assemble_stokes(V, P, exact.nu, exact.f)
    S = None
    if cfg is not None:
        S = stabilize.assemble(P, cfg)
        sys = sys.with_pressure_block(S.matrix)
    outer = build_space(m, dirichlet_sides).dirichlet_mask
    inner = V.dirichlet_mask & ~outer
    verts = np.r_[np.flatnonzero(outer), np.flatnonzero(inner)]
    vals = np.zeros((len(verts), 2))
    vals[: outer.sum()] = exact.v(m.vertices[outer])
    sys = constrain(sys, np.r_[verts, verts + sys.n_v], np.r_[vals[:, 0], vals[:, 1]])
    has_outflow = bool(np.isin(m.edge_tag[m.boundary_edges], _outflow_tags(tags)).any())
    sys = pressure_gauge(sys, gauge, has_outflow=has_outflow)
    x, rep = solve(sys.matrix, sys.rhs, tol)
    x = sys.postprocess(x)
    v1, v2, p = sys.split(x)
    return StokesSolution(m, v1, v2, p, rep, sys, S)


def _outflow_tags(dirichlet: Sequence[str]) -> list:
    return [TAG_IDS[t] for t in ("left", "right", "bottom", "top", "interface") if t not in dirichlet]


def example1_mesh(H: float, ratio: float = 1e-3) -> Mesh:
    n = int(round(2.0 / H))
    return build_alternating_mesh(n, ratio, (-1.0, 1.0, -1.0, 1.0))


def example1(H: float, cfg: stabilize.StabConfig, ratio: float = 1e-3, exact: Optional[ExactSolution] = None):
    """Alternating anisotropic mesh on [-1,1]^2; returns ``(solution, norms)``."""
    exact = exact or manufactured_solution()
    m = example1_mesh(H, ratio)
    sol = solve_stokes(m, exact, cfg)
    return sol, error_norms(m, sol.v1, sol.v2, sol.p, exact)


def example2(H: float, cfg: stabilize.StabConfig, x0: float = 0.0, y0: float = 0.0, r: float = 0.4):
    """Circular obstacle resolved by cut patches; returns ``(solution, norms)``."""
    exact = manufactured_solution(x0, y0, r)
    m = build_circle_mesh(H, x0, y0, r)
    sol = solve_stokes(m, exact, cfg)
    return sol, error_norms(m, sol.v1, sol.v2, sol.p, exact)


NORM_KEYS = ("err_v_h1", "err_v_l2", "err_p_l2", "err_p_h1")


@dataclass
class ConvergenceRecord:
    H: list
    errors: dict  # key -> list over levels
    orders: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(a <= b for a, b in zip(self.H, self.H[1:])):
            raise InvalidArgumentError("mesh sizes must be strictly decreasing")
        if len(self.H) >= 2 and not self.orders:
            for k, e in self.errors.items():
                self.constants[k], self.orders[k] = fit_order(self.H, e)

    def rows(self) -> list:
        return [[h] + [self.errors[k][i] for k in NORM_KEYS] for i, h in enumerate(self.H)]


def convergence(levels: Sequence[float], run: Callable[[float], dict]) -> ConvergenceRecord:
    levels = sorted(levels, reverse=True)
    errs = {k: [] for k in NORM_KEYS}
    for H in levels:
        e = run(H)
        for k in NORM_KEYS:
            errs[k].append(e[k])
    return ConvergenceRecord(list(levels), errs)


# ---------------------------------------------------------------------------
# obstacle position sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepPoint:
    x0: float
    p_h1_norm: float
    quality: Optional[QualityReport]
    residual: float
    error: str = ""


def sweep_positions(start: float, stop: float, step: float) -> np.ndarray:
    if step <= 0:
        raise InvalidArgumentError("sweep step must be positive")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return np.round(start + step * np.arange(n), 12)


def sweep_point(H: float, x0: float, cfg: stabilize.StabConfig, y0: float = 0.0, r: float = 0.4) -> SweepPoint:
    try:
        exact = manufactured_solution(x0, y0, r)
        m = build_circle_mesh(H, x0, y0, r)
        q = mesh_quality_report(m)
        sol = solve_stokes(m, exact, cfg)
        _, ph1 = function_norms(m, sol.p)
        return SweepPoint(float(x0), ph1, q, sol.report.residual)
    except AnisoStokesError as exc:
        return SweepPoint(float(x0), float("nan"), None, float("nan"), f"{type(exc).__name__}: {exc}")


def x0_sweep(H: float, x0_values, cfg: stabilize.StabConfig, y0: float = 0.0, r: float = 0.4, threads: int = 1) -> list:
    """Solve the obstacle problem for each ``x0``; failures are recorded, not raised."""
    x0_values = list(x0_values)
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(lambda x: sweep_point(H, x, cfg, y0, r), x0_values))
    return [sweep_point(H, x, cfg, y0, r) for x in x0_values]


def max_relative_jump(values: Sequence[float]) -> float:
    v = np.asarray(values, float)
    return float(np.max(np.abs(np.diff(v)) / np.minimum(np.abs(v[:-1]), np.abs(v[1:])))) if len(v) > 1 else 0.0
