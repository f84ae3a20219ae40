"""Saddle-point assembly for the Stokes equations with equal-order elements.

Unknowns are ordered ``[v1 | v2 | p]``.  The bilinear form is

    nu (grad v, grad phi) - (p, div phi) + (div v, psi)

which gives the block matrix ``[[nu K, 0, -D1^T], [0, nu K, -D2^T], [D1, D2, S]]``
with ``D_c[j, i] = int psi_j d_c phi_i``.  The outflow condition
``nu d_n v - p n = 0`` is natural for this form and needs no boundary terms.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.io
import scipy.sparse as sp

from .errors import InvalidArgumentError
from .spaces import FeSpace, cell_batches


def _scatter(rows, cols, vals, shape) -> sp.csr_matrix:
    return sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=shape).tocsr()


def stiffness_matrix(space: FeSpace) -> sp.csr_matrix:
    n = space.ndofs
    parts = []
    for b in cell_batches(space.mesh):
        loc = np.einsum("cqai,cqbi,cq->cab", b.grad, b.grad, b.JxW)
        parts.append((b.dofs, loc))
    return _assemble_square(parts, n)


def mass_matrix(space: FeSpace) -> sp.csr_matrix:
    n = space.ndofs
    parts = []
    for b in cell_batches(space.mesh, "norm"):
        loc = np.einsum("qa,qb,cq->cab", b.phi, b.phi, b.JxW)
        parts.append((b.dofs, loc))
    return _assemble_square(parts, n)


def divergence_matrices(space_v: FeSpace, space_p: FeSpace):
    """``(D1, D2)`` with ``D_c[j, i] = int psi_j d_c phi_i``."""
    rows, cols, v1, v2 = [], [], [], []
    for b in cell_batches(space_v.mesh):
        nb = b.dofs.shape[1]
        d1 = np.einsum("qb,cqa,cq->cba", b.phi, b.grad[..., 0], b.JxW)
        d2 = np.einsum("qb,cqa,cq->cba", b.phi, b.grad[..., 1], b.JxW)
        rows.append(np.repeat(b.dofs[:, :, None], nb, axis=2).ravel())
        cols.append(np.repeat(b.dofs[:, None, :], nb, axis=1).ravel())
        v1.append(d1.ravel())
        v2.append(d2.ravel())
    shape = (space_p.ndofs, space_v.ndofs)
    r, c = np.concatenate(rows), np.concatenate(cols)
    return _scatter(r, c, np.concatenate(v1), shape), _scatter(r, c, np.concatenate(v2), shape)


def _assemble_square(parts, n) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for dofs, loc in parts:
        nb = dofs.shape[1]
        rows.append(np.repeat(dofs[:, :, None], nb, axis=2).ravel())
        cols.append(np.repeat(dofs[:, None, :], nb, axis=1).ravel())
        vals.append(loc.ravel())
    return _scatter(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (n, n))


def load_vector(space: FeSpace, f: Callable) -> np.ndarray:
    """``(f_c, phi_i)`` for both components; ``f(points (n,2)) -> (n,2)``."""
    out = np.zeros((2, space.ndofs))
    for b in cell_batches(space.mesh, "norm"):
        fx = np.asarray(f(b.points.reshape(-1, 2)), float).reshape(b.points.shape)
        for c in range(2):
            loc = np.einsum("cq,qa,cq->ca", fx[..., c], b.phi, b.JxW)
            np.add.at(out[c], b.dofs, loc)
    return out


@dataclass
class StokesSystem:
    """Assembled Stokes matrix with right-hand side and constraints."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    n_v: int
    n_p: int
    nu: float
    K: sp.csr_matrix
    D1: sp.csr_matrix
    D2: sp.csr_matrix
    space_v: FeSpace = field(repr=False, default=None)
    space_p: FeSpace = field(repr=False, default=None)
    constrained: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gauge: str = "none"
    stab: Optional[sp.csr_matrix] = None

    @property
    def ndofs(self) -> int:
        return 2 * self.n_v + self.n_p

    def split(self, x):
        n = self.n_v
        return x[:n], x[n : 2 * n], x[2 * n :]

    def with_pressure_block(self, S: sp.spmatrix) -> "StokesSystem":
        """Add a stabilisation matrix to the pressure-pressure block."""
        if S.shape != (self.n_p, self.n_p):
            raise InvalidArgumentError("stabilisation matrix does not match the pressure space")
        n = 2 * self.n_v
        big = sp.block_diag([sp.csr_matrix((n, n)), S], format="csr")
        return replace(self, matrix=(self.matrix + big).tocsr(), stab=S.tocsr())

    def form(self, v1, v2, p) -> float:
        """``A(v,p)(v,p)`` evaluated with the unconstrained blocks."""
        x = np.concatenate([v1, v2, p])
        return float(x @ (self.raw_matrix() @ x))

    def raw_matrix(self) -> sp.csr_matrix:
        nuK = self.nu * self.K
        Z = sp.csr_matrix(self.K.shape)
        S = self.stab if self.stab is not None else sp.csr_matrix((self.n_p, self.n_p))
        return sp.bmat(
            [[nuK, Z, -self.D1.T], [Z, nuK, -self.D2.T], [self.D1, self.D2, S]], format="csr"
        )

    def postprocess(self, x: np.ndarray) -> np.ndarray:
        """Apply the pressure gauge to a solution vector."""
        if self.gauge != "mean-zero-shift":
            return x
        x = x.copy()
        n = 2 * self.n_v
        w = _pressure_weights(self.space_p)
        x[n:] -= (w @ x[n:]) / w.sum()
        return x


def assemble_stokes(space_v: FeSpace, space_p: FeSpace, nu: float = 1.0, f: Optional[Callable] = None) -> StokesSystem:
    if space_v.mesh is not space_p.mesh:
        raise InvalidArgumentError("velocity and pressure spaces must share one mesh")
    if nu <= 0:
        raise InvalidArgumentError("viscosity must be positive")
    K = stiffness_matrix(space_v)
    D1, D2 = divergence_matrices(space_v, space_p)
    nv, npr = space_v.ndofs, space_p.ndofs
    Z = sp.csr_matrix((nv, nv))
    A = sp.bmat(
        [[nu * K, Z, -D1.T], [Z, nu * K, -D2.T], [D1, D2, sp.csr_matrix((npr, npr))]], format="csr"
    )
    b = np.zeros(2 * nv + npr)
    if f is not None:
        F = load_vector(space_v, f)
        b[:nv], b[nv : 2 * nv] = F[0], F[1]
    return StokesSystem(A, b, nv, npr, nu, K, D1, D2, space_v, space_p)


def constrain(sys: StokesSystem, dofs, values) -> StokesSystem:
    """Row replacement plus column elimination for the global ``dofs``."""
    dofs = np.asarray(dofs, dtype=np.int64)
    values = np.broadcast_to(np.asarray(values, float), dofs.shape)
    n = sys.ndofs
    mask = np.zeros(n, dtype=bool)
    mask[dofs] = True
    u = np.zeros(n)
    u[dofs] = values
    keep = sp.diags((~mask).astype(float))
    A = (keep @ sys.matrix @ keep + sp.diags(mask.astype(float))).tocsr()
    A.eliminate_zeros()
    b = sys.rhs - sys.matrix @ u
    b[mask] = u[mask]
    allc = np.concatenate([sys.constrained, dofs])
    allv = np.concatenate([sys.values, values])
    return replace(sys, matrix=A, rhs=b, constrained=allc, values=allv)


def apply_dirichlet(sys: StokesSystem, g: Optional[Callable] = None, mask=None) -> StokesSystem:
    """Constrain both velocity components on the space's Dirichlet vertices.

    ``g(points) -> (n, 2)`` gives the boundary values (zero if omitted); an
    explicit vertex ``mask`` overrides the space's own.  Apply after any
    stabilisation has been added.
    """
    space = sys.space_v
    mask = space.dirichlet_mask if mask is None else np.asarray(mask, bool)
    verts = np.flatnonzero(mask)
    vals = np.zeros((len(verts), 2)) if g is None else np.asarray(g(space.coords[verts]), float).reshape(-1, 2)
    dofs = np.concatenate([verts, verts + sys.n_v])
    return constrain(sys, dofs, np.concatenate([vals[:, 0], vals[:, 1]]))


def _pressure_weights(space_p: FeSpace) -> np.ndarray:
    """``int phi_i`` for every pressure basis function."""
    w = np.zeros(space_p.ndofs)
    for b in cell_batches(space_p.mesh, "norm"):
        np.add.at(w, b.dofs, np.einsum("qa,cq->ca", b.phi, b.JxW))
    return w


def pressure_gauge(sys: StokesSystem, mode: str = "none", has_outflow: Optional[bool] = None) -> StokesSystem:
    """Fix the pressure level.

    ``"mean-zero-shift"`` pins one pressure value during the solve and shifts
    the solution to zero mean afterwards.  ``"none"`` leaves the system alone,
    which is correct when an outflow boundary fixes the level.
    """
    if mode == "none":
        if has_outflow is False:
            warnings.warn("pure Dirichlet problem without a pressure gauge: the system is singular", RuntimeWarning)
        return replace(sys, gauge="none")
    if mode != "mean-zero-shift":
        raise InvalidArgumentError(f"unknown pressure gauge {mode!r}")
    pin = 2 * sys.n_v  # first pressure dof
    out = constrain(sys, [pin], [0.0])
    return replace(out, gauge=mode)


def write_matrix_market(path, A: sp.spmatrix, comment: str = "") -> None:
    scipy.io.mmwrite(str(path), sp.coo_matrix(A), comment=comment, precision=17)


def read_matrix_market(path) -> sp.csr_matrix:
    return sp.csr_matrix(scipy.io.mmread(str(path)))
