"""Degree-one Lagrange spaces on mixed triangle/quadrilateral meshes.

Triangles carry P1 on the reference triangle (0,0),(1,0),(0,1); quadrilaterals
carry Q1 on the reference square [-1,1]^2.  Element geometry is evaluated in
batches over all cells of one kind, which is what assembly and error
integration need.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgumentError, InvertedCellError, OutOfDomainError
from .mesh import QUAD, TAG_IDS, TRI, Mesh

# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------


def gauss_legendre(n: int):
    """``n``-point Gauss rule on [-1, 1]."""
    return np.polynomial.legendre.leggauss(n)


def tri_rule(npts: int):
    """Quadrature on the reference triangle; weights sum to 1/2."""
    if npts == 1:
        return np.array([[1 / 3, 1 / 3]]), np.array([0.5])
    if npts == 3:
        pts = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
        return pts, np.full(3, 1 / 6)
    if npts == 7:
        # degree 5
        a1, a2 = (6 - np.sqrt(15)) / 21, (6 + np.sqrt(15)) / 21
        w1, w2 = (155 - np.sqrt(15)) / 2400, (155 + np.sqrt(15)) / 2400
        pts = np.array(
            [
                [1 / 3, 1 / 3],
                [a1, a1], [1 - 2 * a1, a1], [a1, 1 - 2 * a1],
                [a2, a2], [1 - 2 * a2, a2], [a2, 1 - 2 * a2],
            ]
        )
        w = np.array([9 / 80, w1, w1, w1, w2, w2, w2])
        return pts, w
    raise InvalidArgumentError(f"no {npts}-point triangle rule")


def quad_rule(n: int):
    """Tensor Gauss rule with ``n`` points per direction on [-1,1]^2; weights sum to 4."""
    x, w = gauss_legendre(n)
    X, Y = np.meshgrid(x, x, indexing="ij")
    W = np.outer(w, w)
    return np.stack([X.ravel(), Y.ravel()], axis=1), W.ravel()


# ---------------------------------------------------------------------------
# reference elements
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RefElement:
    kind: int  # TRI or QUAD
    vertices: np.ndarray

    @property
    def nbasis(self) -> int:
        return self.kind

    def shape(self, xi) -> np.ndarray:
        """Basis values at reference points ``xi`` (n, 2) -> (n, nbasis)."""
        xi = np.atleast_2d(xi)
        s, t = xi[:, 0], xi[:, 1]
        if self.kind == TRI:
            return np.stack([1 - s - t, s, t], axis=1)
        return 0.25 * np.stack([(1 - s) * (1 - t), (1 + s) * (1 - t), (1 + s) * (1 + t), (1 - s) * (1 + t)], axis=1)

    def grad(self, xi) -> np.ndarray:
        """Reference gradients (n, nbasis, 2)."""
        xi = np.atleast_2d(xi)
        n = len(xi)
        if self.kind == TRI:
            g = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
            return np.broadcast_to(g, (n, 3, 2)).copy()
        s, t = xi[:, 0], xi[:, 1]
        gs = 0.25 * np.stack([-(1 - t), (1 - t), (1 + t), -(1 + t)], axis=1)
        gt = 0.25 * np.stack([-(1 - s), -(1 + s), (1 + s), (1 - s)], axis=1)
        return np.stack([gs, gt], axis=2)

    def rule(self, purpose: str = "stiffness"):
        if self.kind == TRI:
            return tri_rule(3 if purpose == "stiffness" else 7)
        return quad_rule(2 if purpose == "stiffness" else 4)

    def edge_point(self, k: int, s):
        """Reference point at parameter ``s`` along local edge ``k`` (vertex k -> k+1)."""
        a = self.vertices[k]
        b = self.vertices[(k + 1) % self.kind]
        s = np.asarray(s, float)[..., None]
        return a + s * (b - a)


P1 = RefElement(TRI, np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
Q1 = RefElement(QUAD, np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]))
REF = {TRI: P1, QUAD: Q1}


# ---------------------------------------------------------------------------
# element maps
# ---------------------------------------------------------------------------


class ElementMap:
    """Affine (triangle) or bilinear (quadrilateral) map of one cell."""

    def __init__(self, coords):
        coords = np.asarray(coords, float)
        if len(coords) not in (TRI, QUAD):
            raise InvalidArgumentError("a cell has 3 or 4 vertices")
        self.coords = coords
        self.ref = REF[len(coords)]

    def __call__(self, xi) -> np.ndarray:
        return self.ref.shape(xi) @ self.coords

    def jacobian(self, xi) -> np.ndarray:
        """(n, 2, 2) with ``J[:, i, j] = d x_i / d xi_j``."""
        return np.einsum("ai,naj->nij", self.coords, self.ref.grad(xi))

    def det(self, xi) -> np.ndarray:
        return np.linalg.det(self.jacobian(xi))

    def check(self, xi=None):
        if xi is None:
            xi = self.ref.rule()[0]
        d = self.det(xi)
        if (d <= 0).any():
            raise InvertedCellError(f"non-positive Jacobian determinant {d.min():.3e}")
        return self

    def inverse(self, x, tol: float = 1e-13, maxit: int = 30) -> np.ndarray:
        """Reference coordinates of physical point ``x`` (Newton for quads)."""
        x = np.asarray(x, float)
        if self.ref.kind == TRI:
            J = self.jacobian(np.zeros((1, 2)))[0]
            return np.linalg.solve(J, x - self.coords[0])
        xi = np.zeros(2)
        scale = np.ptp(self.coords, axis=0).max()
        for _ in range(maxit):
            r = self(xi[None])[0] - x
            if np.hypot(*r) <= tol * scale:
                break
            xi = xi - np.linalg.solve(self.jacobian(xi[None])[0], r)
        return xi


def element_map(m: Mesh, c: int) -> ElementMap:
    return ElementMap(m.cell_coords(c)).check()


@dataclass
class CellBatch:
    """Geometry of all cells of one kind at a common set of reference points."""

    kind: int
    cells: np.ndarray  # (nc,) cell ids
    dofs: np.ndarray  # (nc, nb)
    phi: np.ndarray  # (nq, nb)
    grad: np.ndarray  # (nc, nq, nb, 2) physical gradients
    JxW: np.ndarray  # (nc, nq)
    points: np.ndarray  # (nc, nq, 2)


def _geometry(X: np.ndarray, ref: RefElement, xi: np.ndarray):
    """Jacobians, determinants and physical gradients for coordinates ``X`` (nc, nb, 2)."""
    G = ref.grad(xi)  # (nq, nb, 2)
    J = np.einsum("cai,qaj->cqij", X, G)
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    if (det <= 0).any():
        raise InvertedCellError(f"non-positive Jacobian determinant {det.min():.3e}")
    inv = np.empty_like(J)
    inv[..., 0, 0] = J[..., 1, 1] / det
    inv[..., 1, 1] = J[..., 0, 0] / det
    inv[..., 0, 1] = -J[..., 0, 1] / det
    inv[..., 1, 0] = -J[..., 1, 0] / det
    # grad_x phi = J^{-T} grad_xi phi
    grads = np.einsum("qaj,cqji->cqai", G, inv)
    return det, grads


def cell_batches(m: Mesh, purpose: str = "stiffness", cells=None) -> list:
    """One :class:`CellBatch` per cell kind present in ``m`` (or in ``cells``)."""
    nv = m.nverts
    sel_all = np.arange(m.n_cells) if cells is None else np.asarray(cells)
    out = []
    for kind in (TRI, QUAD):
        ids = sel_all[nv[sel_all] == kind]
        if len(ids) == 0:
            continue
        ref = REF[kind]
        xi, w = ref.rule(purpose)
        dofs = m.cells[ids, :kind]
        X = m.vertices[dofs]
        det, grads = _geometry(X, ref, xi)
        phi = ref.shape(xi)
        pts = np.einsum("qa,cai->cqi", phi, X)
        out.append(CellBatch(kind, ids, dofs, phi, grads, det * w[None, :], pts))
    return out


def gradients_at(m: Mesh, cells: np.ndarray, xi: np.ndarray):
    """Physical basis gradients of ``cells`` at per-cell reference points.

    ``xi`` has shape (n, nq, 2).  Returns ``(dofs, grads)`` padded to four
    basis functions; the padding slot of triangles has zero gradient and
    repeats the first vertex id.
    """
    n, nq = xi.shape[:2]
    cc = m.cells[cells]
    dofs = np.where(cc < 0, cc[:, [0]], cc)
    grads = np.zeros((n, nq, 4, 2))
    nv = m.nverts[cells]
    for kind in (TRI, QUAD):
        sel = np.flatnonzero(nv == kind)
        if len(sel) == 0:
            continue
        ref = REF[kind]
        X = m.vertices[m.cells[cells[sel], :kind]]
        G = ref.grad(xi[sel].reshape(-1, 2)).reshape(len(sel), nq, kind, 2)
        J = np.einsum("cai,cqaj->cqij", X, G)
        invT = np.linalg.inv(J).transpose(0, 1, 3, 2)
        grads[sel, :, :kind] = np.einsum("cqij,cqaj->cqai", invT, G)
    return dofs, grads


# ---------------------------------------------------------------------------
# spaces
# ---------------------------------------------------------------------------


@dataclass
class FeSpace:
    """Scalar continuous P1/Q1 space: one DOF per mesh vertex."""

    mesh: Mesh
    dirichlet_tags: tuple = ()
    dirichlet_mask: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.dirichlet_mask is None:
            mask = np.zeros(self.mesh.n_vertices, dtype=bool)
            if self.dirichlet_tags:
                mask[self.mesh.boundary_vertices(self.dirichlet_tags)] = True
            self.dirichlet_mask = mask

    @property
    def ndofs(self) -> int:
        return self.mesh.n_vertices

    @property
    def coords(self) -> np.ndarray:
        return self.mesh.vertices

    @property
    def dirichlet_dofs(self) -> np.ndarray:
        return np.flatnonzero(self.dirichlet_mask)

    def interpolate(self, u: Callable) -> np.ndarray:
        return np.asarray(u(self.coords), float)

    def boundary_tag(self) -> np.ndarray:
        """Per-DOF boundary tag (largest tag among incident boundary edges, 0 inside)."""
        m = self.mesh
        tag = np.zeros(m.n_vertices, dtype=np.int8)
        b = m.boundary_edges
        for k in range(2):
            np.maximum.at(tag, m.edges[b, k], m.edge_tag[b])
        return tag


def build_space(m: Mesh, boundary_tags: Sequence = ()) -> FeSpace:
    tags = tuple(TAG_IDS.get(t, t) for t in boundary_tags)
    return FeSpace(m, tags)


def locate(m: Mesh, x, tol: float = 1e-12) -> tuple:
    """Cell containing ``x`` and the reference coordinates of ``x`` in it."""
    x = np.asarray(x, float)
    P = m.vertices[np.where(m.cells < 0, m.cells[:, [0]], m.cells)]
    lo, hi = P.min(axis=1), P.max(axis=1)
    scale = (hi - lo).max()
    cand = np.flatnonzero(((x >= lo - tol * scale) & (x <= hi + tol * scale)).all(axis=1))
    for c in cand:
        emap = ElementMap(m.cell_coords(c))
        xi = emap.inverse(x)
        if emap.ref.kind == TRI:
            inside = xi.min() >= -1e-10 and xi.sum() <= 1 + 1e-10
        else:
            inside = np.abs(xi).max() <= 1 + 1e-10
        if inside:
            return int(c), xi
    raise OutOfDomainError(f"point {x.tolist()} lies outside the mesh")


def evaluate(space: FeSpace, coeffs, x) -> tuple:
    """Value and gradient of the finite element function at ``x``."""
    m = space.mesh
    c, xi = locate(m, x)
    emap = ElementMap(m.cell_coords(c))
    dofs = m.cell_vertices(c)
    u = np.asarray(coeffs)[dofs]
    val = float(emap.ref.shape(xi[None])[0] @ u)
    J = emap.jacobian(xi[None])[0]
    g = np.linalg.solve(J.T, emap.ref.grad(xi[None])[0].T @ u)
    return val, g
