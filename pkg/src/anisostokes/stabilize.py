"""Edge-based pressure stabilisations and the nodal projection tau_h.

All three forms are integrated edge by edge with a two-point Gauss rule, using
the gradients of the one or two cells sharing the edge.  Local 8x8 matrices
(two cells of up to four vertices each) are kept per edge so that the
contribution of single edges can be inspected afterwards.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import AnisoStokesError, InvalidArgumentError
from .mesh import ANISO, EDGE_ANISO, EDGE_BOUNDARY_EXTERIOR, EDGE_REGULAR, QUAD, TRI, Mesh
from .spaces import REF, FeSpace, gradients_at

VARIANTS = ("S", "S2", "SCIP")
EDGE_CLASS_NAMES = {EDGE_REGULAR: "regular", EDGE_ANISO: "aniso", EDGE_BOUNDARY_EXTERIOR: "boundary-exterior"}

_GAUSS_S = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
_GAUSS_W = np.array([0.5, 0.5])


@dataclass(frozen=True)
class StabConfig:
    """Stabilisation choice.

    ``gamma_i`` weights the average terms on anisotropic edges, ``gamma_0`` the
    jump terms on regular edges; ``SCIP`` uses ``gamma_i``.
    """

    variant: str = "S"
    gamma_i: float = 1e-2
    gamma_0: float = 1e-2
    skip_outer_patch_jumps: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidArgumentError(f"unknown stabilisation {self.variant!r}; expected one of {VARIANTS}")
        if not (self.gamma_i > 0 and self.gamma_0 > 0):
            raise InvalidArgumentError("stabilisation parameters must be positive")

    @classmethod
    def make(cls, variant: str = "S", gamma=None, gamma_i=None, gamma_0=None, **kw) -> "StabConfig":
        g = 1e-2 if gamma is None else gamma
        gi = g if gamma_i is None else gamma_i
        g0 = g if gamma_0 is None else gamma_0
        return cls(variant.upper(), float(gi), float(g0), **kw)


@dataclass
class StabMatrix:
    """Assembled stabilisation with its per-edge local matrices."""

    matrix: sp.csr_matrix
    config: StabConfig
    edge_ids: np.ndarray  # (ne,) edges with a contribution
    edge_dofs: np.ndarray  # (ne, 8)
    local: np.ndarray  # (ne, 8, 8)
    mesh: Mesh = field(repr=False, default=None)

    def energy(self, p) -> float:
        return stab_energy(self, p)

    def edge_energies(self, p) -> np.ndarray:
        q = np.asarray(p)[self.edge_dofs]
        return np.einsum("ea,eab,eb->e", q, self.local, q)

    def ledger_rows(self, p=None) -> list:
        """Rows ``(edge_id, class, h_n_1, h_n_2, h_tau, contribution)``.

        The contribution is the edge energy for ``p`` if given, otherwise the
        trace of the local matrix.
        """
        m = self.mesh
        contrib = self.edge_energies(p) if p is not None else np.trace(self.local, axis1=1, axis2=2)
        out = []
        for e, c in zip(self.edge_ids, contrib):
            h1, h2 = m.edge_hn[e]
            out.append((int(e), EDGE_CLASS_NAMES[int(m.edge_class[e])], h1, h2, m.edge_length[e], c))
        return out

    def write_ledger(self, path, p=None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["edge_id", "class", "h_n_1", "h_n_2", "h_tau", "contribution"])
            for e, cls, h1, h2, ht, c in self.ledger_rows(p):
                w.writerow([e, cls] + [_g6(x) for x in (h1, h2, ht, c)])


def _g6(x) -> str:
    return "" if x is None or not np.isfinite(x) else f"{x:.6g}"


def stab_energy(mat: StabMatrix, p) -> float:
    p = np.asarray(p, float)
    return float(p @ (mat.matrix @ p))


# ---------------------------------------------------------------------------
# edge geometry
# ---------------------------------------------------------------------------


def _side_gradients(m: Mesh, edges: np.ndarray, side: int):
    """Gradients of the basis of the cell on ``side`` at the two edge Gauss points.

    Returns ``(dofs (n,4), grads (n,2,4,2))``.  The Gauss points are ordered
    along the global edge direction so both sides see the same physical points.
    """
    cells = m.edge_cells[edges, side]
    k = m.edge_local[edges, side]
    nv = m.nverts[cells]
    first = m.cells[cells, k]
    forward = first == m.edges[edges, 0]
    s = np.where(forward[:, None], _GAUSS_S[None, :], 1.0 - _GAUSS_S[None, :])
    xi = np.empty((len(edges), 2, 2))
    for kind in (TRI, QUAD):
        sel = nv == kind
        if sel.any():
            ref = REF[kind]
            a = ref.vertices[k[sel]]
            b = ref.vertices[(k[sel] + 1) % kind]
            xi[sel] = a[:, None, :] + s[sel][:, :, None] * (b - a)[:, None, :]
    return gradients_at(m, cells, xi)


def _edge_data(m: Mesh, edges: np.ndarray):
    """Both sides' dofs and gradients; boundary edges get zero second-side gradients."""
    d0, g0 = _side_gradients(m, edges, 0)
    two = m.edge_cells[edges, 1] >= 0
    d1, g1 = d0.copy(), np.zeros_like(g0)
    if two.any():
        dd, gg = _side_gradients(m, edges[two], 1)
        d1[two], g1[two] = dd, gg
    dofs = np.concatenate([d0, d1], axis=1)
    z = np.zeros_like(g0)
    G0 = np.concatenate([g0, z], axis=2)  # (n, 2, 8, 2)
    G1 = np.concatenate([z, g1], axis=2)
    return dofs, G0, G1, two


def _outer(a: np.ndarray, b: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``sum_q w[e,q] a[e,q,i,:] . b[e,q,j,:]`` for vector gradients."""
    return np.einsum("eqid,eqjd,eq->eij", a, b, w)


def _outer_s(a: np.ndarray, b: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("eqi,eqj,eq->eij", a, b, w)


def _assemble(space_p: FeSpace, cfg: StabConfig, edges, dofs, local) -> StabMatrix:
    n = space_p.ndofs
    if len(edges):
        rows = np.repeat(dofs[:, :, None], 8, axis=2).ravel()
        cols = np.repeat(dofs[:, None, :], 8, axis=1).ravel()
        A = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    else:
        A = sp.csr_matrix((n, n))
    A = 0.5 * (A + A.T)
    return StabMatrix(A.tocsr(), cfg, edges, dofs, local, space_p.mesh)


def _check_classified(m: Mesh):
    known = np.isin(m.edge_class, list(EDGE_CLASS_NAMES))
    if not known.all():
        raise AnisoStokesError("internal error: unclassified edge in the mesh")


def _edge_sets(m: Mesh, cfg: StabConfig):
    aniso = np.flatnonzero(m.edge_class == EDGE_ANISO)
    reg = m.edge_class == EDGE_REGULAR
    if cfg.skip_outer_patch_jumps:
        reg &= ~m.edge_outer_patch
    return aniso, np.flatnonzero(reg)


def _weights(m: Mesh, edges) -> np.ndarray:
    return m.edge_length[edges][:, None] * _GAUSS_W[None, :]


def _side_h(m: Mesh, edges, two):
    h0 = m.edge_hn[edges, 0]
    h1 = np.where(two, m.edge_hn[edges, 1], 0.0)
    a0 = np.where(two, 0.5, 1.0)
    a1 = np.where(two, 0.5, 0.0)
    hmean = np.where(two, 0.5 * (h0 + np.nan_to_num(h1)), h0)
    return h0, np.nan_to_num(h1), a0, a1, hmean


# ---------------------------------------------------------------------------
# the three forms
# ---------------------------------------------------------------------------


def assemble_S(space_p: FeSpace, cfg: StabConfig) -> StabMatrix:
    """Averages of ``h_n grad p . grad psi`` on anisotropic edges, jumps on regular ones, scaled by ``H^2``."""
    m = space_p.mesh
    _check_classified(m)
    aniso, reg = _edge_sets(m, cfg)
    H2 = m.H ** 2
    parts = []
    if len(aniso):
        dofs, G0, G1, two = _edge_data(m, aniso)
        h0, h1, a0, a1, _ = _side_h(m, aniso, two)
        w = _weights(m, aniso)
        loc = _outer(G0, G0, w * (a0 * h0)[:, None]) + _outer(G1, G1, w * (a1 * h1)[:, None])
        parts.append((aniso, dofs, cfg.gamma_i * H2 * loc))
    if len(reg):
        dofs, G0, G1, two = _edge_data(m, reg)
        *_, hmean = _side_h(m, reg, two)
        J = G0 - G1
        loc = _outer(J, J, _weights(m, reg) * hmean[:, None])
        parts.append((reg, dofs, cfg.gamma_0 * H2 * loc))
    return _finish(space_p, cfg, parts)


def assemble_S2(space_p: FeSpace, cfg: StabConfig) -> StabMatrix:
    """Local-size weighting: ``h_n^3`` on normal and ``h_n h_tau^2`` on tangential derivatives."""
    m = space_p.mesh
    _check_classified(m)
    aniso, reg = _edge_sets(m, cfg)
    parts = []
    if len(aniso):
        dofs, G0, G1, two = _edge_data(m, aniso)
        h0, h1, a0, a1, _ = _side_h(m, aniso, two)
        n = m.edge_normal[aniso]
        t = m.edge_tangent[aniso]
        ht = m.edge_length[aniso]
        w = _weights(m, aniso)
        loc = np.zeros((len(aniso), 8, 8))
        for G, a, h in ((G0, a0, h0), (G1, a1, h1)):
            dn = np.einsum("eqid,ed->eqi", G, n)
            dt = np.einsum("eqid,ed->eqi", G, t)
            loc += _outer_s(dn, dn, w * (a * h ** 3)[:, None])
            loc += _outer_s(dt, dt, w * (a * h * ht ** 2)[:, None])
        parts.append((aniso, dofs, cfg.gamma_i * loc))
    if len(reg):
        dofs, G0, G1, two = _edge_data(m, reg)
        *_, hmean = _side_h(m, reg, two)
        J = G0 - G1
        loc = _outer(J, J, _weights(m, reg) * (hmean ** 3)[:, None])
        parts.append((reg, dofs, cfg.gamma_0 * loc))
    return _finish(space_p, cfg, parts)


def assemble_Scip(space_p: FeSpace, cfg: StabConfig) -> StabMatrix:
    """Continuous interior penalty on the normal-derivative jump, weighted by ``h_tau^3``."""
    m = space_p.mesh
    _check_classified(m)
    inner = np.flatnonzero(m.edge_cells[:, 1] >= 0)
    parts = []
    if len(inner):
        dofs, G0, G1, _ = _edge_data(m, inner)
        n = m.edge_normal[inner]
        jn = np.einsum("eqid,ed->eqi", G0 - G1, n)
        ht = m.edge_length[inner]
        loc = _outer_s(jn, jn, _weights(m, inner) * (ht ** 3)[:, None])
        parts.append((inner, dofs, cfg.gamma_i * loc))
    return _finish(space_p, cfg, parts)


def _finish(space_p, cfg, parts) -> StabMatrix:
    if not parts:
        return _assemble(space_p, cfg, np.zeros(0, dtype=np.int64), np.zeros((0, 8), dtype=np.int64), np.zeros((0, 8, 8)))
    edges = np.concatenate([p[0] for p in parts])
    dofs = np.concatenate([p[1] for p in parts])
    local = np.concatenate([p[2] for p in parts])
    return _assemble(space_p, cfg, edges, dofs, local)


def assemble(space_p: FeSpace, cfg: StabConfig) -> StabMatrix:
    return {"S": assemble_S, "S2": assemble_S2, "SCIP": assemble_Scip}[cfg.variant](space_p, cfg)


# ---------------------------------------------------------------------------
# nodal projection
# ---------------------------------------------------------------------------


def selected_cells(m: Mesh) -> tuple:
    """For every vertex, the adjacent cell with the smallest ``h_tilde_min``.

    Ties prefer anisotropic cells and then the lowest cell id.  Returns
    ``(cell, local_index)`` arrays of length ``n_vertices``.
    """
    c_idx, l_idx = np.nonzero(m.cells >= 0)
    v = m.cells[c_idx, l_idx]
    ht = m.h_tilde_min[c_idx]
    regular = (m.region[c_idx] != ANISO).astype(int)
    order = np.lexsort((c_idx, regular, ht, v))
    v_sorted = v[order]
    first = np.r_[True, v_sorted[1:] != v_sorted[:-1]]
    pick = order[first]
    cell = np.full(m.n_vertices, -1, dtype=np.int64)
    loc = np.full(m.n_vertices, -1, dtype=np.int64)
    cell[v[pick]] = c_idx[pick]
    loc[v[pick]] = l_idx[pick]
    return cell, loc


def tau_h(space: FeSpace, dg_field) -> np.ndarray:
    """Continuous nodal field from a cellwise field.

    ``dg_field`` is either constant per cell, shape ``(n_cells, d)``, or given
    at the cell vertices, shape ``(n_cells, 4, d)`` in local vertex order.  Each
    interior vertex takes the value of the cell picked by :func:`selected_cells`;
    boundary vertices get zero.
    """
    m = space.mesh
    f = np.asarray(dg_field, float)
    cell, loc = selected_cells(m)
    if f.ndim == 2 and f.shape[0] == m.n_cells:
        out = f[cell]
    elif f.ndim == 3 and f.shape[:2] == (m.n_cells, 4):
        out = f[cell, loc]
    else:
        raise InvalidArgumentError("dg_field must have shape (n_cells, d) or (n_cells, 4, d)")
    out = out.copy()
    out[m.boundary_vertices()] = 0.0
    return out


def cell_vertex_gradients(space: FeSpace, p) -> np.ndarray:
    """Gradient of the finite element function ``p`` of each cell at its own vertices, ``(n_cells, 4, 2)``."""
    m = space.mesh
    xi = np.zeros((m.n_cells, 4, 2))
    nv = m.nverts
    for kind in (TRI, QUAD):
        sel = nv == kind
        xi[sel, :kind] = REF[kind].vertices
        if kind == TRI:
            xi[sel, 3] = REF[kind].vertices[0]
    dofs, G = gradients_at(m, np.arange(m.n_cells), xi)
    return np.einsum("cqad,ca->cqd", G, np.asarray(p)[dofs])
