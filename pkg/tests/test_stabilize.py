import csv

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from anisostokes.errors import InvalidArgumentError
from anisostokes.mesh import ANISO, EDGE_ANISO, EDGE_REGULAR, REGULAR, Mesh, build_alternating_mesh, build_quad_grid
from anisostokes.spaces import ElementMap, build_space, cell_batches
from anisostokes.stabilize import (
    StabConfig,
    assemble,
    assemble_S,
    assemble_S2,
    assemble_Scip,
    cell_vertex_gradients,
    selected_cells,
    stab_energy,
    tau_h,
)
from anisostokes.stokes import stiffness_matrix
from anisostokes.verify import function_norms

VARIANTS = ("S", "S2", "SCIP")
RATIOS = (0.5, 1e-1, 1e-3, 1e-6)
G = 0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)


@pytest.fixture(scope="module", params=["alt", "mixed"])
def space(request, alt_mesh, mixed_mesh):
    return build_space(alt_mesh if request.param == "alt" else mixed_mesh)


# --- config ------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        StabConfig.make("S", -1.0)
    with pytest.raises(InvalidArgumentError):
        StabConfig.make("S", 1.0, gamma_0=0.0)
    with pytest.raises(InvalidArgumentError):
        StabConfig.make("XYZ")
    cfg = StabConfig.make("s2", gamma_i=1e-2)
    assert cfg.variant == "S2" and cfg.gamma_i == 1e-2 and cfg.gamma_0 == 1e-2


# --- structural properties ---------------------------------------------------


@pytest.mark.parametrize("variant", VARIANTS)
def test_symmetric_psd_constant_kernel(space, variant, rng):
    S = assemble(space, StabConfig.make(variant)).matrix
    assert abs(S - S.T).max() == 0.0
    X = rng.normal(size=(space.ndofs, 1000))
    e = np.einsum("ij,ij->j", X, S @ X)
    assert (e >= -1e-13 * (X ** 2).sum(0)).all()
    ones = np.ones(space.ndofs)
    assert np.abs(S @ ones).max() <= 1e-12 * abs(S).max()


@pytest.mark.parametrize("variant", VARIANTS)
def test_energy_bilinear(space, variant, rng):
    mat = assemble(space, StabConfig.make(variant))
    p = rng.normal(size=space.ndofs)
    assert stab_energy(mat, 3.0 * p) == pytest.approx(9.0 * stab_energy(mat, p), rel=1e-12)
    c = np.full(space.ndofs, 2.5)
    assert abs(stab_energy(mat, c)) <= 1e-12 * abs(mat.matrix).max() * (c @ c)
    assert mat.edge_energies(p).sum() == pytest.approx(mat.energy(p), rel=1e-12)


def test_linear_pressure_on_regular_mesh_has_no_jumps():
    m = build_quad_grid(6, 6, (-1, 1, -1, 1))
    m.patch = np.arange(m.n_cells)
    P = build_space(m)
    p = m.vertices[:, 0].copy()
    for variant in VARIANTS:
        cfg = StabConfig.make(variant, skip_outer_patch_jumps=False)
        assert stab_energy(assemble(P, cfg), p) == pytest.approx(0.0, abs=1e-12)


def test_linear_pressure_on_alternating_mesh_closed_form():
    # every edge of the alternating mesh is anisotropic, so S(x, x) = g H^2 sum_e |e| {h_n}_e
    n, ratio, g = 4, 1e-3, 1e-2
    m = build_alternating_mesh(n, ratio)
    H = 2.0 / n
    heights = np.tile([ratio * H, (1 - ratio) * H], n)
    hx = H / 2
    ncol = 2 * n
    total = 0.0
    # horizontal edges: mean of the cells below and above, one-sided on the boundary
    rows = np.r_[heights[0], 0.5 * (heights[:-1] + heights[1:]), heights[-1]]
    total += ncol * hx * rows.sum()
    # vertical edges: h_n = hx on both sides
    total += (ncol + 1) * (heights * hx).sum()
    S = assemble_S(build_space(m), StabConfig.make("S", g))
    p = m.vertices[:, 0].copy()
    assert stab_energy(S, p) == pytest.approx(g * H ** 2 * total, rel=1e-12)


def test_S2_matches_S_on_uniform_regular_grid():
    m = build_alternating_mesh(4, 0.5, all_aniso=False)
    P = build_space(m)
    S = assemble_S(P, StabConfig.make("S", 1e-2)).matrix
    S2 = assemble_S2(P, StabConfig.make("S2", 4e-2)).matrix
    assert (m.edge_class != EDGE_ANISO).all()
    assert abs(S - S2).max() <= 1e-12 * abs(S).max()


def test_Scip_equivalent_to_S_jumps_on_uniform_grid(rng):
    quotients = []
    for n in (2, 4, 8, 16):
        m = build_alternating_mesh(n, 0.5, all_aniso=False)
        P = build_space(m)
        S = assemble_S(P, StabConfig.make("S", 1.0, skip_outer_patch_jumps=False)).matrix
        C = assemble_Scip(P, StabConfig.make("SCIP", 1.0)).matrix
        X = rng.normal(size=(P.ndofs, 200))
        q = np.einsum("ij,ij->j", X, S @ X) / np.einsum("ij,ij->j", X, C @ X)
        quotients.append((q.min(), q.max()))
    lo = min(a for a, _ in quotients)
    hi = max(b for _, b in quotients)
    assert hi / lo <= 4.0


def test_skip_outer_patch_jumps_drops_couplings():
    m = build_alternating_mesh(4, 0.5, all_aniso=False)
    P = build_space(m)
    a = assemble_S(P, StabConfig.make("S", skip_outer_patch_jumps=True))
    b = assemble_S(P, StabConfig.make("S", skip_outer_patch_jumps=False))
    assert len(a.edge_ids) < len(b.edge_ids)
    assert not m.edge_outer_patch[a.edge_ids].any()


def test_boundary_exterior_edges_do_not_contribute(mixed_mesh):
    mat = assemble(build_space(mixed_mesh), StabConfig.make("S"))
    cls = mixed_mesh.edge_class[mat.edge_ids]
    assert set(np.unique(cls)) <= {EDGE_ANISO, EDGE_REGULAR}


# --- independent per-edge oracle ---------------------------------------------


def _cell_grad(m, c, p, x):
    emap = ElementMap(m.cell_coords(c))
    xi = emap.inverse(x)
    J = emap.jacobian(xi[None])[0]
    return np.linalg.solve(J.T, emap.ref.grad(xi[None])[0].T @ p[m.cell_vertices(c)])


def _oracle(m, p, cfg):
    total = 0.0
    H2 = m.H ** 2
    for e in range(len(m.edges)):
        a, b = m.vertices[m.edges[e]]
        L = m.edge_length[e]
        n = m.edge_normal[e]
        t = m.edge_tangent[e]
        cells = [c for c in m.edge_cells[e] if c >= 0]
        hn = [m.cell_areas[c] / L for c in cells]
        inner = len(cells) == 2
        cls = m.edge_class[e]
        for s in G:
            x = a + s * (b - a)
            grads = [_cell_grad(m, c, p, x) for c in cells]
            w = 0.5 * L
            if cfg.variant == "SCIP":
                if inner:
                    total += cfg.gamma_i * L ** 3 * w * ((grads[0] - grads[1]) @ n) ** 2
                continue
            if cls == EDGE_ANISO:
                vals = []
                for g, h in zip(grads, hn):
                    if cfg.variant == "S":
                        vals.append(H2 * h * (g @ g))
                    else:
                        vals.append(h * (h ** 2 * (g @ n) ** 2 + L ** 2 * (g @ t) ** 2))
                total += cfg.gamma_i * w * np.mean(vals)
            elif cls == EDGE_REGULAR and not (cfg.skip_outer_patch_jumps and m.edge_outer_patch[e]):
                j = grads[0] - grads[1]
                hm = np.mean(hn)
                weight = H2 * hm if cfg.variant == "S" else hm ** 3
                total += cfg.gamma_0 * w * weight * (j @ j)
    return total


@pytest.mark.parametrize("variant", VARIANTS)
def test_energy_matches_edge_oracle(space, variant, rng):
    cfg = StabConfig.make(variant, gamma_i=0.7, gamma_0=1.3)
    mat = assemble(space, cfg)
    p = rng.normal(size=space.ndofs)
    assert mat.energy(p) == pytest.approx(_oracle(space.mesh, p, cfg), rel=1e-12)


def test_ledger_csv(tmp_path, alt_mesh, rng):
    mat = assemble(build_space(alt_mesh), StabConfig.make("S"))
    p = rng.normal(size=alt_mesh.n_vertices)
    path = tmp_path / "ledger.csv"
    mat.write_ledger(path, p)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["edge_id", "class", "h_n_1", "h_n_2", "h_tau", "contribution"]
    assert len(rows) == len(mat.edge_ids) + 1
    assert sum(float(r[5]) for r in rows[1:]) == pytest.approx(mat.energy(p), rel=1e-4)


# --- tau_h -------------------------------------------------------------------


def test_tau_fixed_point(mixed_mesh):
    P = build_space(mixed_mesh)
    x, y = mixed_mesh.vertices.T
    u = np.stack([(1 - x ** 2) * (1 - y ** 2), x * (1 - x ** 2) * (1 - y ** 2)], axis=1)
    bv = mixed_mesh.boundary_vertices()
    u[bv] = 0.0  # zero trace, including the hole
    dg = np.zeros((mixed_mesh.n_cells, 4, 2))
    cells = mixed_mesh.cells
    dg[cells >= 0] = u[cells[cells >= 0]]
    assert np.array_equal(tau_h(P, dg), u)


def test_tau_boundary_vertices_zero(mixed_mesh, rng):
    P = build_space(mixed_mesh)
    out = tau_h(P, rng.normal(size=(mixed_mesh.n_cells, 2)) + 5.0)
    bv = mixed_mesh.boundary_vertices()
    assert (out[bv] == 0).all()
    inner = np.setdiff1d(np.arange(mixed_mesh.n_vertices), bv)
    assert (out[inner] != 0).all()


def test_tau_picks_smallest_h_tilde():
    # vertex 4 is interior to a fan of three triangles with very different shortest edges
    verts = np.array([[0, 0], [2, 0], [2, 2], [0, 2], [1.0, 1e-3]], float)
    cells = np.array([[0, 1, 4, -1], [1, 2, 4, -1], [2, 3, 4, -1], [3, 0, 4, -1]])
    m = Mesh(verts, cells, np.array([ANISO] * 4), 2.0)
    P = build_space(m)
    field = np.array([[1.0], [2.0], [3.0], [4.0]])
    out = tau_h(P, field)
    hmin = m.h_tilde_min
    assert out[4, 0] == field[np.argmin(hmin), 0]
    assert (out[:4] == 0).all()


def test_tau_tie_prefers_aniso_then_lowest_id():
    g = build_quad_grid(2, 2)
    centre = 4
    # regular cells have h_tilde = H; make the aniso cell's shortest edge equal to H
    region = np.array([REGULAR, ANISO, REGULAR, ANISO])
    m = Mesh(g.vertices, g.cells, region, 0.5)
    cell, _ = selected_cells(m)
    assert cell[centre] == 1
    m = Mesh(g.vertices, g.cells, np.full(4, REGULAR), 0.5)
    cell, _ = selected_cells(m)
    assert cell[centre] == 0


def test_tau_rejects_bad_shapes(alt_mesh):
    with pytest.raises(InvalidArgumentError):
        tau_h(build_space(alt_mesh), np.zeros((3, 2)))


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_cell_vertex_gradients_of_linear(a, b):
    m = build_alternating_mesh(2, 1e-3)
    P = build_space(m)
    p = a * m.vertices[:, 0] + b * m.vertices[:, 1]
    g = cell_vertex_gradients(P, p)
    assert np.allclose(g, [a, b], atol=1e-8 * (1 + abs(a) + abs(b)))


# --- boundedness across the anisotropy sweep ---------------------------------


def _sweep_constants(seed=0, nvec=1000):
    rng = np.random.default_rng(seed)
    out = {"lower": [], "upper": [], "tau": [], "proj": []}
    for ratio in RATIOS:
        m = build_alternating_mesh(4, ratio)
        P = build_space(m)
        S = assemble(P, StabConfig.make("S", 1.0))
        K = stiffness_matrix(P)
        H = m.H
        X = rng.normal(size=(P.ndofs, nvec))
        s = np.einsum("ij,ij->j", X, S.matrix @ X)
        k = H ** 2 * np.einsum("ij,ij->j", X, K @ X)  # all cells are anisotropic here
        out["lower"].append((k / s).max())
        out["upper"].append((s / k).max())
        ht = m.h_tilde_min
        nc = m.n_cells
        rows = np.repeat(np.arange(nc), 4)
        cols = m.cells.ravel()
        ok = cols >= 0
        C2V = sp.csr_matrix((np.ones(ok.sum()), (rows[ok], cols[ok])), shape=(nc, m.n_vertices))
        nbr = ((C2V @ C2V.T) > 0).astype(float)
        taus, projs = [], []
        for j in range(40):
            p = X[:, j]
            dg = cell_vertex_gradients(P, p) * ht[:, None, None] ** 2
            t = tau_h(P, dg)
            gt = np.hypot(function_norms(m, t[:, 0])[1], function_norms(m, t[:, 1])[1])
            taus.append(gt / (H * function_norms(m, p)[1]))
            cell_S = np.zeros(nc)
            for e, en in zip(S.edge_ids, S.edge_energies(p)):
                for c in m.edge_cells[e]:
                    if c >= 0:
                        cell_S[c] += en
            lhs = np.zeros(nc)
            for b in cell_batches(m, "norm"):
                gq = np.einsum("cqai,ca->cqi", b.grad, p[b.dofs]) * ht[b.cells, None, None] ** 2
                tq = np.einsum("qa,cai->cqi", b.phi, t[b.dofs])
                lhs[b.cells] += np.einsum("cqi,cq->c", (gq - tq) ** 2, b.JxW)
            projs.append((lhs / (ht ** 2 * (nbr @ cell_S))).max())
        out["tau"].append(max(taus))
        out["proj"].append(max(projs))
    return out


@pytest.fixture(scope="module")
def sweep_constants():
    return _sweep_constants()


@pytest.mark.parametrize("key", ["lower", "upper"])
def test_stabilisation_equivalence_constants_bounded(sweep_constants, key):
    c = np.array(sweep_constants[key])
    assert np.isfinite(c).all()
    assert c.max() / c.min() < 1e2


@pytest.mark.parametrize("key", ["tau", "proj"])
def test_projection_constants_do_not_blow_up(sweep_constants, key):
    c = np.array(sweep_constants[key])
    assert np.isfinite(c).all()
    assert c.max() <= 1e2 * c[0]
