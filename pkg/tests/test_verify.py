import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anisostokes.errors import InvalidArgumentError
from anisostokes.mesh import build_alternating_mesh, build_quad_grid
from anisostokes.spaces import build_space
from anisostokes.stabilize import StabConfig
from anisostokes.verify import (
    NORM_KEYS,
    ConvergenceRecord,
    error_norms,
    fit_order,
    function_norms,
    manufactured_solution,
    max_relative_jump,
    ritz_project,
    solve_stokes,
    sweep_point,
    sweep_positions,
    triple_norm,
    x0_sweep,
)

# central stencils of order 8, exact for polynomials up to degree 9
D1 = np.array([1 / 280, -4 / 105, 1 / 5, -4 / 5, 0, 4 / 5, -1 / 5, 4 / 105, -1 / 280])
D2 = np.array([-1 / 560, 8 / 315, -1 / 5, 8 / 5, -205 / 72, 8 / 5, -1 / 5, 8 / 315, -1 / 560])
OFFS = np.arange(-4, 5)
STEP = 0.05


def _fd(fun, pts, d, stencil, order):
    e = np.zeros(2)
    e[d] = STEP
    vals = np.stack([fun(pts + k * e) for k in OFFS], axis=0)
    return np.tensordot(stencil, vals, axes=(0, 0)) / STEP ** order


params = st.tuples(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(0.1, 0.6))


def _points(rng, n=1000):
    return rng.uniform(-1, 1, (n, 2))


# --- exact solution ------------------------------------------------------------


def test_point_values_at_origin():
    ex = manufactured_solution()
    v = ex.v(np.array([0.0, 0.0]))
    assert v[0] == 0.0
    assert v[1] == pytest.approx(-0.0768, abs=1e-15)
    assert ex.p(np.array([0.0, 0.0])) == 0.0


@settings(max_examples=20, deadline=None)
@given(prm=params, y=st.floats(-1, 1))
def test_vanishes_on_outflow_line(prm, y):
    ex = manufactured_solution(*prm)
    pt = np.array([1.0, y])
    assert np.all(ex.v(pt) == 0) and ex.p(pt) == 0


def test_vanishes_on_circle():
    ex = manufactured_solution()
    th = np.linspace(0, 2 * np.pi, 50)
    pts = 0.4 * np.stack([np.cos(th), np.sin(th)], 1)
    assert np.abs(ex.v(pts)).max() < 1e-15


@settings(max_examples=10, deadline=None)
@given(prm=params)
def test_divergence_free(prm):
    ex = manufactured_solution(*prm)
    pts = _points(np.random.default_rng(0))
    g = ex.grad_v(pts)
    assert np.abs(g[:, 0, 0] + g[:, 1, 1]).max() <= 1e-10


@settings(max_examples=10, deadline=None)
@given(prm=params)
def test_gradients_match_finite_differences(prm):
    ex = manufactured_solution(*prm)
    pts = _points(np.random.default_rng(1), 200)
    gv, gp = ex.grad_v(pts), ex.grad_p(pts)
    for d in range(2):
        assert np.allclose(_fd(ex.v, pts, d, D1, 1), gv[..., d], rtol=0, atol=1e-10)
        assert np.allclose(_fd(ex.p, pts, d, D1, 1), gp[..., d], rtol=0, atol=1e-10)


@settings(max_examples=10, deadline=None)
@given(prm=params, nu=st.sampled_from([1.0, 0.1]))
def test_forcing_is_momentum_residual(prm, nu):
    ex = manufactured_solution(*prm, nu=nu)
    pts = _points(np.random.default_rng(2))
    lap = _fd(ex.v, pts, 0, D2, 2) + _fd(ex.v, pts, 1, D2, 2)
    gp = np.stack([_fd(ex.p, pts, d, D1, 1) for d in range(2)], -1)
    assert np.abs(ex.f(pts) - (-nu * lap + gp)).max() <= 1e-8


def test_do_nothing_trace():
    ex = manufactured_solution(0.05, -0.1, 0.4)
    y = np.linspace(-1, 1, 101)
    pts = np.stack([np.ones_like(y), y], 1)
    trace = ex.nu * ex.grad_v(pts)[..., 0] - ex.p(pts)[:, None] * np.array([1.0, 0.0])
    assert np.abs(trace).max() <= 1e-10


# --- norms -------------------------------------------------------------------


class _Linear:
    nu = 1.0

    def v(self, x):
        return np.stack([1 + 2 * x[..., 0], x[..., 1] - x[..., 0]], -1)

    def grad_v(self, x):
        g = np.zeros(x.shape[:-1] + (2, 2))
        g[..., 0, 0], g[..., 1, 0], g[..., 1, 1] = 2, -1, 1
        return g

    def p(self, x):
        return 3 * x[..., 1]

    def grad_p(self, x):
        return np.broadcast_to([0.0, 3.0], x.shape).copy()


def test_error_of_linear_interpolant_vanishes(mixed_mesh):
    ex = _Linear()
    V = build_space(mixed_mesh)
    v = V.interpolate(ex.v)
    p = V.interpolate(ex.p)
    e = error_norms(mixed_mesh, v[:, 0], v[:, 1], p, ex)
    assert max(e.values()) <= 1e-12


def test_l2_norm_of_x():
    m = build_quad_grid(3, 3, (-1, 1, -1, 1))
    l2, h1 = function_norms(m, m.vertices[:, 0].copy())
    assert l2 == pytest.approx(2 / math.sqrt(3), rel=1e-14)
    assert h1 == pytest.approx(2.0, rel=1e-14)


def test_triple_norm():
    m = build_quad_grid(4, 4)
    z = np.zeros(m.n_vertices)
    assert triple_norm(z, z, z, m) == 0.0
    assert triple_norm(z, z, np.full(m.n_vertices, -2.5), m) == pytest.approx(2.5, rel=1e-14)


def test_triple_norm_term_by_term(mixed_mesh, rng):
    n = mixed_mesh.n_vertices
    v1, v2, p = rng.normal(size=(3, n))
    from anisostokes.stokes import mass_matrix, stiffness_matrix

    V = build_space(mixed_mesh)
    K, M = stiffness_matrix(V), mass_matrix(V)
    ref = math.sqrt(0.5 * (v1 @ K @ v1 + v2 @ K @ v2) + p @ M @ p + mixed_mesh.H ** 2 * p @ K @ p)
    assert triple_norm(v1, v2, p, mixed_mesh, nu=0.5) == pytest.approx(ref, rel=1e-12)


# --- order fitting -----------------------------------------------------------


def test_fit_exact_power():
    H = [1 / 4, 1 / 8, 1 / 16]
    c, a = fit_order(H, [h ** 2 for h in H])
    assert a == pytest.approx(2.0, abs=1e-12) and c == pytest.approx(1.0, rel=1e-12)


def test_fit_noisy_power(rng):
    H = np.array([1 / 4, 1 / 8, 1 / 16, 1 / 32])
    e = 3 * H ** 1.5 * (1 + 0.01 * rng.uniform(-1, 1, 4))
    _, a = fit_order(H, e)
    assert a == pytest.approx(1.5, abs=0.05)


def test_fit_reference_velocity_column():
    _, a = fit_order([1 / 4, 1 / 8, 1 / 16, 1 / 32], [20.55, 10.14, 5.02, 2.50])
    # the reference entries are rounded, so the refit lands within 0.01
    assert a == pytest.approx(1.02, abs=0.01)


@pytest.mark.parametrize("e", [[1.0, 0.0], [1.0, -1.0], [1.0]])
def test_fit_rejects_bad_data(e):
    with pytest.raises(InvalidArgumentError):
        fit_order([0.5, 0.25][: len(e)], e)


def test_convergence_record_requires_decreasing_H():
    errs = {k: [1.0, 0.5] for k in NORM_KEYS}
    with pytest.raises(InvalidArgumentError):
        ConvergenceRecord([0.1, 0.2], errs)
    rec = ConvergenceRecord([0.2, 0.1], errs)
    assert rec.orders["err_v_h1"] == pytest.approx(1.0)
    assert rec.rows()[1] == [0.1, 0.5, 0.5, 0.5, 0.5]


# --- Ritz projections --------------------------------------------------------


def test_ritz_reproduces_linears(mixed_mesh):
    V = build_space(mixed_mesh, ("left", "right", "top", "bottom"))
    u = lambda x: 1 + x[:, 0] - 2 * x[:, 1]
    gu = lambda x: np.broadcast_to([1.0, -2.0], x.shape)
    for bc in ("dirichlet", "mean-value"):
        assert np.allclose(ritz_project(V, u, gu, bc), V.interpolate(u), atol=1e-11)


def test_ritz_mean_value_preserves_mean(mixed_mesh):
    V = build_space(mixed_mesh)
    u = lambda x: np.sin(3 * x[:, 0]) * np.cos(x[:, 1]) + x[:, 0] ** 2
    gu = lambda x: np.stack([3 * np.cos(3 * x[:, 0]) * np.cos(x[:, 1]) + 2 * x[:, 0],
                             -np.sin(3 * x[:, 0]) * np.sin(x[:, 1])], 1)
    r = ritz_project(V, u, gu, "mean-value")
    from anisostokes.verify import _integral, _integral_weights

    assert _integral_weights(V) @ r == pytest.approx(_integral(V, u), abs=1e-10)


def test_ritz_first_order_convergence():
    u = lambda x: np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])
    gu = lambda x: np.pi * np.stack([np.cos(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1]),
                                     np.sin(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1])], 1)
    errs = []
    for n in (4, 8, 16, 32):
        m = build_quad_grid(n, n)
        V = build_space(m, ("left", "right", "top", "bottom"))
        r = ritz_project(V, u, gu)
        from anisostokes.spaces import cell_batches

        acc = 0.0
        for b in cell_batches(m, "norm"):
            g = np.einsum("cqai,ca->cqi", b.grad, r[b.dofs])
            ge = gu(b.points.reshape(-1, 2)).reshape(g.shape)
            acc += float(((g - ge) ** 2).sum(-1).ravel() @ b.JxW.ravel())
        errs.append(math.sqrt(acc))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.allclose(ratios, 2.0, atol=0.1)


def test_ritz_without_dirichlet_rejected(mixed_mesh):
    V = build_space(mixed_mesh)
    with pytest.raises(InvalidArgumentError):
        ritz_project(V, lambda x: x[:, 0], lambda x: np.ones_like(x))
    with pytest.raises(InvalidArgumentError):
        ritz_project(V, lambda x: x[:, 0], lambda x: np.ones_like(x), bc="robin")


# --- solves ------------------------------------------------------------------


def test_galerkin_residual(mixed_mesh):
    sol = solve_stokes(mixed_mesh, manufactured_solution(), StabConfig.make("S", 2.5e-3))
    A, b = sol.system.matrix, sol.system.rhs
    assert np.linalg.norm(b - A @ sol.x) / np.linalg.norm(b) <= 1e-10


def test_mirror_symmetry_example1():
    # mirror-symmetric mesh and data: v1 is odd and v2 even under y -> -y
    m = build_alternating_mesh(4, 0.5)
    sol = solve_stokes(m, manufactured_solution(), StabConfig.make("S"))
    x, y = m.vertices.T
    key = {(round(a, 12), round(b, 12)): i for i, (a, b) in enumerate(m.vertices)}
    mirror = np.array([key[(round(a, 12), round(-b, 12))] for a, b in m.vertices])
    scale = np.abs(sol.v1).max()
    assert np.abs(sol.v1 + sol.v1[mirror]).max() <= 1e-8 * scale
    assert np.abs(sol.v2 - sol.v2[mirror]).max() <= 1e-8 * scale
    assert np.abs(sol.p + sol.p[mirror]).max() <= 1e-8 * np.abs(sol.p).max()


def test_sweep_positions():
    xs = sweep_positions(0.0, 0.249, 1e-3)
    assert len(xs) == 250 and xs[-1] == 0.249
    with pytest.raises(InvalidArgumentError):
        sweep_positions(0, 1, 0)


def test_sweep_symmetric_in_y():
    cfg = StabConfig.make("S", 2.5e-3)
    a = sweep_point(0.25, 0.01, cfg, y0=0.05)
    b = sweep_point(0.25, 0.01, cfg, y0=-0.05)
    assert a.p_h1_norm == pytest.approx(b.p_h1_norm, rel=1e-8)


def test_sweep_threads_keep_order():
    cfg = StabConfig.make("S", 2.5e-3)
    xs = [0.0, 0.003, 0.006]
    serial = x0_sweep(0.25, xs, cfg)
    threaded = x0_sweep(0.25, xs, cfg, threads=3)
    assert [p.x0 for p in threaded] == xs
    assert [p.p_h1_norm for p in threaded] == [p.p_h1_norm for p in serial]


def test_sweep_records_failures():
    # a hole crossing the outer boundary is rejected; the sweep keeps going
    pts = x0_sweep(0.25, [0.0, 0.65], StabConfig.make("S", 2.5e-3))
    assert not pts[0].error
    assert pts[1].error and math.isnan(pts[1].p_h1_norm)


def test_max_relative_jump():
    assert max_relative_jump([1.0, 1.2, 1.0]) == pytest.approx(0.2)
    assert max_relative_jump([3.0]) == 0.0
