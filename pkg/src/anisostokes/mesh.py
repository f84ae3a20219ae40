"""Patch grids, locally modified cut-patch subdivision and structured anisotropic meshes.

A :class:`Mesh` is a conforming mixed triangle/quadrilateral complex.  Cells are
stored in a padded integer array (``-1`` in the fourth column marks a
triangle) so that assembly can work on homogeneous blocks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DegenerateCellError, InvalidArgumentError, UnsupportedCutError

TRI, QUAD = 3, 4
REGULAR, ANISO = 0, 1
# edge classes
EDGE_REGULAR, EDGE_ANISO, EDGE_BOUNDARY_EXTERIOR = 0, 1, 2

# boundary tags; 0 means interior edge
TAG_NONE, TAG_LEFT, TAG_RIGHT, TAG_BOTTOM, TAG_TOP, TAG_INTERFACE = 0, 1, 2, 3, 4, 5
TAG_NAMES = {
    TAG_LEFT: "left",
    TAG_RIGHT: "right",
    TAG_BOTTOM: "bottom",
    TAG_TOP: "top",
    TAG_INTERFACE: "interface",
}
TAG_IDS = {v: k for k, v in TAG_NAMES.items()}

DEFAULT_SNAP_TOL = 1e-8


# ---------------------------------------------------------------------------
# patch grid and implicit boundaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchMesh:
    """Tensor grid of ``nx * ny`` congruent rectangular patches on ``bbox``.

    ``bbox`` is ``(xmin, xmax, ymin, ymax)``.
    """

    nx: int
    ny: int
    bbox: tuple

    @property
    def dx(self) -> float:
        return (self.bbox[1] - self.bbox[0]) / self.nx

    @property
    def dy(self) -> float:
        return (self.bbox[3] - self.bbox[2]) / self.ny

    @property
    def H(self) -> float:
        return max(self.dx, self.dy)

    @property
    def n_patches(self) -> int:
        return self.nx * self.ny

    def corner(self, i: int, j: int) -> np.ndarray:
        return np.array([self.bbox[0] + i * self.dx, self.bbox[2] + j * self.dy])

    def node_grid(self) -> np.ndarray:
        """The ``(2nx+1) x (2ny+1)`` grid of patch nodes (corners, edge midpoints, centres)."""
        xs = np.linspace(self.bbox[0], self.bbox[1], 2 * self.nx + 1)
        ys = np.linspace(self.bbox[2], self.bbox[3], 2 * self.ny + 1)
        return np.stack(np.meshgrid(xs, ys, indexing="xy"), axis=-1)


def build_patch_mesh(nx: int, ny: int, bbox: Sequence[float] = (-1.0, 1.0, -1.0, 1.0)) -> PatchMesh:
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise InvalidArgumentError(f"patch counts must be positive integers, got nx={nx}, ny={ny}")
    bbox = tuple(float(b) for b in bbox)
    if len(bbox) != 4 or not (bbox[1] > bbox[0] and bbox[3] > bbox[2]):
        raise InvalidArgumentError(f"degenerate bounding box {bbox}")
    return PatchMesh(int(nx), int(ny), bbox)


class ImplicitBoundary:
    """Level set ``phi`` with ``phi < 0`` inside the computational domain.

    ``intersect`` returns the parameter ``t`` in ``[0, 1]`` of the zero of ``phi``
    on the segment ``a + t (b - a)``; the generic version uses Brent's method.
    """

    tag = TAG_INTERFACE

    def __init__(self, phi: Callable[[np.ndarray], np.ndarray]):
        self._phi = phi

    def phi(self, pts) -> np.ndarray:
        return np.asarray(self._phi(np.asarray(pts, dtype=float)), dtype=float)

    def intersect(self, a, b) -> float:
        from scipy.optimize import brentq

        a = np.asarray(a, float)
        b = np.asarray(b, float)
        return brentq(lambda t: float(self.phi((a + t * (b - a))[None, :])[0]), 0.0, 1.0, xtol=1e-15)


class CircleHole(ImplicitBoundary):
    """Exterior of the disc of radius ``radius`` about ``center``; the disc is removed."""

    def __init__(self, center=(0.0, 0.0), radius: float = 0.4):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)

    def phi(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        d = pts - self.center
        return self.radius - np.hypot(d[..., 0], d[..., 1])

    def intersect(self, a, b) -> float:
        a = np.asarray(a, float) - self.center
        d = np.asarray(b, float) - self.center - a
        # |a + t d|^2 = R^2
        qa = d @ d
        qb = 2.0 * (a @ d)
        qc = a @ a - self.radius**2
        disc = max(qb * qb - 4.0 * qa * qc, 0.0)
        sq = np.sqrt(disc)
        # numerically stable pair of roots
        q = -0.5 * (qb + np.copysign(sq, qb)) if qb != 0.0 else -0.5 * sq
        roots = [q / qa] + ([qc / q] if q != 0.0 else [])
        roots = [t for t in roots if -1e-14 <= t <= 1.0 + 1e-14]
        if not roots:
            raise UnsupportedCutError("segment does not cross the circle")
        return float(min(max(roots[0], 0.0), 1.0))


class HalfPlane(ImplicitBoundary):
    """``phi = n . (x - p)``; the domain is the side the normal points away from."""

    def __init__(self, point, normal):
        self.point = np.asarray(point, float)
        self.normal = np.asarray(normal, float)

    def phi(self, pts) -> np.ndarray:
        return (np.asarray(pts, float) - self.point) @ self.normal

    def intersect(self, a, b) -> float:
        fa = float(self.phi(np.asarray(a, float)))
        fb = float(self.phi(np.asarray(b, float)))
        return fa / (fa - fb)


# ---------------------------------------------------------------------------
# cut patterns
# ---------------------------------------------------------------------------

# patch-local nodes: 0..3 corners (ccw from bottom-left), 4..7 edge nodes
# (bottom, right, top, left), 8 interior node
EDGE_CORNERS = ((0, 1), (1, 2), (3, 2), (0, 3))  # parameter t runs from first to second corner
REF_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
SUBQUADS = ((0, 4, 8, 7), (4, 1, 5, 8), (8, 5, 2, 6), (7, 8, 6, 3))


@dataclass
class CutPattern:
    """Classification of one patch against the boundary.

    ``kind`` is ``"NONE"`` or one of ``"A"`` (two opposite edges cut), ``"B"``
    (two adjacent edges), ``"C"`` (a vertex and the interior of an edge) or
    ``"D"`` (two opposite vertices).  ``edge_params`` maps a patch edge (0..3)
    to the crossing parameter along it, ``vertices`` lists corners lying on the
    boundary.  For ``NONE`` patches ``inside`` says whether the patch is kept.
    """

    kind: str
    edge_params: dict = field(default_factory=dict)
    vertices: tuple = ()
    corner_sign: tuple = (0, 0, 0, 0)
    inside: bool = True

    @property
    def cut(self) -> bool:
        return self.kind != "NONE"

    @property
    def params(self) -> tuple:
        return tuple(self.edge_params[e] for e in sorted(self.edge_params))


def _sign(v: float) -> int:
    return 0 if v == 0.0 else (1 if v > 0 else -1)


def classify_corners(corner_sign: Sequence[int], edge_params: dict) -> CutPattern:
    """Decide the cut pattern from corner signs (0 = on the boundary) and edge crossings."""
    hits = tuple(k for k in range(4) if corner_sign[k] == 0)
    cut_edges = sorted(edge_params)
    ne, nv = len(cut_edges), len(hits)
    signs = tuple(int(s) for s in corner_sign)
    nonzero = [s for s in signs if s != 0]

    def uncut():
        inside = bool(nonzero) and nonzero[0] < 0
        if nonzero and any(s != nonzero[0] for s in nonzero):
            raise UnsupportedCutError(f"inconsistent corner signs {signs} for an uncut patch")
        return CutPattern("NONE", {}, hits, signs, inside)

    if ne == 0 and nv <= 1:
        return uncut()
    if ne == 0 and nv == 2:
        a, b = hits
        if (b - a) % 2 == 1:  # adjacent corners: boundary runs along a patch edge
            return uncut()
        others = [signs[k] for k in range(4) if k not in hits]
        if others[0] == others[1]:  # grazing through two opposite corners
            return CutPattern("NONE", {}, hits, signs, others[0] < 0)
        return CutPattern("D", {}, hits, signs)
    if ne == 2 and nv == 0:
        e1, e2 = cut_edges
        kind = "A" if (e2 - e1) == 2 else "B"
        return CutPattern(kind, dict(edge_params), (), signs)
    if ne == 1 and nv == 1:
        (e,) = cut_edges
        if hits[0] in EDGE_CORNERS[e]:
            raise UnsupportedCutError("boundary crosses an edge twice")
        return CutPattern("C", dict(edge_params), hits, signs)
    raise UnsupportedCutError(f"patch cut on {ne} edges and {nv} vertices is not supported")


def cut_patch(
    pm: PatchMesh,
    i: int,
    j: int,
    boundary: ImplicitBoundary,
    snap_tol: float = DEFAULT_SNAP_TOL,
) -> CutPattern:
    """Classify the single patch ``(i, j)``.

    This looks at the patch in isolation; :func:`build_lmfem_mesh` makes the
    same decisions globally so that neighbouring patches agree on shared
    vertices and edges.
    """
    corners = np.array([pm.corner(i, j), pm.corner(i + 1, j), pm.corner(i + 1, j + 1), pm.corner(i, j + 1)])
    phi = boundary.phi(corners)
    signs = [_sign(v) for v in phi]
    params = {}
    for e, (a, b) in enumerate(EDGE_CORNERS):
        if signs[a] * signs[b] < 0:
            t = boundary.intersect(corners[a], corners[b])
            ln = np.linalg.norm(corners[b] - corners[a])
            if t * ln <= snap_tol * pm.H:
                signs[a] = 0
            elif (1.0 - t) * ln <= snap_tol * pm.H:
                signs[b] = 0
            else:
                params[e] = t
    # a snapped corner removes crossings on the other edge through it
    params = {e: t for e, t in params.items() if all(signs[c] != 0 for c in EDGE_CORNERS[e])}
    _check_double_crossings(pm, i, j, boundary, signs)
    return classify_corners(signs, params)


def _check_double_crossings(pm, i, j, boundary, signs):
    nodes = pm.node_grid()[2 * j : 2 * j + 3, 2 * i : 2 * i + 3].reshape(-1, 2)
    mid = boundary.phi(nodes[[1, 5, 7, 3, 4]])  # bottom, right, top, left, centre
    for e, (a, b) in enumerate(EDGE_CORNERS):
        if signs[a] == signs[b] != 0 and _sign(mid[e]) == -signs[a]:
            raise UnsupportedCutError(f"patch ({i},{j}): edge {e} crossed twice")
    nz = [s for s in signs if s != 0]
    if nz and all(s == nz[0] for s in nz) and len(nz) == 4 and _sign(mid[4]) == -nz[0]:
        raise UnsupportedCutError(f"patch ({i},{j}): boundary enclosed inside a single patch")


# ---------------------------------------------------------------------------
# subdivision
# ---------------------------------------------------------------------------


def _angles(p: np.ndarray) -> np.ndarray:
    """Interior angles (radians) of polygon(s) ``p[..., k, 2]``."""
    prev = np.roll(p, 1, axis=-2) - p
    nxt = np.roll(p, -1, axis=-2) - p
    cross = prev[..., 0] * nxt[..., 1] - prev[..., 1] * nxt[..., 0]
    dot = (prev * nxt).sum(-1)
    return np.arctan2(np.abs(cross), dot)


def signed_area(p: np.ndarray) -> np.ndarray:
    x, y = p[..., 0], p[..., 1]
    return 0.5 * (x * np.roll(y, -1, axis=-1) - np.roll(x, -1, axis=-1) * y).sum(-1)


def interior_node(kind: str, nodes: np.ndarray, pattern: CutPattern) -> np.ndarray:
    """Position of the interior node of a cut patch; it always lies on the chord.

    Patterns A, C and D use the chord midpoint.  Pattern B uses the foot of the
    perpendicular from the cut-off corner, which splits the corner triangle
    into two right triangles however thin it is.
    """
    if kind == "D":
        a, b = pattern.vertices
        return 0.5 * (nodes[a] + nodes[b])
    if kind == "C":
        (c,) = pattern.vertices
        (e,) = pattern.edge_params
        return 0.5 * (nodes[c] + nodes[4 + e])
    e1, e2 = sorted(pattern.edge_params)
    p, q = nodes[4 + e1], nodes[4 + e2]
    if kind == "B":
        corner = (set(EDGE_CORNERS[e1]) & set(EDGE_CORNERS[e2])).pop()
        d = q - p
        t = float((nodes[corner] - p) @ d / (d @ d))
        return p + t * d
    return 0.5 * (p + q)


# counter-clockwise loop of corners and edge nodes around the patch
BOUNDARY_LOOP = (0, 4, 1, 5, 2, 6, 3, 7)


def subdivide_patch(nodes: np.ndarray, pattern: CutPattern):
    """Split one patch given its nine node positions.

    ``nodes`` has shape ``(9, 2)`` in the local numbering (corners, edge nodes,
    interior node; the interior entry is overwritten for cut patches).
    Returns ``(cells, nodes)`` where ``cells`` lists local index tuples, four
    quadrilaterals for an uncut patch and eight triangles for a cut one.

    A cut patch is split along the chord into two polygons sharing the
    interior node, and each polygon is triangulated so that its largest
    angle is as small as possible.
    """
    nodes = np.array(nodes, dtype=float)
    if not pattern.cut:
        return [tuple(q) for q in SUBQUADS], nodes

    nodes[8] = interior_node(pattern.kind, nodes, pattern)
    ends = [c for c in pattern.vertices] + [4 + e for e in sorted(pattern.edge_params)]
    a, b = (BOUNDARY_LOOP.index(k) for k in ends)
    loop = BOUNDARY_LOOP[a:] + BOUNDARY_LOOP[:a]
    b = (b - a) % 8
    tris = []
    for poly in (loop[: b + 1] + (8,), loop[b:] + (loop[0], 8)):
        tris.extend(_minmax_triangulation(nodes, poly))
    if len(tris) != 8:
        raise DegenerateCellError(f"cut pattern {pattern.kind} produced {len(tris)} triangles")
    for t in tris:
        if signed_area(nodes[list(t)]) <= 0.0:
            raise DegenerateCellError(f"zero-area triangle {t} in cut pattern {pattern.kind}")
    return tris, nodes


def _minmax_triangulation(xy: np.ndarray, poly: tuple) -> list:
    """Triangulate the counter-clockwise polygon ``poly`` minimising the largest angle."""
    n = len(poly)
    pts = xy[list(poly)]
    triples = np.array(list(combinations(range(n), 3)))
    p = pts[triples]  # (T, 3, 2)
    worst = _angles(p).max(axis=1)
    longest = np.max(np.sum((p - np.roll(p, 1, axis=1)) ** 2, axis=2), axis=1)
    ok = signed_area(p) > 1e-14 * longest
    # a triangle must not contain any other polygon vertex (closed test)
    e0 = np.roll(p, -1, axis=1) - p  # (T, 3, 2)
    rel = pts[None, None, :, :] - p[:, :, None, :]  # (T, 3, n, 2)
    side = e0[:, :, None, 0] * rel[..., 1] - e0[:, :, None, 1] * rel[..., 0]
    inside = (side >= 0).all(axis=1)  # (T, n)
    inside[np.arange(len(triples))[:, None], triples] = False
    ok &= ~inside.any(axis=1)
    tcost = {tuple(t): (w if g else np.inf) for t, w, g in zip(triples.tolist(), worst, ok)}

    cost, split = {}, {}
    for gap in range(1, n):
        for i in range(n - gap):
            j = i + gap
            if gap == 1:
                cost[i, j] = 0.0
                continue
            best, arg = np.inf, None
            for k in range(i + 1, j):
                c = max(tcost[i, k, j], cost[i, k], cost[k, j])
                if c < best - 1e-12:
                    best, arg = c, k
            cost[i, j], split[i, j] = best, arg
    if not np.isfinite(cost[0, n - 1]):
        raise DegenerateCellError("polygon cannot be triangulated with positive areas")
    out, stack = [], [(0, n - 1)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        k = split[i, j]
        out.append((poly[i], poly[k], poly[j]))
        stack += [(i, k), (k, j)]
    return out


# ---------------------------------------------------------------------------
# mesh
# ---------------------------------------------------------------------------


@dataclass
class Mesh:
    """Conforming mixed mesh with classified edges.

    Arrays
    ------
    vertices : (Nv, 2)
    cells : (Nc, 4) vertex ids, counter-clockwise; ``cells[:, 3] == -1`` for triangles
    region : (Nc,) ``REGULAR`` or ``ANISO``
    patch : (Nc,) parent patch id (-1 if not applicable)
    edges : (Ne, 2) vertex ids
    edge_cells : (Ne, 2) adjacent cells, ``-1`` in the second slot on the boundary
    edge_tag : (Ne,) boundary tag, ``TAG_NONE`` for interior edges
    edge_outer_patch : (Ne,) edge lies on a patch boundary
    """

    vertices: np.ndarray
    cells: np.ndarray
    region: np.ndarray
    H: float
    patch: Optional[np.ndarray] = None
    patch_tag_override: dict = field(default_factory=dict)
    edge_outer_flags: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.cells = np.ascontiguousarray(self.cells, dtype=np.int64)
        self.region = np.asarray(self.region, dtype=np.int8)
        if self.patch is None:
            self.patch = -np.ones(len(self.cells), dtype=np.int64)
        self._build_edges()
        self._check()

    # --- basic geometry -------------------------------------------------
    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def nverts(self) -> np.ndarray:
        return np.where(self.cells[:, 3] < 0, TRI, QUAD)

    def cell_vertices(self, c: int) -> np.ndarray:
        return self.cells[c, : self.nverts[c]]

    def cell_coords(self, c: int) -> np.ndarray:
        return self.vertices[self.cell_vertices(c)]

    @property
    def cell_areas(self) -> np.ndarray:
        if not hasattr(self, "_areas"):
            P = self.vertices[np.where(self.cells < 0, self.cells[:, [0]], self.cells)]
            self._areas = signed_area(P)
        return self._areas

    def _cell_edge_lengths(self) -> np.ndarray:
        """(Nc, 4) local edge lengths; the padded slot of triangles is NaN."""
        nv = self.nverts
        out = np.full(self.cells.shape, np.nan)
        for k in range(4):
            sel = k < nv
            a = self.cells[sel, k]
            b = self.cells[sel, (k + 1) % 4]
            b = np.where((k + 1 == nv[sel]) | (b < 0), self.cells[sel, 0], b)
            d = self.vertices[b] - self.vertices[a]
            out[sel, k] = np.hypot(d[:, 0], d[:, 1])
        return out

    @property
    def cell_h_min(self) -> np.ndarray:
        return np.nanmin(self._cell_edge_lengths(), axis=1)

    @property
    def cell_h_max(self) -> np.ndarray:
        return np.nanmax(self._cell_edge_lengths(), axis=1)

    @property
    def aspect_ratio(self) -> np.ndarray:
        L = self._cell_edge_lengths()
        return np.nanmax(L, axis=1) / np.nanmin(L, axis=1)

    @property
    def h_tilde_min(self) -> np.ndarray:
        """Shortest edge on anisotropic cells, ``H`` on regular cells."""
        return np.where(self.region == ANISO, self.cell_h_min, self.H)

    def max_angles(self) -> np.ndarray:
        out = np.empty(self.n_cells)
        for n in (TRI, QUAD):
            sel = self.nverts == n
            if sel.any():
                out[sel] = _angles(self.vertices[self.cells[sel, :n]]).max(axis=1)
        return out

    @property
    def region_areas(self) -> tuple:
        a = self.cell_areas
        return float(a[self.region == REGULAR].sum()), float(a[self.region == ANISO].sum())

    # --- edges ----------------------------------------------------------
    def _build_edges(self):
        loc = []
        for c, nv in enumerate(self.nverts):
            vs = self.cells[c, :nv]
            for k in range(nv):
                a, b = vs[k], vs[(k + 1) % nv]
                loc.append((min(a, b), max(a, b), c, k))
        loc = np.array(loc, dtype=np.int64)
        order = np.lexsort((loc[:, 2], loc[:, 1], loc[:, 0]))
        loc = loc[order]
        key = loc[:, 0] * (self.n_vertices + 1) + loc[:, 1]
        uniq, start, counts = np.unique(key, return_index=True, return_counts=True)
        if counts.max() > 2:
            raise InvalidArgumentError("non-manifold mesh: an edge is shared by more than two cells")
        ne = len(uniq)
        self.edges = loc[start, :2].copy()
        self.edge_cells = -np.ones((ne, 2), dtype=np.int64)
        self.edge_local = -np.ones((ne, 2), dtype=np.int64)
        self.edge_cells[:, 0] = loc[start, 2]
        self.edge_local[:, 0] = loc[start, 3]
        two = counts == 2
        self.edge_cells[two, 1] = loc[start[two] + 1, 2]
        self.edge_local[two, 1] = loc[start[two] + 1, 3]
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        self.edge_length = np.hypot(d[:, 0], d[:, 1])
        area = self.cell_areas
        self.edge_hn = np.full((ne, 2), np.nan)
        self.edge_hn[:, 0] = area[self.edge_cells[:, 0]] / self.edge_length
        self.edge_hn[two, 1] = area[self.edge_cells[two, 1]] / self.edge_length[two]
        # unit normal pointing out of the first cell
        t = d / self.edge_length[:, None]
        n = np.stack([t[:, 1], -t[:, 0]], axis=1)
        c0 = self.edge_cells[:, 0]
        cent = self.cell_centroids()[c0]
        mid = 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])
        flip = ((mid - cent) * n).sum(1) < 0
        n[flip] *= -1
        self.edge_normal = n
        self.edge_tangent = np.stack([-n[:, 1], n[:, 0]], axis=1)
        self.boundary_edges = np.flatnonzero(~two)
        reg = self.region
        r0 = reg[self.edge_cells[:, 0]]
        r1 = np.where(two, reg[np.maximum(self.edge_cells[:, 1], 0)], REGULAR)
        cls = np.where((r0 == ANISO) | (two & (r1 == ANISO)), EDGE_ANISO, EDGE_REGULAR)
        cls = np.where(~two & (r0 == REGULAR), EDGE_BOUNDARY_EXTERIOR, cls)
        self.edge_class = cls.astype(np.int8)
        self.edge_tag = np.zeros(ne, dtype=np.int8)
        if self.edge_outer_flags is None:
            self.edge_outer_patch = self._outer_patch_edges()
        else:
            self.edge_outer_patch = np.asarray(self.edge_outer_flags, bool)

    def _outer_patch_edges(self) -> np.ndarray:
        out = np.zeros(len(self.edges), dtype=bool)
        two = self.edge_cells[:, 1] >= 0
        p = self.patch
        out[two] = p[self.edge_cells[two, 0]] != p[self.edge_cells[two, 1]]
        out[~two] = True
        return out

    def cell_centroids(self) -> np.ndarray:
        nv = self.nverts
        P = self.vertices[np.where(self.cells < 0, self.cells[:, [0]], self.cells)]
        s = P.sum(axis=1) - np.where(nv[:, None] == TRI, P[:, 0], 0.0)
        return s / nv[:, None]

    def tag_boundary(self, classify: Callable[[np.ndarray, np.ndarray], np.ndarray]):
        """Assign tags to boundary edges from ``classify(midpoints, normals) -> tags``."""
        b = self.boundary_edges
        mid = 0.5 * (self.vertices[self.edges[b, 0]] + self.vertices[self.edges[b, 1]])
        self.edge_tag[b] = classify(mid, self.edge_normal[b])
        return self

    def boundary_vertices(self, tags=None) -> np.ndarray:
        b = self.boundary_edges
        if tags is not None:
            tags = [TAG_IDS.get(t, t) for t in tags]
            b = b[np.isin(self.edge_tag[b], tags)]
        return np.unique(self.edges[b].ravel())

    def vertex_cell_counts(self) -> np.ndarray:
        v = self.cells[self.cells >= 0]
        return np.bincount(v, minlength=self.n_vertices)

    def _check(self):
        if (self.cell_areas <= 0).any():
            bad = np.flatnonzero(self.cell_areas <= 0)[:5]
            raise DegenerateCellError(f"cells with non-positive area: {bad.tolist()}")


def rectangle_tagger(bbox, tol: float = 1e-12):
    xmin, xmax, ymin, ymax = bbox
    scale = max(xmax - xmin, ymax - ymin)

    def classify(mid, normal):
        tags = np.full(len(mid), TAG_INTERFACE, dtype=np.int8)
        tags[np.abs(mid[:, 0] - xmin) < tol * scale] = TAG_LEFT
        tags[np.abs(mid[:, 0] - xmax) < tol * scale] = TAG_RIGHT
        tags[np.abs(mid[:, 1] - ymin) < tol * scale] = TAG_BOTTOM
        tags[np.abs(mid[:, 1] - ymax) < tol * scale] = TAG_TOP
        return tags

    return classify


# ---------------------------------------------------------------------------
# mesh builders
# ---------------------------------------------------------------------------


def build_quad_grid(nx: int, ny: int, bbox=(0.0, 1.0, 0.0, 1.0), ys=None, H=None, region=REGULAR) -> Mesh:
    """Structured quadrilateral mesh; ``ys`` optionally gives the row coordinates."""
    xs = np.linspace(bbox[0], bbox[1], nx + 1)
    ys = np.linspace(bbox[2], bbox[3], ny + 1) if ys is None else np.asarray(ys, float)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    verts = np.stack([X.ravel(), Y.ravel()], axis=1)
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    cells = np.stack(
        [idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel(), idx[1:, 1:].ravel(), idx[1:, :-1].ravel()], axis=1
    )
    if H is None:
        H = max(np.diff(xs).max(), np.diff(ys).max())
    m = Mesh(verts, cells, np.full(len(cells), region), H)
    return m.tag_boundary(rectangle_tagger(bbox))


def build_alternating_mesh(
    n_coarse: int, ratio: float, bbox=(-1.0, 1.0, -1.0, 1.0), all_aniso: bool = True
) -> Mesh:
    """Quad mesh with rows alternating between heights ``ratio*H`` and ``(1-ratio)*H``.

    Columns are uniform with width ``H/2``.  With ``all_aniso`` every cell is
    anisotropic (the whole domain is treated as the anisotropic region).
    """
    if not (0.0 < ratio < 1.0):
        raise InvalidArgumentError(f"ratio must lie in (0, 1), got {ratio}")
    if n_coarse < 1:
        raise InvalidArgumentError("n_coarse must be >= 1")
    H = (bbox[1] - bbox[0]) / n_coarse
    ny_coarse = int(round((bbox[3] - bbox[2]) / H))
    ys = [bbox[2]]
    for j in range(ny_coarse):
        y0 = bbox[2] + j * H
        ys += [y0 + ratio * H, y0 + H]
    ys[-1] = bbox[3]
    m = build_quad_grid(2 * n_coarse, 2 * ny_coarse, bbox, ys=ys, H=H, region=ANISO if all_aniso else REGULAR)
    # patches: 2x2 blocks of cells
    nxc = 2 * n_coarse
    c = np.arange(m.n_cells)
    m.patch = (c // nxc // 2) * n_coarse + (c % nxc) // 2
    m.edge_outer_patch = m._outer_patch_edges()
    return m


def build_lmfem_mesh(
    pm: PatchMesh,
    boundary: ImplicitBoundary,
    snap_tol: float = DEFAULT_SNAP_TOL,
) -> Mesh:
    """Locally modified finite element mesh of the part of ``pm`` where ``phi < 0``.

    Uncut patches become four quadrilaterals (regular cells), patches cut by the
    boundary eight triangles (anisotropic cells).  Cells outside the domain
    are dropped; the discrete boundary chords are tagged ``interface``.
    """
    nx, ny = pm.nx, pm.ny
    grid = pm.node_grid()  # (2ny+1, 2nx+1, 2)
    corners = grid[::2, ::2]
    phi = boundary.phi(corners.reshape(-1, 2)).reshape(ny + 1, nx + 1)
    sign = np.sign(phi).astype(int)

    # crossings on horizontal edges (i,j)->(i+1,j) and vertical edges (i,j)->(i,j+1)
    h_par = np.full((ny + 1, nx), np.nan)
    v_par = np.full((ny, nx + 1), np.nan)
    snap_abs = snap_tol * pm.H
    hit = sign == 0
    for j in range(ny + 1):
        for i in range(nx):
            if sign[j, i] * sign[j, i + 1] < 0:
                t = boundary.intersect(corners[j, i], corners[j, i + 1])
                if t * pm.dx <= snap_abs:
                    hit[j, i] = True
                elif (1 - t) * pm.dx <= snap_abs:
                    hit[j, i + 1] = True
                else:
                    h_par[j, i] = t
    for j in range(ny):
        for i in range(nx + 1):
            if sign[j, i] * sign[j + 1, i] < 0:
                t = boundary.intersect(corners[j, i], corners[j + 1, i])
                if t * pm.dy <= snap_abs:
                    hit[j, i] = True
                elif (1 - t) * pm.dy <= snap_abs:
                    hit[j + 1, i] = True
                else:
                    v_par[j, i] = t
    sign[hit] = 0
    h_par[(sign[:, :-1] == 0) | (sign[:, 1:] == 0)] = np.nan
    v_par[(sign[:-1, :] == 0) | (sign[1:, :] == 0)] = np.nan

    # double-crossing checks on edges and patch centres
    mid_h = boundary.phi(grid[::2, 1::2].reshape(-1, 2)).reshape(ny + 1, nx)
    mid_v = boundary.phi(grid[1::2, ::2].reshape(-1, 2)).reshape(ny, nx + 1)
    bad_h = (sign[:, :-1] == sign[:, 1:]) & (sign[:, :-1] != 0) & (np.sign(mid_h) == -sign[:, :-1])
    bad_v = (sign[:-1, :] == sign[1:, :]) & (sign[:-1, :] != 0) & (np.sign(mid_v) == -sign[:-1, :])
    if bad_h.any() or bad_v.any():
        raise UnsupportedCutError("a patch edge is crossed twice by the boundary")

    verts: list = []
    vid: dict = {}

    def node(key, xy):
        k = vid.get(key)
        if k is None:
            k = vid[key] = len(verts)
            verts.append(np.asarray(xy, float))
        return k

    cells, region, parent = [], [], []
    for j in range(ny):
        for i in range(nx):
            csign = (sign[j, i], sign[j, i + 1], sign[j + 1, i + 1], sign[j + 1, i])
            pars = {}
            for e, t in enumerate((h_par[j, i], v_par[j, i + 1], h_par[j + 1, i], v_par[j, i])):
                if not np.isnan(t):
                    pars[e] = float(t)
            pat = classify_corners(csign, pars)
            if not pat.cut:
                cen = boundary.phi(grid[2 * j + 1, 2 * i + 1][None])[0]
                if not pat.inside and not (all(s == 0 for s in csign) and cen < 0):
                    continue
            c00 = corners[j, i]
            loc_xy = np.empty((9, 2))
            loc_xy[0], loc_xy[1], loc_xy[2], loc_xy[3] = c00, corners[j, i + 1], corners[j + 1, i + 1], corners[j + 1, i]
            for e in range(4):
                a, b = EDGE_CORNERS[e]
                t = pars.get(e, 0.5)
                loc_xy[4 + e] = loc_xy[a] + t * (loc_xy[b] - loc_xy[a])
            loc_xy[8] = grid[2 * j + 1, 2 * i + 1]
            tris, loc_xy = subdivide_patch(loc_xy, pat)
            keys = [("c", i, j), ("c", i + 1, j), ("c", i + 1, j + 1), ("c", i, j + 1),
                    ("h", i, j), ("v", i + 1, j), ("h", i, j + 1), ("v", i, j), ("m", i, j)]
            gid = [node(keys[k], loc_xy[k]) for k in range(9)]
            pid = j * nx + i
            if not pat.cut:
                for q in tris:
                    cells.append([gid[k] for k in q])
                    region.append(REGULAR)
                    parent.append(pid)
                continue
            # keep triangles on the domain side of the chord
            ref = _domain_reference(pat, loc_xy, csign)
            p0, p1 = _chord(pat, loc_xy)
            dchord = p1 - p0
            side_ref = np.sign(_cross(dchord, ref - p0))
            for t in tris:
                cen = loc_xy[list(t)].mean(0)
                if np.sign(_cross(dchord, cen - p0)) == side_ref:
                    cells.append([gid[k] for k in t] + [-1])
                    region.append(ANISO)
                    parent.append(pid)

    if not cells:
        raise InvalidArgumentError("the boundary leaves no cells inside the bounding box")
    cells = np.array(cells, dtype=np.int64)
    verts = np.array(verts)
    used = np.unique(cells[cells >= 0])
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    cells = np.where(cells >= 0, remap[np.maximum(cells, 0)], -1)
    mesh = Mesh(verts[used], cells, np.array(region), pm.H, patch=np.array(parent))
    mesh.boundary = boundary
    mesh.bbox = pm.bbox
    return mesh.tag_boundary(rectangle_tagger(pm.bbox))


def _cross(a, b) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


def _chord(pat: CutPattern, xy: np.ndarray):
    ends = [xy[c] for c in pat.vertices] + [xy[4 + e] for e in sorted(pat.edge_params)]
    return ends[0], ends[1]


def _domain_reference(pat, xy, csign) -> np.ndarray:
    for k in range(4):
        if csign[k] < 0:
            return xy[k]
    raise UnsupportedCutError("cut patch without a corner inside the domain")


def build_circle_mesh(H: float, x0: float = 0.0, y0: float = 0.0, radius: float = 0.4,
                      bbox=(-1.0, 1.0, -1.0, 1.0), snap_tol: float = DEFAULT_SNAP_TOL) -> Mesh:
    """Square with a circular hole, meshed by the locally modified method with patch size ``H``."""
    if radius <= 0:
        raise InvalidArgumentError(f"radius must be positive, got {radius}")
    if not (bbox[0] < x0 - radius and x0 + radius < bbox[1] and bbox[2] < y0 - radius and y0 + radius < bbox[3]):
        raise InvalidArgumentError(f"hole at ({x0}, {y0}) with radius {radius} leaves the box {bbox}")
    n = int(round((bbox[1] - bbox[0]) / H))
    m = int(round((bbox[3] - bbox[2]) / H))
    pm = build_patch_mesh(n, m, bbox)
    return build_lmfem_mesh(pm, CircleHole((x0, y0), radius), snap_tol)


# ---------------------------------------------------------------------------
# quality
# ---------------------------------------------------------------------------


@dataclass
class QualityReport:
    K_max: float
    K_min: float
    ratio: float
    e_max: float
    e_min: float
    kappa_max: float
    angle_max: float  # degrees

    def row(self) -> dict:
        return dict(K_max=self.K_max, K_min=self.K_min, ratio=self.ratio, e_max=self.e_max,
                    e_min=self.e_min, kappa_max=self.kappa_max, angle_max=self.angle_max)


def mesh_quality_report(m: Mesh) -> QualityReport:
    a = m.cell_areas
    return QualityReport(
        K_max=float(a.max()),
        K_min=float(a.min()),
        ratio=float(a.max() / a.min()),
        e_max=float(m.edge_length.max()),
        e_min=float(m.edge_length.min()),
        kappa_max=float(m.aspect_ratio.max()),
        angle_max=float(np.degrees(m.max_angles().max())),
    )
