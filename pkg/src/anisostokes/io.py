"""File output: legacy VTK, CSV tables and an artifact manifest."""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .mesh import QUAD, Mesh

VTK_TRIANGLE, VTK_QUAD = 5, 9

QUALITY_HEADER = ["x0", "K_max", "K_min", "ratio", "e_max", "e_min", "kappa_max", "angle_max"]
CONVERGENCE_HEADER = ["H", "err_v_h1", "err_v_l2", "err_p_l2", "err_p_h1"]
SWEEP_HEADER = ["x0", "p_h1_norm", "kappa_max", "K_min"]


def fmt(x) -> str:
    """Six significant digits; empty for missing values."""
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if np.isnan(x):
        return "nan"
    return f"{x:.6g}"


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in r])
    return path


def write_quality_csv(path, rows: Sequence[tuple]) -> Path:
    """``rows`` are ``(x0, QualityReport)`` pairs."""
    out = []
    for x0, q in rows:
        out.append([x0, q.K_max, q.K_min, q.ratio, q.e_max, q.e_min, q.kappa_max, q.angle_max])
    return write_csv(path, QUALITY_HEADER, out)


def write_convergence_csv(path, rec) -> Path:
    rows = rec.rows()
    rows.append(["order"] + [rec.orders.get(k) for k in CONVERGENCE_HEADER[1:]])
    return write_csv(path, CONVERGENCE_HEADER, rows)


def write_sweep_csv(path, points) -> Path:
    rows = []
    for p in points:
        q = p.quality
        rows.append([p.x0, p.p_h1_norm, q.kappa_max if q else None, q.K_min if q else None])
    return write_csv(path, SWEEP_HEADER, rows)


def write_vtk(path, m: Mesh, point_data: Optional[dict] = None, cell_data: Optional[dict] = None, title: str = "anisostokes") -> Path:
    """Legacy ASCII unstructured grid.

    Cell data always includes ``region`` and ``aspect_ratio``.  Point arrays
    of shape ``(n,)`` are written as scalars, ``(n, 2)`` as 3-vectors.
    """
    path = Path(path)
    nv = m.nverts
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {m.n_vertices} double")
    lines += [f"{x:.17g} {y:.17g} 0" for x, y in m.vertices]
    size = int((nv + 1).sum())
    lines.append(f"CELLS {m.n_cells} {size}")
    for c in range(m.n_cells):
        vs = m.cells[c, : nv[c]]
        lines.append(" ".join([str(nv[c])] + [str(v) for v in vs]))
    lines.append(f"CELL_TYPES {m.n_cells}")
    lines += [str(VTK_QUAD if n == QUAD else VTK_TRIANGLE) for n in nv]
    cdata = {"region": m.region.astype(int), "aspect_ratio": m.aspect_ratio}
    cdata.update(cell_data or {})
    lines.append(f"CELL_DATA {m.n_cells}")
    for name, arr in cdata.items():
        lines += _vtk_array(name, np.asarray(arr))
    if point_data:
        lines.append(f"POINT_DATA {m.n_vertices}")
        for name, arr in point_data.items():
            lines += _vtk_array(name, np.asarray(arr))
    path.write_text("\n".join(lines) + "\n")
    return path


def _vtk_array(name: str, arr: np.ndarray) -> list:
    if arr.ndim == 1:
        kind = "int" if np.issubdtype(arr.dtype, np.integer) else "double"
        out = [f"SCALARS {name} {kind} 1", "LOOKUP_TABLE default"]
        out += [str(int(v)) if kind == "int" else f"{v:.17g}" for v in arr]
        return out
    vec = np.zeros((len(arr), 3))
    vec[:, : arr.shape[1]] = arr
    return [f"VECTORS {name} double"] + [f"{a:.17g} {b:.17g} {c:.17g}" for a, b, c in vec]


def read_vtk_counts(path) -> dict:
    """Point/cell counts and cell types of a legacy VTK file (for checks)."""
    toks = Path(path).read_text().split("\n")
    out = {}
    for i, line in enumerate(toks):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "POINTS":
            out["points"] = int(parts[1])
        elif parts[0] == "CELLS":
            out["cells"] = int(parts[1])
        elif parts[0] == "CELL_TYPES":
            n = int(parts[1])
            out["types"] = [int(t) for t in toks[i + 1 : i + 1 + n]]
    return out


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(outdir, files: Sequence, extra: Optional[dict] = None) -> Path:
    """``manifest.json`` listing artifacts with their SHA-256 hashes."""
    outdir = Path(outdir).resolve()
    entries = []
    for f in sorted(Path(f).resolve() for f in files):
        entries.append({"file": f.relative_to(outdir).as_posix(), "sha256": sha256(f), "bytes": f.stat().st_size})
    doc = {"artifacts": entries}
    if extra:
        doc.update(extra)
    path = outdir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path
