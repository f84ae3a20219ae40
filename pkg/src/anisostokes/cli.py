"""Command line driver for the numerical experiments.

    anisostokes example1 --levels 4,8,16,32 --stab S --gamma 1e-2 --out results
    anisostokes example2 --H 8 --x0 0.006 --quality
    anisostokes sweep --levels 4,8 --sweep-step 1e-3
    anisostokes mesh-quality --H 8 --x0 0.015 --vtk
    anisostokes single-solve --stab none

Levels are given as inverse patch sizes (``8`` means ``H = 1/8``).
Exit status: 0 success, 2 usage, 3 numerical failure, 4 mesh failure.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import io, stabilize
from .errors import (
    AnisoStokesError,
    DegenerateCellError,
    InvalidArgumentError,
    InvertedCellError,
    SingularMatrixError,
    UnsupportedCutError,
)
from .mesh import build_circle_mesh, mesh_quality_report
from .stokes import write_matrix_market
from . import verify

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_MESH = 0, 2, 3, 4
EXPERIMENTS = ("example1", "example2", "sweep", "mesh-quality", "single-solve")
STABS = ("S", "S2", "SCIP", "none")
MESH_ERRORS = (UnsupportedCutError, DegenerateCellError, InvertedCellError)


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    experiment: str = "example1"
    levels: tuple = (4, 8, 16, 32)
    stab: str = "S"
    gamma: Optional[float] = None
    gamma_i: Optional[float] = None
    gamma_0: Optional[float] = None
    skip_outer_patch_jumps: bool = True
    x0: float = 0.0
    y0: float = 0.0
    radius: float = 0.4
    ratio: float = 1e-3
    out: str = "anisostokes-out"
    vtk: bool = False
    mm: bool = False
    quality: bool = False
    edge_ledger: bool = False
    sweep_step: float = 1e-3
    sweep_stop: float = 0.249

    def validate(self) -> "RunConfig":
        if self.experiment not in EXPERIMENTS:
            raise UsageError(f"experiment: expected one of {', '.join(EXPERIMENTS)}, got {self.experiment!r}")
        if self.stab not in STABS:
            raise UsageError(f"stab: expected one of {', '.join(STABS)}, got {self.stab!r}")
        if not self.levels:
            raise UsageError("levels: at least one mesh level is required")
        if any(n < 1 for n in self.levels):
            raise UsageError("levels: inverse patch sizes must be positive integers")
        for name in ("gamma", "gamma_i", "gamma_0"):
            v = getattr(self, name)
            if v is not None and self.stab != "none" and not v > 0:
                raise UsageError(f"{name}: stabilisation parameter must be positive, got {v}")
        if not 0 < self.ratio < 1:
            raise UsageError(f"ratio: must lie in (0, 1), got {self.ratio}")
        if not self.radius > 0:
            raise UsageError(f"radius: must be positive, got {self.radius}")
        if not self.sweep_step > 0:
            raise UsageError(f"sweep_step: must be positive, got {self.sweep_step}")
        return self

    def stab_config(self) -> Optional[stabilize.StabConfig]:
        if self.stab == "none":
            return None
        base = 1e-2 if self.experiment in ("example1", "single-solve") else 2.5e-3
        if self.stab in ("S2", "SCIP"):
            base *= 4
        g = base if self.gamma is None else self.gamma
        return stabilize.StabConfig.make(
            self.stab, g, self.gamma_i, self.gamma_0, skip_outer_patch_jumps=self.skip_outer_patch_jumps
        )


# ---------------------------------------------------------------------------
# config file
# ---------------------------------------------------------------------------


def _parse_bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_levels(s: str) -> tuple:
    return tuple(int(t) for t in s.replace(" ", "").split(",") if t)


def _parse_optional_float(s: str):
    return None if s.strip().lower() in ("", "none") else float(s)


PARSERS = {
    "experiment": str,
    "levels": _parse_levels,
    "stab": lambda s: s if s == "none" else s.upper(),
    "gamma": _parse_optional_float,
    "gamma_i": _parse_optional_float,
    "gamma_0": _parse_optional_float,
    "skip_outer_patch_jumps": _parse_bool,
    "x0": float,
    "y0": float,
    "radius": float,
    "ratio": float,
    "out": str,
    "vtk": _parse_bool,
    "mm": _parse_bool,
    "quality": _parse_bool,
    "edge_ledger": _parse_bool,
    "sweep_step": float,
    "sweep_stop": float,
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines with ``#`` comments; returns the values found."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (t.strip() for t in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in PARSERS:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}; valid keys: {', '.join(sorted(PARSERS))}")
        try:
            out[key] = PARSERS[key](val)
        except ValueError as exc:
            raise UsageError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return out


def parse_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    return replace(RunConfig(), **parse_config_text(text, str(path))).validate()


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anisostokes", description="Stabilised equal-order Stokes on anisotropic meshes")
    p.add_argument("experiment", nargs="?", choices=EXPERIMENTS)
    p.add_argument("--config", help="key = value file; flags override its values")
    p.add_argument("--levels", help="comma separated inverse patch sizes, e.g. 4,8,16,32")
    p.add_argument("--H", dest="H", type=int, help="single inverse patch size (shorthand for --levels)")
    p.add_argument("--stab", type=lambda s: s if s == "none" else s.upper(), choices=STABS)
    p.add_argument("--gamma", type=float)
    p.add_argument("--gamma-i", dest="gamma_i", type=float)
    p.add_argument("--gamma-0", dest="gamma_0", type=float)
    p.add_argument("--keep-outer-jumps", dest="skip_outer_patch_jumps", action="store_const", const=False)
    p.add_argument("--x0", type=float)
    p.add_argument("--y0", type=float)
    p.add_argument("--radius", type=float)
    p.add_argument("--ratio", type=float, help="thin-row fraction of the alternating mesh")
    p.add_argument("--out", help="output directory")
    p.add_argument("--vtk", action="store_const", const=True, help="write VTK meshes and fields")
    p.add_argument("--mm", action="store_const", const=True, help="write system matrices in MatrixMarket format")
    p.add_argument("--quality", action="store_const", const=True, help="write mesh quality tables")
    p.add_argument("--edge-ledger", dest="edge_ledger", action="store_const", const=True)
    p.add_argument("--sweep-step", dest="sweep_step", type=float)
    p.add_argument("--sweep-stop", dest="sweep_stop", type=float)
    return p


def config_from_args(argv) -> RunConfig:
    ns = build_parser().parse_args(argv)
    cfg = parse_config(ns.config) if ns.config else RunConfig()
    over = {}
    for f in fields(RunConfig):
        v = getattr(ns, f.name, None)
        if v is not None and f.name != "levels":
            over[f.name] = v
    if ns.levels is not None:
        try:
            over["levels"] = _parse_levels(ns.levels)
        except ValueError:
            raise UsageError(f"levels: expected comma separated integers, got {ns.levels!r}") from None
    if ns.H is not None:
        over["levels"] = (ns.H,)
    return replace(cfg, **over).validate()


def thread_count() -> int:
    raw = os.environ.get("ANISOSTOKES_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ANISOSTOKES_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"ANISOSTOKES_THREADS must be a positive integer, got {raw!r}")
    return n


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


class Runner:
    def __init__(self, cfg: RunConfig, log=print):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.files: list = []
        self.failures: list = []
        self.log = log

    def artifact(self, path) -> Path:
        self.files.append(Path(path))
        return Path(path)

    def solve_level(self, n: int, mesh_fn, exact, pure_dirichlet: bool = False):
        cfg = self.cfg
        H = 1.0 / n
        m = mesh_fn(H)
        sides = ("left", "right", "top", "bottom") if pure_dirichlet else verify.DIRICHLET_SIDES
        gauge = "mean-zero-shift" if pure_dirichlet else "none"
        sol = verify.solve_stokes(m, exact, cfg.stab_config(), dirichlet_sides=sides, gauge=gauge)
        norms = verify.error_norms(m, sol.v1, sol.v2, sol.p, exact)
        tag = f"{cfg.experiment}_H{n}"
        if cfg.vtk:
            self.artifact(io.write_vtk(self.out / f"{tag}.vtk", m, {"v": np.c_[sol.v1, sol.v2], "p": sol.p}))
        if cfg.mm:
            path = self.out / f"{tag}.mtx"
            write_matrix_market(path, sol.system.matrix, comment=f"{tag} stokes system")
            self.artifact(path)
        if cfg.edge_ledger and sol.stab is not None:
            path = self.out / f"{tag}_edges.csv"
            sol.stab.write_ledger(path, sol.p)
            self.artifact(path)
        self.log(
            f"H=1/{n}: |grad(v-vh)|={norms['err_v_h1']:.6g} |v-vh|={norms['err_v_l2']:.6g} "
            f"|p-ph|={norms['err_p_l2']:.6g} |grad(p-ph)|={norms['err_p_h1']:.6g} residual={sol.report.residual:.1e}"
        )
        return m, norms

    def convergence(self, mesh_fn, exact, pure_dirichlet: bool = False):
        cfg = self.cfg
        done_H, rows, quality = [], [], []
        for n in sorted(cfg.levels):
            try:
                m, norms = self.solve_level(n, mesh_fn, exact, pure_dirichlet)
            except SingularMatrixError as exc:
                self.failures.append((EXIT_NUMERIC, f"H=1/{n}: {exc}"))
                self.log(f"H=1/{n}: numerical failure: {exc}")
                continue
            done_H.append(1.0 / n)
            rows.append(norms)
            if cfg.quality:
                quality.append((cfg.x0, mesh_quality_report(m)))
        if rows:
            errs = {k: [r[k] for r in rows] for k in verify.NORM_KEYS}
            rec = verify.ConvergenceRecord(done_H, errs)
            self.artifact(io.write_convergence_csv(self.out / f"{cfg.experiment}_convergence.csv", rec))
            if rec.orders:
                self.log("orders: " + " ".join(f"{k}={rec.orders[k]:.3f}" for k in verify.NORM_KEYS))
        if quality:
            self.artifact(io.write_quality_csv(self.out / f"{cfg.experiment}_quality.csv", quality))

    def example1(self):
        exact = verify.manufactured_solution(self.cfg.x0, self.cfg.y0, self.cfg.radius)
        self.convergence(lambda H: verify.example1_mesh(H, self.cfg.ratio), exact)

    def single_solve(self):
        exact = verify.manufactured_solution(self.cfg.x0, self.cfg.y0, self.cfg.radius)
        self.convergence(lambda H: verify.example1_mesh(H, self.cfg.ratio), exact, pure_dirichlet=True)

    def example2(self):
        c = self.cfg
        exact = verify.manufactured_solution(c.x0, c.y0, c.radius)
        self.convergence(lambda H: build_circle_mesh(H, c.x0, c.y0, c.radius), exact)

    def mesh_quality(self):
        c = self.cfg
        rows = []
        for n in sorted(c.levels):
            m = build_circle_mesh(1.0 / n, c.x0, c.y0, c.radius)
            q = mesh_quality_report(m)
            rows.append((c.x0, q))
            self.log(
                f"H=1/{n} x0={c.x0:g}: K_max={q.K_max:.3e} K_min={q.K_min:.3e} ratio={q.ratio:.3e} "
                f"e_max={q.e_max:.3e} e_min={q.e_min:.3e} kappa_max={q.kappa_max:.4g} angle_max={q.angle_max:.1f}"
            )
            if c.vtk:
                self.artifact(io.write_vtk(self.out / f"mesh_H{n}.vtk", m))
        self.artifact(io.write_quality_csv(self.out / "mesh_quality.csv", rows))

    def sweep(self):
        c = self.cfg
        scfg = c.stab_config()
        if scfg is None:
            raise UsageError("stab: the sweep needs a stabilisation")
        xs = verify.sweep_positions(c.x0, c.sweep_stop, c.sweep_step)
        threads = thread_count()
        for n in sorted(c.levels):
            pts = verify.x0_sweep(1.0 / n, xs, scfg, c.y0, c.radius, threads=threads)
            self.artifact(io.write_sweep_csv(self.out / f"sweep_H{n}.csv", pts))
            bad = [p for p in pts if p.error]
            vals = [p.p_h1_norm for p in pts if not p.error]
            self.log(f"H=1/{n}: {len(pts)} positions, {len(bad)} failures, max relative jump {verify.max_relative_jump(vals):.3g}")
            for p in bad:
                code = EXIT_MESH if any(e.__name__ in p.error for e in MESH_ERRORS) else EXIT_NUMERIC
                self.failures.append((code, f"H=1/{n} x0={p.x0:g}: {p.error}"))

    def run(self) -> int:
        self.out.mkdir(parents=True, exist_ok=True)
        name = self.cfg.experiment.replace("-", "_")
        getattr(self, name)()
        cfgdoc = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.cfg).items()}
        extra = {"config": cfgdoc, "failures": [m for _, m in self.failures]}
        if self.cfg.experiment in ("example2", "sweep"):
            extra["note"] = "error norms are integrated over the meshed fluid region only; the hole is excluded"
        io.write_manifest(self.out, self.files, extra)
        if self.failures:
            return max(code for code, _ in self.failures)
        return EXIT_OK


def run(cfg: RunConfig, log=print) -> int:
    try:
        return Runner(cfg, log).run()
    except MESH_ERRORS as exc:
        print(f"mesh failure: {exc}", file=sys.stderr)
        return EXIT_MESH
    except SingularMatrixError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main(argv=None) -> int:
    try:
        cfg = config_from_args(sys.argv[1:] if argv is None else argv)
        thread_count()
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return run(cfg, log=lambda s: print(s, flush=True))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidArgumentError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AnisoStokesError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
