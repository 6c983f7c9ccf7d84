"""Command-line front end: ``topograd <subcommand> --config run.toml``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import io as tio
from .config import RunConfig
from .errors import ConfigError, SolverError, TopogradError
from .exterior import (disk_polarisation_analytic, disk_polarisation_truncated, polarisation_matrix,
                       truncation_study)
from .mesh import MARKER_NAMES, build_rect_mesh
from .pde import solve_adjoint, solve_state
from .topo import PolarisationCache, td_field

log = logging.getLogger("topograd")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
WHICH = ("fd", "rates", "identity", "qvar", "dlg", "all")
TRUNC_FACTORS = (5.0, 12.5, 25.0, 50.0)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _setup_logging():
    level = os.environ.get("TOPOGRAD_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")


class _Run:
    """Output directory plus the config hash stamped into every file."""

    def __init__(self, cfg: RunConfig, out: str | None):
        self.cfg = cfg
        self.key = cfg.key()
        self.dir = Path(out or cfg.outputs.directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.formats = set(cfg.outputs.formats)

    def want(self, fmt):
        return fmt in self.formats

    def path(self, name):
        return self.dir / name

    def csv(self, name, rows, columns=None):
        if self.want("csv"):
            tio.write_csv(self.path(name), rows, self.key, columns)

    def json(self, name, payload):
        if self.want("json"):
            tio.write_json(self.path(name), payload, self.key)


def _mesh(cfg: RunConfig, extra_points=()):
    n = cfg.numerics
    pts = [(p, n.h_z) for p in extra_points]
    return build_rect_mesh(cfg.domain, n.h, cfg.fitted_background(), n.interface_ratio,
                           refine_points=pts)


def _states(cfg: RunConfig, mesh):
    st = cfg.numerics.newton()
    u = solve_state(mesh, cfg.materials, st, cfg.mode)
    q = solve_adjoint(mesh, cfg.materials, u, st, cfg.mode)
    return u, q


# ---------------------------------------------------------------------------
# subcommands


def cmd_solve(cfg: RunConfig, run: _Run, args) -> int:
    mesh = _mesh(cfg, cfg.evaluation.points)
    u, q = _states(cfg, mesh)
    rows = [{"vertex": i, "x": x, "y": y, "u": a, "q": b}
            for i, ((x, y), a, b) in enumerate(zip(mesh.vertices, u.values, q.values))]
    run.csv("fields.csv", rows)
    if run.want("vtk"):
        tio.write_vtk(run.path("fields.vtk"), mesh, {"u": u.values, "q": q.values}, None, run.key)
    hist = u.meta["newton_history"]
    run.csv("newton.csv", [{"iteration": i, "residual": r} for i, r in enumerate(hist)])
    run.json("solve.json", {"command": "solve", "n_vertices": mesh.n_vertices,
                            "n_triangles": mesh.n_triangles, "newton_history": hist,
                            "iterations": u.meta["iterations"],
                            "u_max": float(np.abs(u.values).max()),
                            "q_max": float(np.abs(q.values).max())})
    if run.want("png"):
        from . import plotting
        plotting.plot_field(mesh, u.values, run.path("u.png"), "state u")
        plotting.plot_field(mesh, q.values, run.path("q.png"), "adjoint q")
    return EXIT_OK


def cmd_td(cfg: RunConfig, run: _Run, args) -> int:
    ev = cfg.evaluation
    if ev.grid is None and not ev.points:
        raise ConfigError("evaluation: give points or grid for td")
    mesh = _mesh(cfg, ev.points)
    u, q = _states(cfg, mesh)
    n = cfg.numerics
    cache = PolarisationCache()
    results = {}
    for name, grid in (("points", ev.points), ("grid", ev.grid)):
        if not grid:
            continue
        tf = td_field(u, q, cfg.materials, cfg.omega, grid if name == "grid" else list(grid),
                      cfg.mode, ev.pol_source, n.exterior(), cache, n.patch_factor,
                      n.exclusion_factor)
        results[name] = tf
        run.csv(f"td_{name}.csv", tf.rows(),
                ["x", "y", "value", "term_dlG", "term_R", "skipped_reason"])
        if run.want("vtk"):
            tio.write_vtk_points(run.path(f"td_{name}.vtk"), tf.points,
                                 {"td": tf.values}, run.key)
        if run.want("png"):
            from . import plotting
            plotting.plot_td_field(tf.points, tf.values, tf.shape, run.path(f"td_{name}.png"))
    summary = {"command": "td", "mode": cfg.mode, "pol_source": ev.pol_source}
    for name, tf in results.items():
        vals = tf.values
        ok = np.isfinite(vals)
        summary[name] = {"evaluated": int(ok.sum()), "skipped": int((~ok).sum())}
        if ok.any():
            k = tf.argmin()
            summary[name].update(min=float(vals[k]), argmin=tf.points[k].tolist(),
                                 max_abs=float(np.abs(vals[ok]).max()))
    run.json("td.json", summary)
    return EXIT_OK


def cmd_polmatrix(cfg: RunConfig, run: _Run, args) -> int:
    mat, n = cfg.materials, cfg.numerics
    shape = cfg.omega
    b1 = mat.beta2 if cfg.mode == "extremal" else mat.beta1
    diam = shape.diameter()
    R_list = [f * diam for f in TRUNC_FACTORS]
    study = truncation_study(b1, mat.beta2, shape, R_list, (0, 1), cfg.mode, n.exterior())
    cols = ["R", "level", "P11", "P12", "P21", "P22"]
    run.csv("truncation.csv", [dict(zip(cols, r)) for r in study.rows], cols)
    R0 = n.exterior().radius(shape)
    P = polarisation_matrix(b1, mat.beta2, shape, cfg.mode, n.exterior())
    run.csv("polarisation.csv", [{"i": i, "j": j, "P": P.entries[i, j]}
                                 for i in range(2) for j in range(2)])
    payload = {"command": "polmatrix", "mode": cfg.mode, "R": R0, "P": P.entries,
               "asymmetry": P.asymmetry, "min_sym_eig": P.min_sym_eig,
               "symmetric": P.meta.get("symmetric"), "positive_definite": P.meta.get("positive_definite"),
               "n_vertices": P.meta.get("n_vertices"),
               "truncation_observed_order": study.observed_order,
               "truncation_extrapolated": study.extrapolated}
    b1s, b2s = float(mat.beta1[0, 0]), float(mat.beta2[0, 0])
    scalar = (np.allclose(mat.beta1, b1s * np.eye(2)) and np.allclose(mat.beta2, b2s * np.eye(2)))
    target = None
    if shape.kind == "disk" and scalar and shape.params[0] == 1.0:
        Pa = disk_polarisation_analytic(b1s, b2s, cfg.mode).entries
        target = float(Pa[0, 0])
        payload["analytic"] = Pa
        payload["rel_err_analytic"] = float(np.abs(P.entries - Pa).max() / target)
        if cfg.mode == "transmission":
            payload["truncated_exact_P11"] = disk_polarisation_truncated(b1s, b2s, R0)
    run.json("polmatrix.json", payload)
    if run.want("png"):
        from . import plotting
        lev = study.column("level")
        top = lev == lev.max()
        plotting.plot_truncation(study.column("R")[top], study.column("P11")[top],
                                 run.path("truncation.png"), target)
    return EXIT_OK


def cmd_validate(cfg: RunConfig, run: _Run, args) -> int:
    from .validation import run_all
    threads = 1 if args.deterministic else (args.threads or os.cpu_count() or 1)
    reports = run_all(cfg, args.which, threads)
    summary = []
    for rep in reports:
        run.csv(f"validate_{rep.name}.csv", rep.rows())
        summary.extend(rep.summary())
    passed = all(r["passed"] for r in summary)
    run.json("validate.json", {"command": "validate", "which": args.which, "mode": cfg.mode,
                               "criteria": summary, "passed": passed,
                               "reports": {r.name: {"reference": r.reference, "fitted_rate": r.fitted_rate,
                                                    "extra": {k: v for k, v in r.extra.items()}}
                                           for r in reports}})
    for row in summary:
        log.info("%s %s observed=%s", "PASS" if row["passed"] else "FAIL", row["criterion"],
                 row["observed"])
    if run.want("png"):
        from . import plotting
        errs = {r.name: r.rel_err for r in reports if r.rel_err and len(r.rel_err) > 1}
        if errs:
            plotting.plot_convergence(cfg.validation.eps_list, errs, run.path("validate_errors.png"),
                                      "relative error against the closed form")
        rates = {r.name: r.quotients for r in reports if r.name.startswith("rate_")}
        if rates:
            plotting.plot_convergence(cfg.validation.eps_list, rates, run.path("validate_rates.png"),
                                      "H1 norm of the variation", ylabel="H1 norm")
    # failed criteria are recorded in the summary; the run itself succeeded
    return EXIT_OK


def cmd_mesh_export(cfg: RunConfig, run: _Run, args) -> int:
    mesh = _mesh(cfg, cfg.evaluation.points)
    mesh.check()
    if run.want("vtk"):
        tio.write_vtk(run.path("mesh.vtk"), mesh, None, {"shape_id": mesh.shape_id}, run.key)
    edges, markers = mesh.boundary_edges
    run.csv("boundary_edges.csv", [{"v0": a, "v1": b, "marker": MARKER_NAMES[int(m)]}
                                   for (a, b), m in zip(edges, markers)])
    run.json("mesh.json", {"command": "mesh-export", "n_vertices": mesh.n_vertices,
                           "n_triangles": mesh.n_triangles, "h_max": mesh.h_max,
                           "area": float(mesh.areas.sum())})
    if run.want("png"):
        from . import plotting
        plotting.plot_mesh(mesh, run.path("mesh.png"))
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "td": cmd_td, "polmatrix": cmd_polmatrix,
            "validate": cmd_validate, "mesh-export": cmd_mesh_export}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="topograd", description="Topological derivatives of semilinear transmission problems.")
    p.add_argument("--version", action="version", version=f"topograd {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, metavar="PATH")
        s.add_argument("--out", metavar="DIR", help="overrides outputs.directory")
        s.add_argument("--threads", type=int, default=None, metavar="N")
        s.add_argument("--deterministic", action="store_true",
                       help="sequential reductions; bit-identical outputs")
        if name == "validate":
            s.add_argument("--which", default="all", help="|".join(WHICH))
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if getattr(args, "which", "all") not in WHICH:
        print(f"topograd: unknown validation {args.which!r}; expected one of {', '.join(WHICH)}",
              file=sys.stderr)
        return EXIT_CONFIG
    if args.threads is not None and args.threads < 1:
        print("topograd: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = RunConfig.load(args.config)
        run = _Run(cfg, args.out)
        return COMMANDS[args.command](cfg, run, args)
    except ConfigError as exc:
        print(f"topograd: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"topograd: solver failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TopogradError as exc:
        print(f"topograd: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
