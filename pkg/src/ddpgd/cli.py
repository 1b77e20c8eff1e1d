"""Command-line driver: ``ddpgd offline|online|reference|compare``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import linalg
from . import mesh as fem
from .config import ExperimentConfig, resolve_config
from .experiments import build_experiment
from .linalg import ConvergenceError, FactorizationError, GmresConfig
from .mesh import ConfigurationError
from .offline import (
    GridMismatchError,
    ModelValidationError,
    SubproblemError,
    build_surrogate,
    load_model,
    save_model,
    write_report,
)
from .online import (
    InterfaceMapError,
    SchwarzProblem,
    assemble_global,
    reconstruct_global,
    solve_interface,
    union_mesh,
    write_field_csv,
)
from .pgd import PgdError
from .reference import GlobalProblem, alternating_schwarz, full_order_solve, rel_l2_error, rel_linf_error
from .separated import CorruptPayloadError, DomainError, VersionMismatchError

log = logging.getLogger("ddpgd")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4
EXIT_DOMAIN = 5

OUT_ENV = "DDPGD_OUT"
MANIFEST = "models.json"
CONFIG_COPY = "config.json"


def _out_dir(args, cfg: ExperimentConfig | None = None) -> Path:
    out = args.out or os.environ.get(OUT_ENV) or (cfg.output_dir if cfg else None) or "ddpgd_out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    for flag, attr in (("tol_enrich", "enrich_tol"), ("tol_compress", "compress_tol"), ("tol_gmres", "gmres_tol")):
        v = getattr(args, flag, None)
        if v is not None:
            if not v > 0:
                raise ConfigurationError(f"--{flag.replace('_', '-')} must be positive")
            setattr(cfg, attr, v)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "workers", None) is not None:
        cfg.workers = max(1, args.workers)
    return cfg


def parse_mu(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"--mu {text!r}: expected comma-separated numbers") from None


def _mu_dict(names, values) -> dict:
    if len(values) != len(names):
        raise ConfigurationError(
            f"--mu needs {len(names)} value(s) ({', '.join(names)}), got {len(values)}"
        )
    return dict(zip(names, values))


def _tag(values) -> str:
    return "_".join(f"{v:g}" for v in values)


# -- offline -----------------------------------------------------------------

def cmd_offline(args) -> int:
    cfg = _apply_overrides(resolve_config(args.config), args)
    out = _out_dir(args, cfg)
    ex = build_experiment(cfg)
    pcfg = ex.pgd_config()
    reports, files = [], []
    t0 = time.perf_counter()
    for sd in ex.subdomains:
        log.info("building surrogate for %s (%d interface nodes)", sd.id, sd.n_interface)
        model, rep = build_surrogate(sd, ex.data[sd.id], pcfg, cfg.compress_tol, cfg.seed, cfg.workers)
        name = f"{sd.id}.ddpgd"
        save_model(model, out / name)
        rep["model_file"] = name
        reports.append(rep)
        files.append(name)
    (out / MANIFEST).write_text(json.dumps({"config": cfg.name, "models": files}, indent=2))
    (out / CONFIG_COPY).write_text(json.dumps(cfg.raw, indent=2, sort_keys=True))
    write_report(
        {
            "command": "offline",
            "config": cfg.name,
            "seed": cfg.seed,
            "workers": cfg.workers,
            "tolerances": {"enrich": cfg.enrich_tol, "compress": cfg.compress_tol},
            "wall_seconds": time.perf_counter() - t0,
            "subdomains": reports,
        },
        out / "offline_report.json",
    )
    for rep in reports:
        print(
            f"{rep['subdomain']}: {rep['n_problems']} problems, modes "
            f"{rep['total_modes_before_compression']} -> {rep['total_modes_after_compression']}, "
            f"{rep['wall_seconds']:.1f} s"
        )
    print(f"models written to {out}")
    return EXIT_OK


# -- online ------------------------------------------------------------------

def _model_paths(args) -> list:
    paths = [Path(p) for p in args.models]
    if len(paths) == 1 and paths[0].is_dir():
        d = paths[0]
        manifest = d / MANIFEST
        if manifest.exists():
            return [d / f for f in json.loads(manifest.read_text())["models"]]
        found = sorted(d.glob("*.ddpgd"))
        if not found:
            raise FileNotFoundError(f"no model files in {d}")
        return found
    return paths


def _online_config(args, paths):
    if args.config:
        return resolve_config(args.config)
    copy = paths[0].parent / CONFIG_COPY
    if copy.exists():
        return resolve_config(json.loads(copy.read_text()))
    return None


def cmd_online(args) -> int:
    paths = _model_paths(args)
    models = [load_model(p) for p in paths]
    cfg = _online_config(args, paths)
    if cfg is not None:
        cfg = _apply_overrides(cfg, args)
        names = cfg.param_names
        tol, max_iters, restart = cfg.gmres_tol, cfg.gmres_max_iters, cfg.gmres_restart
    else:
        names = []
        for m in models:
            names += [n for n in m.grid.names if n not in names]
        tol, max_iters, restart = args.tol_gmres or 1e-6, 1000, None
    gcfg = GmresConfig(tol, max_iters, restart)
    out = _out_dir(args, cfg)
    ex = build_experiment(cfg) if cfg is not None else None
    gmesh = ex.global_mesh if ex is not None else union_mesh([m.subdomain for m in models])
    gp = GlobalProblem(gmesh, ex.diffusion, ex.source, ex.neumann) if ex is not None else None

    runs = []
    for text in args.mu:
        values = parse_mu(text)
        mu = _mu_dict(names, values)
        a0, f0 = fem.counters["assemblies"], linalg.counters["factorizations"]
        t0 = time.perf_counter()
        sp = SchwarzProblem.build(models, mu, gcfg)
        lam, iters, history = solve_interface(sp)
        field = reconstruct_global(sp, lam, gmesh)
        dt = time.perf_counter() - t0
        run = {
            "mu": values,
            "iterations": iters,
            "residual_history": history,
            "online_seconds": dt,
            "fem_assemblies": fem.counters["assemblies"] - a0,
            "factorizations": linalg.counters["factorizations"] - f0,
            "overlap_mismatch": field.overlap_mismatch,
            "n_interface_unknowns": sp.size,
        }
        csv_name = f"online_mu_{_tag(values)}.csv"
        field.to_csv(out / csv_name)
        run["field_csv"] = csv_name
        # diagnostics below run after the online counters were read
        if ex is not None and ex.exact(mu) is not None:
            run["rel_l2_error"] = rel_l2_error(field.values, ex.exact(mu), gmesh)
        if args.compare_fem and gp is not None:
            t1 = time.perf_counter()
            u = full_order_solve(gp, mu)
            run["fem_seconds"] = time.perf_counter() - t1
            run["rel_linf_vs_fem"] = rel_linf_error(field.values, u)
            if ex.exact(mu) is not None:
                run["fem_rel_l2_error"] = rel_l2_error(u, ex.exact(mu), gmesh)
        runs.append(run)
        extra = f", rel L2 error {run['rel_l2_error']:.3e}" if "rel_l2_error" in run else ""
        print(f"mu={text}: {iters} GMRES iterations, {dt * 1e3:.1f} ms{extra}")
    report = {
        "command": "online",
        "models": [str(p) for p in paths],
        "parameters": names,
        "gmres": {"rel_tol": gcfg.rel_tol, "max_iters": gcfg.max_iters, "restart": gcfg.restart},
        "runs": runs,
    }
    write_report(report, out / (args.report or "online_report.json"))
    return EXIT_OK


# -- reference ---------------------------------------------------------------

def cmd_reference(args) -> int:
    cfg = _apply_overrides(resolve_config(args.config), args)
    out = _out_dir(args, cfg)
    ex = build_experiment(cfg)
    gp = GlobalProblem(ex.global_mesh, ex.diffusion, ex.source, ex.neumann)
    runs = []
    for text in args.mu:
        values = parse_mu(text)
        mu = cfg.mu_from_values(values)
        for ax in ex.axes.values():
            ax.locate(mu[ax.name])  # same admissible box as the online phase
        run = {"mu": values}
        exact = ex.exact(mu)
        u = None
        if args.method in ("fem", "both"):
            t0 = time.perf_counter()
            u = full_order_solve(gp, mu)
            run["fem_seconds"] = time.perf_counter() - t0
            name = f"fem_mu_{_tag(values)}.csv"
            write_field_csv(out / name, ex.global_mesh.node_coords, u)
            run["fem_csv"] = name
            if exact is not None:
                run["fem_rel_l2_error"] = rel_l2_error(u, exact, ex.global_mesh)
        if args.method in ("schwarz", "both"):
            t0 = time.perf_counter()
            res = alternating_schwarz(ex.subdomains, ex.data, mu, args.schwarz_tol, args.schwarz_max_iters)
            g = assemble_global(ex.subdomains, res.fields, ex.global_mesh)
            run.update(
                schwarz_seconds=time.perf_counter() - t0,
                schwarz_iterations=res.iters,
                schwarz_converged=res.converged,
                schwarz_overlap_mismatch=g.overlap_mismatch,
            )
            name = f"schwarz_mu_{_tag(values)}.csv"
            g.to_csv(out / name)
            run["schwarz_csv"] = name
            if exact is not None:
                run["schwarz_rel_l2_error"] = rel_l2_error(g.values, exact, ex.global_mesh)
            if u is not None:
                run["schwarz_linf_vs_fem"] = float(np.abs(g.values - u).max())
        runs.append(run)
        print(f"mu={text}: " + ", ".join(f"{k}={v:.3e}" for k, v in run.items() if k.endswith("error")))
    write_report({"command": "reference", "config": cfg.name, "runs": runs}, out / (args.report or "reference_report.json"))
    return EXIT_OK


# -- compare -----------------------------------------------------------------

COMPARE_COLUMNS = [
    ("source", "report"),
    ("mu", "mu"),
    ("iterations", "GMRES its"),
    ("online_seconds", "online time [s]"),
    ("rel_l2_error", "DD-PGD rel. L2 error"),
    ("fem_rel_l2_error", "FEM rel. L2 error"),
    ("rel_linf_vs_fem", "rel. linf vs FEM"),
]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, list):
        return ", ".join(_cell(x) for x in v)
    if isinstance(v, float):
        return f"{v:.3e}" if (v != 0 and (abs(v) < 1e-2 or abs(v) >= 1e4)) else f"{v:.4g}"
    return str(v)


def compare_rows(reports: dict) -> list:
    """One row per run; missing fields stay ``None`` (rendered blank)."""
    rows = []
    for name, rep in reports.items():
        for run in rep.get("runs", [rep]):
            row = {k: run.get(k) for k, _ in COMPARE_COLUMNS}
            row["source"] = name
            rows.append(row)
    return rows


def render_markdown(rows) -> str:
    head = [label for _, label in COMPARE_COLUMNS]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in rows:
        lines.append("| " + " | ".join(_cell(r[k]) for k, _ in COMPARE_COLUMNS) + " |")
    return "\n".join(lines) + "\n"


def render_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([k for k, _ in COMPARE_COLUMNS])
    for r in rows:
        w.writerow(["" if r[k] is None else (";".join(map(repr, r[k])) if isinstance(r[k], list) else r[k])
                    for k, _ in COMPARE_COLUMNS])
    return buf.getvalue()


def cmd_compare(args) -> int:
    reports = {}
    for p in args.reports:
        reports[Path(p).name if Path(p).name not in reports else str(p)] = json.loads(Path(p).read_text())
    rows = compare_rows(reports)
    text = render_csv(rows) if args.format == "csv" else render_markdown(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddpgd", description="Overlapping Schwarz with PGD local surrogates.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def tols(sp, which):
        for name in which:
            sp.add_argument(f"--tol-{name}", type=float, default=None, help=f"override the {name} tolerance")

    off = sub.add_parser("offline", help="build and save one surrogate model per subdomain")
    off.add_argument("--config", required=True, help="TOML file or built-in name (bidomain, chain9)")
    off.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./ddpgd_out)")
    off.add_argument("--workers", type=int, default=None)
    off.add_argument("--seed", type=int, default=None)
    tols(off, ["enrich", "compress"])
    off.set_defaults(func=cmd_offline)

    on = sub.add_parser("online", help="solve the interface system for given parameter values")
    on.add_argument("--models", nargs="+", required=True, help="model directory or .ddpgd files")
    on.add_argument("--mu", action="append", required=True, help="parameter values, comma separated; repeatable")
    on.add_argument("--config", help="experiment config (default: the copy saved next to the models)")
    on.add_argument("--out")
    on.add_argument("--report", help="report file name inside the output directory")
    on.add_argument("--compare-fem", action="store_true", help="also solve the full-order problem for comparison")
    tols(on, ["gmres"])
    on.set_defaults(func=cmd_online)

    ref = sub.add_parser("reference", help="full-order FEM and/or classical Schwarz oracle solutions")
    ref.add_argument("--config", required=True)
    ref.add_argument("--mu", action="append", required=True)
    ref.add_argument("--out")
    ref.add_argument("--report")
    ref.add_argument("--method", choices=["fem", "schwarz", "both"], default="both")
    ref.add_argument("--schwarz-tol", type=float, default=1e-8)
    ref.add_argument("--schwarz-max-iters", type=int, default=5000)
    ref.set_defaults(func=cmd_reference)

    cmp_ = sub.add_parser("compare", help="tabulate run reports")
    cmp_.add_argument("reports", nargs="+")
    cmp_.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    cmp_.add_argument("--out", help="write the table here instead of stdout")
    cmp_.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DomainError as exc:
        print(f"error: parameter outside the admissible box: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (ConfigurationError, GridMismatchError, InterfaceMapError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SubproblemError, ConvergenceError, FactorizationError, PgdError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OSError, ModelValidationError, CorruptPayloadError, VersionMismatchError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
