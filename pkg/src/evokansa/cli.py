"""Command-line front end: ``run``, ``converge`` and ``check``.

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import checks, diagnostics, stepper, surfaces
from .config import ConfigError, RunConfig, build_setup, load_config
from .surfaces import PointCloudFrame

SERIES_COLUMNS = ("t", "l2_error", "h1_error", "h2_error", "mass", "residual")


def fmt(x) -> str:
    x = float(x)
    return "nan" if math.isnan(x) else format(x, ".17g")


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(v if isinstance(v, str) else fmt(v) for v in r) + "\n")


def execute(cfg: RunConfig, outdir: Path, quiet: bool = False) -> stepper.Trajectory:
    """Run one configuration and write series.csv, snapshots and summary.txt."""
    outdir.mkdir(parents=True, exist_ok=True)
    setup = build_setup(cfg)
    every = cfg.output.snapshot_every
    triangles = getattr(setup.track, "triangles", None)

    def observer(state, report):
        diag = setup.observer(state, report)
        last = abs(state.t - setup.problem.T) < 1e-12 or setup.problem.T == 0
        if every > 0 and (state.m % every == 0 or last):
            frame = PointCloudFrame(state.t, state.snap.X, triangles=triangles)
            surfaces.write_snapshot(outdir / f"snapshot_{state.m:05d}.txt", frame, state.values_X)
        return diag

    traj = stepper.march(setup.solver, setup.problem.times(), observer)
    rows = [[r.t] + [r.diagnostics.get(c, float("nan")) for c in SERIES_COLUMNS[1:]]
            for r in traj.records]
    write_csv(outdir / "series.csv", SERIES_COLUMNS, rows)
    summary = dict(traj.summary)
    summary.pop("wall_time", None)
    summary["h"] = setup.h
    summary["dt"] = setup.problem.dt
    for key in ("l2_error", "h1_error", "h2_error"):
        col = traj.column(key)
        if np.any(np.isfinite(col)):
            summary[f"sup_{key}"] = float(np.nanmax(col))
    mass = traj.column("mass")
    if np.any(np.isfinite(mass)):
        summary["mass_initial"] = float(mass[0])
        summary["mass_max_relative_drift"] = float(np.max(np.abs(mass - mass[0])) / abs(mass[0]))
    with open(outdir / "summary.txt", "w") as fh:
        for k, v in summary.items():
            fh.write(f"{k} = {fmt(v) if isinstance(v, float) else v}\n")
    if not quiet:
        print(f"{traj.summary['steps']} steps, n_Z={traj.summary['n_Z']}, n_X={traj.summary['n_X']}; "
              f"output in {outdir}")
    return traj


def _outdir(cfg: RunConfig) -> Path:
    d = Path(cfg.output.directory)
    return d if d.is_absolute() else Path(cfg.base_dir) / d


def cmd_run(path, outdir=None) -> int:
    try:
        cfg = load_config(path)
        execute(cfg, Path(outdir) if outdir else _outdir(cfg))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except stepper.StepError as exc:
        print(f"numerical failure at step {exc.step}: {exc.cause}", file=sys.stderr)
        return 3
    return 0


def converge_table(cfg: RunConfig, levels: int, outdir: Path, quiet: bool = True):
    rows = []
    prev = None
    for k in range(levels):
        lc = cfg.at_level(k)
        traj = execute(lc, outdir / f"level_{k}", quiet=True)
        d = lc.discretization
        row = {"level": k, "h": d.h, "n_Z": traj.summary["n_Z"], "n_X": traj.summary["n_X"], "dt": d.dt}
        for key in ("l2_error", "h1_error", "h2_error"):
            col = traj.column(key)
            e = float(np.nanmax(col)) if np.any(np.isfinite(col)) else float("nan")
            row[key] = e
            ok = prev is not None and all(math.isfinite(x) and x > 0 for x in (e, prev[key]))
            row[key.replace("error", "eoc")] = (diagnostics.eoc(prev[key], e, prev["h"], d.h)
                                                if ok else float("nan"))
        rows.append(row)
        prev = row
        if not quiet:
            print(f"level {k}: h={d.h:.6g} n_Z={row['n_Z']} n_X={row['n_X']} "
                  f"L2={row['l2_error']:.4e} eoc={row['l2_eoc']:.3f}")
    return rows


TABLE_COLUMNS = ("level", "h", "n_Z", "n_X", "dt", "l2_error", "l2_eoc", "h1_error", "h1_eoc",
                 "h2_error", "h2_eoc")


def write_table(path: Path, rows, dt_rule: str) -> None:
    with open(path, "w") as fh:
        fh.write(f"# dt_rule = {dt_rule or 'fixed'}\n")
        fh.write(",".join(TABLE_COLUMNS) + "\n")
        for r in rows:
            cells = []
            for c in TABLE_COLUMNS:
                v = r[c]
                if c.endswith("eoc") and math.isnan(v):
                    cells.append("")
                elif isinstance(v, int):
                    cells.append(str(v))
                else:
                    cells.append(fmt(v))
            fh.write(",".join(cells) + "\n")


def cmd_converge(path, levels: int, outdir=None) -> int:
    try:
        cfg = load_config(path)
        if cfg.surface.type != "parametric" or not cfg.problem.u_star:
            raise ConfigError("converge needs a parametric surface and an exact solution u_star")
        if levels < 1:
            raise ConfigError("need at least one level")
        out = Path(outdir) if outdir else _outdir(cfg)
        out.mkdir(parents=True, exist_ok=True)
        rows = converge_table(cfg, levels, out, quiet=False)
        write_table(out / "table.csv", rows, cfg.discretization.dt_rule)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except stepper.StepError as exc:
        print(f"numerical failure at step {exc.step}: {exc.cause}", file=sys.stderr)
        return 3
    return 0


def cmd_check(what: str) -> int:
    results = checks.run_suite(what)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="evokansa", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run one configuration")
    r.add_argument("config")
    r.add_argument("--out", default=None, help="output directory (overrides the config)")
    c = sub.add_parser("converge", help="run a refinement ladder")
    c.add_argument("config")
    c.add_argument("--levels", type=int, default=4)
    c.add_argument("--out", default=None)
    k = sub.add_parser("check", help="run a built-in oracle suite")
    k.add_argument("suite", choices=("normals", "operators", "kernels"))
    a = ap.parse_args(argv)
    if a.cmd == "run":
        return cmd_run(a.config, a.out)
    if a.cmd == "converge":
        return cmd_converge(a.config, a.levels, a.out)
    return cmd_check(a.suite)


if __name__ == "__main__":
    sys.exit(main())
