"""Step initial data on the expanding sphere: oversampled alg2b against ridge baselines."""
import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np

from evokansa import stepper
from evokansa.config import build_setup, load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def summarize(label, cfg):
    setup = build_setup(cfg)
    traj = stepper.march(setup.solver, setup.problem.times(), setup.observer)
    late = [r.values for r in traj.records if r.t >= 0.2 - 1e-12]
    m = traj.column("mass")
    drift = np.max(np.abs(m - m[0])) / abs(m[0])
    print(f"{label:24s} range t>=0.2 [{min(v.min() for v in late):.3f}, "
          f"{max(v.max() for v in late):.3f}]  mass drift {drift:.3e}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ridges", type=float, nargs="*", default=[1.0, 0.2488])
    args = ap.parse_args()
    summarize("alg2b, ratio 1.5", load_config(CONFIGS / "step_ic_alg2b.ini"))
    base = load_config(CONFIGS / "step_ic_regularized.ini")
    for p in args.ridges:
        d = replace(base.discretization, ridge=p, ic_ridge=p)
        summarize(f"ridge baseline p={p:g}", replace(base, discretization=d))


if __name__ == "__main__":
    main()
