"""Mass history on the expanding sphere for alg1 and alg2a, plus their nodal gap."""
import argparse
from pathlib import Path

import numpy as np

from evokansa import stepper
from evokansa.config import build_setup, load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def history(name):
    setup = build_setup(load_config(CONFIGS / name))
    traj = stepper.march(setup.solver, setup.problem.times(), setup.observer)
    return traj.times, traj.column("mass"), [r.values for r in traj.records]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--csv", default=None, help="write t, mass_alg1, mass_alg2a, gap")
    args = ap.parse_args()
    t, m1, v1 = history("example3_mass_alg1.ini")
    _, m2, v2 = history("example3_mass_alg2a.ini")
    gap = np.array([np.max(np.abs(a - b)) for a, b in zip(v1, v2)])
    e1, e2 = np.abs(m1 - m1[0]) / m1[0], np.abs(m2 - m2[0]) / m2[0]
    for k in range(0, len(t), 5):
        print(f"t={t[k]:.2f}  drift alg1 {e1[k]:.3e}  alg2a {e2[k]:.3e}  gap {gap[k]:.2e}")
    if args.csv:
        np.savetxt(args.csv, np.column_stack([t, m1, m2, gap]), delimiter=",",
                   header="t,mass_alg1,mass_alg2a,max_nodal_gap", comments="", fmt="%.17g")


if __name__ == "__main__":
    main()
