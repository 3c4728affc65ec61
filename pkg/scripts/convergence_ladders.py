"""Refinement ladders on the evolving curve (square and oversampled) and the sphere-like surface."""
import argparse
from pathlib import Path

from evokansa import cli
from evokansa.config import load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
LADDERS = (("example1_curve.ini", 4), ("example1_oversampled.ini", 4), ("example2_sphere.ini", 3))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="out/ladders")
    args = ap.parse_args()
    for name, levels in LADDERS:
        cfg = load_config(CONFIGS / name)
        out = Path(args.out) / Path(name).stem
        out.mkdir(parents=True, exist_ok=True)
        print(f"== {name}")
        rows = cli.converge_table(cfg, levels, out, quiet=False)
        cli.write_table(out / "table.csv", rows, cfg.discretization.dt_rule)
        for r in rows:
            print(f"   h={r['h']:.4g} n_Z={r['n_Z']} H1={r['h1_error']:.3e} ({r['h1_eoc']:.3f}) "
                  f"H2={r['h2_error']:.3e} ({r['h2_eoc']:.3f})")


if __name__ == "__main__":
    main()
