"""Bias and MSE of the fitted mean, unconstrained against the near-frontier mass constraint.

Usage: python scripts/table2_mse.py [--n 25 250] [--reps 50] [--seed 0] [--m0 1] [--c 1] [--jobs 1]
"""
import argparse

from frontier_mm.fit import FitConfig
from frontier_mm.sim import REGIONS, REPRESENTATIVE, SimDesign, estimator_name, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[25, 250])
    ap.add_argument("--reps", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--m0", type=float, default=1.0)
    ap.add_argument("--c", type=float, default=1.0)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    ests = [FitConfig(), FitConfig(m0=args.m0, c=args.c)]
    designs = [SimDesign(a=a, b=b, n=n, reps=args.reps, seed=args.seed)
               for n in args.n for a, b in (REPRESENTATIVE[r] for r in REGIONS)]
    mt = run_experiment(designs, ests, jobs=args.jobs)
    print(f"{'n':>6} {'region':<9} {'estimator':<14} {'bias':>10} {'MSE':>12} {'completed':>10}")
    for n in args.n:
        for reg in REGIONS:
            for e in ests:
                r = mt.lookup(reg, estimator_name(e), n)
                print(f"{n:>6} {reg:<9} {estimator_name(e):<14} {r['median_bias']:>10.4f} "
                      f"{r['mean_mse']:>12.4g} {r['completed']:>10d}")
    print(f"elapsed {mt.elapsed:.1f} s")


if __name__ == "__main__":
    main()
