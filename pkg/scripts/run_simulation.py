"""Run the EB vs LASSO benchmark over several sample sizes.

Writes one replicate CSV and one summary JSON per N into --out, then prints
a compact table of the headline metrics.

    python3 scripts/run_simulation.py --n 40 60 80 100 --replicates 100 --threads 4
"""

import argparse
import json
from pathlib import Path

from ebsel.em import EmConfig
from ebsel.lasso import LassoConfig
from ebsel.simulation import SimDesign, run_study


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[40, 60, 80, 100])
    ap.add_argument("--replicates", type=int, default=100)
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--lasso-repeats", type=int, default=30)
    ap.add_argument("--no-lasso", action="store_true")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", default="sim-out")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    em = EmConfig(strategy="greedy", null_threshold=0.8)
    lasso = LassoConfig(repeats=args.lasso_repeats)
    header = f"{'N':>4} {'tp=3':>6} {'eb fp':>6} {'lasso fp':>9} {'R2 true':>8} {'R2 eb':>6} {'R2 lasso':>9}"
    print(header)
    for n in args.n:
        design = SimDesign(n=n, replicates=args.replicates, seed=args.seed, run_lasso=not args.no_lasso)
        report = run_study(design, em, lasso, n_threads=args.threads)
        report.write_csv(out / f"replicates_n{n}.csv")
        report.write_json(out / f"summary_n{n}.json")
        s = report.summary()
        fmt = lambda v: "-" if v is None else f"{v:.3g}"
        print(f"{n:>4} {fmt(s['eb_prop_exact_tp']):>6} {fmt(s['eb_fp_median']):>6} "
              f"{fmt(s.get('lasso_fp_median')):>9} {fmt(s['r2_true_mean']):>8} "
              f"{fmt(s['r2_eb_median']):>6} {fmt(s.get('r2_lasso_median')):>9}")
    (out / "args.json").write_text(json.dumps(vars(args), indent=2) + "\n")


if __name__ == "__main__":
    main()
