"""Time a weighted-restart fit on a synthetic wide CSV.

The default shape (N = 71, K = 4088) matches a typical gene-expression
study. The CSV is written to --workdir and fitted through the CLI.

    python3 scripts/scale_check.py --n 71 --k 4088 --restarts 20
"""

import argparse
import csv
import json
import time
from pathlib import Path

import numpy as np

from ebsel.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=71)
    ap.add_argument("--k", type=int, default=4088)
    ap.add_argument("--signals", type=int, default=3)
    ap.add_argument("--restarts", type=int, default=20)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--workdir", default="scale-out")
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    Z = rng.standard_normal((args.n, args.k))
    truth = rng.choice(args.k, size=args.signals, replace=False)
    y = Z[:, truth] @ rng.choice([-1.0, 1.0], args.signals) * 0.7 + 0.4 * rng.standard_normal(args.n)

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    data = work / "wide.csv"
    with open(data, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y"] + [f"gene{k}" for k in range(args.k)])
        for i in range(args.n):
            w.writerow([f"{v:.10g}" for v in [y[i], *Z[i]]])

    t0 = time.perf_counter()
    code = cli_main(["fit", "--data", str(data), "--response", "y", "--strategy", "weighted",
                     "--restarts", str(args.restarts), "--seed", str(args.seed),
                     "--threads", str(args.threads), "--out", str(work / "fit")])
    elapsed = time.perf_counter() - t0
    doc = json.loads((work / "fit" / "result.json").read_text())
    found = sorted(c["name"] for c in doc["selected"])
    print(json.dumps({"exit_code": code, "seconds": round(elapsed, 2),
                      "truth": sorted(f"gene{k}" for k in truth), "selected": found,
                      "refit_r2": doc["refit"]["r2"]}, indent=2))


if __name__ == "__main__":
    main()
