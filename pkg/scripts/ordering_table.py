"""Paired constrained/unconstrained RMSE on networks A, B and C over several seeds.

Prints a method x network table of mean radius-rate RMSE plus the per-seed
pairs, and counts the pairs where the constrained run is not better.

    python scripts/ordering_table.py --seeds 0 1 2 3 4 --k1 0.02
"""
import argparse
import json

import numpy as np

from pipesfm.evaluate import format_table
from pipesfm.experiment import paired_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--presets", nargs="+", default=["network-a", "network-b", "network-c"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--k1", type=float, default=0.02, help="relative k1 error given to both modes")
    ap.add_argument("--out", help="write all records as JSON")
    args = ap.parse_args()

    rmse = {"constrained": {}, "unconstrained": {}}
    records, violations = [], []
    for preset in args.presets:
        col = preset.split("-")[-1].upper()
        per = {"constrained": [], "unconstrained": []}
        for seed in args.seeds:
            free, cons = paired_run(preset, seed, args.k1)
            per["unconstrained"].append(free.rmse)
            per["constrained"].append(cons.rmse)
            records += [free.summary(), cons.summary()]
            flag = "" if cons.rmse < free.rmse else "  <-- not better"
            print(f"{col} seed {seed}: constrained {cons.rmse:.4f} ({cons.n_pipes} pipes)  unconstrained {free.rmse:.4f}{flag}", flush=True)
            if flag:
                violations.append((preset, seed))
        for mode in rmse:
            rmse[mode][col] = float(np.mean(per[mode]))
    print()
    print(format_table(rmse))
    print(f"pairs where the constraint did not help: {len(violations)} of {len(args.presets) * len(args.seeds)}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(records, fh, indent=2)


if __name__ == "__main__":
    main()
