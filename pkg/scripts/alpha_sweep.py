"""Radius-rate RMSE as a function of the cylinder weight alpha.

    python scripts/alpha_sweep.py --preset network-b --alphas 0 1 10 100
"""
import argparse

from pipesfm.experiment import run_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="network-b")
    ap.add_argument("--alphas", type=float, nargs="+", default=[0.0, 1.0, 10.0, 100.0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--k1", type=float, default=0.02)
    args = ap.parse_args()
    print(f"{'alpha':>7} {'pipes':>5} {'RMSE':>7} {'max axis err':>12}")
    for a in args.alphas:
        rec = run_scene(args.preset, args.seed, True, args.k1, config={"alpha": a})
        axes = [x for x in (rec.axis_errors_deg or []) if x is not None]
        print(f"{a:>7g} {rec.n_pipes:>5} {rec.rmse:>7.4f} {max(axes, default=float('nan')):>11.2f}°", flush=True)


if __name__ == "__main__":
    main()
