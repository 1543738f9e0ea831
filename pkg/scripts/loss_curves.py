"""Loss and gradient tables for both robust losses, plus the printed-form gap.

    python3 scripts/loss_curves.py --out curves.csv
"""

import argparse
import csv

import numpy as np

from dpbws.robust_loss import DensePoint, SmoothL1


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="curves.csv")
    ap.add_argument("--omegas", type=float, nargs="+", default=[0.25, 0.5])
    ap.add_argument("--x-max", type=float, default=4.0)
    ap.add_argument("--step", type=float, default=0.01)
    args = ap.parse_args()

    n = int(round(2 * args.x_max / args.step))
    x = np.linspace(-args.x_max, args.x_max, n + 1)
    kinds = [SmoothL1()] + [DensePoint(w) for w in args.omegas]
    header = ["x"]
    cols = [x]
    for k in kinds:
        header += [f"{k.name}:loss", f"{k.name}:grad", f"{k.name}:printed_grad"]
        cols += [k.loss(x), k.grad(x), k.grad_printed(x)]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(zip(*(c.tolist() for c in cols)))

    for k in kinds:
        gap = np.max(np.abs(np.abs(k.grad(x)) - k.grad_printed(x)))
        print(f"{k.name:>16}: max |grad| {np.max(np.abs(k.grad(x))):.4f}, "
              f"max gap to printed magnitude {gap:.4f}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
