"""LRmax per loss variant across task seeds.

    python3 scripts/run_stability_sweep.py --seeds 42 1 7 123 --jobs 4
"""

import argparse
from concurrent.futures import ProcessPoolExecutor

from dpbws import config
from dpbws.sim_trainer import divergence_sweep, gen_task


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="sweep")
    ap.add_argument("--seeds", type=int, nargs="+", default=[42])
    ap.add_argument("--outlier-frac", type=float, default=None)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    rc = config.load(args.config)
    task_kw = dict(rc.task)
    if args.outlier_frac is not None:
        task_kw["outlier_frac"] = args.outlier_frac
    names = list(rc.variants)
    print("seed  " + "  ".join(f"{n:>12}" for n in names))
    for seed in args.seeds:
        task = gen_task(**{**task_kw, "seed": seed})
        base = rc.train.replace(seed=seed)
        if args.jobs > 1:
            with ProcessPoolExecutor(args.jobs) as pool:
                table = divergence_sweep(task, base, rc.lrs, rc.variants, runner=pool.map)
        else:
            table = divergence_sweep(task, base, rc.lrs, rc.variants)
        lrs = table.lr_max_table()
        cells = ("-" if lrs[n] is None else f"{lrs[n]:.4g}" for n in names)
        print(f"{seed:<4}  " + "  ".join(f"{c:>12}" for c in cells))


if __name__ == "__main__":
    main()
