"""Command-line entry point: ``dpbws <subcommand>``.

Exit codes: 0 success, 1 validation error, 2 runtime error, 3 failed check.
Every output is accompanied by a ``manifest.json`` (or ``<out>.manifest.json``)
holding the resolved inputs, so results can be regenerated exactly.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import config as config_mod
from .gps_metrics import (
    DEFAULT_KAPPA,
    DEFAULT_THRESHOLDS,
    GpsConfig,
    SchemaError,
    ap_over_thresholds,
    load_jsonl,
    per_instance_rows,
)
from .gradcheck import FD_STEP, check_scalar_gradient, sample_away_from_kink
from .robust_loss import DensePoint, parse_loss_kind
from .sim_trainer import TERM_NAMES, Diverged, divergence_sweep, gen_task, train

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


class ValidationError(ValueError):
    pass


class CheckFailed(RuntimeError):
    pass


def fmt(x) -> str:
    """Round-trip float formatting for byte-stable CSV output."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _dump_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(_jsonable(obj), indent=2, sort_keys=False) + "\n")


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from None


def _write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(fmt(v) if not isinstance(v, str) else v for v in row) for row in rows]
    _write_text(path, "\n".join(lines) + "\n")


def _manifest(subcommand: str, resolved: dict, inputs: dict, outputs: dict, seed) -> dict:
    return {
        "subcommand": subcommand,
        "config": resolved,
        "inputs": inputs,
        "outputs": outputs,
        "seed": seed,
        "version": __version__,
    }


# -- losscurve / gradcheck ------------------------------------------------

def _kind(kind: str, omega: float):
    try:
        return parse_loss_kind(kind, omega)
    except ValueError as e:
        raise ValidationError(str(e)) from None


def cmd_losscurve(kind: str = "dp", omega: float = 0.5, x_min: float = -3.0, x_max: float = 3.0,
                  step: float = 0.01, out_path: str | Path = "losscurve.csv") -> list[tuple]:
    """Tabulate loss, exact gradient and the printed gradient form on a grid."""
    if not (step > 0 and math.isfinite(step)):
        raise ValidationError(f"step must be > 0, got {step}")
    if not (math.isfinite(x_min) and math.isfinite(x_max) and x_max >= x_min):
        raise ValidationError("x range must be finite with x_max >= x_min")
    lk = _kind(kind, omega)
    n = int(math.floor((x_max - x_min) / step + 1e-9)) + 1
    xs = x_min + step * np.arange(n)
    rows = list(zip(xs, lk.loss(xs), lk.grad(xs), lk.grad_printed(xs)))
    out = Path(out_path)
    _write_csv(out, ("x", "loss", "grad", "printed_grad"), rows)
    resolved = {"kind": kind, "step": step, "x_min": x_min, "x_max": x_max}
    if isinstance(lk, DensePoint):
        resolved["omega"] = lk.omega
    _dump_json(out.with_name(out.name + ".manifest.json"),
               _manifest("losscurve", resolved, {}, {"csv": str(out)}, None))
    return rows


def cmd_gradcheck(kind: str = "dp", omega: float = 0.25, n_samples: int = 10_000, seed: int = 0,
                  tolerance: float = 1e-6, step: float = FD_STEP):
    """Compare the analytic gradient with central differences at sampled points.

    ``kind`` may be ``dp-printed`` or ``smoothl1-printed`` to check the
    printed gradient forms, which are expected to fail.
    """
    if n_samples <= 0:
        raise ValidationError("n_samples must be positive")
    if not tolerance > 0:
        raise ValidationError("tolerance must be > 0")
    printed = kind.endswith("-printed")
    lk = _kind(kind[: -len("-printed")] if printed else kind, omega)
    xs = sample_away_from_kink(n_samples, seed)
    return check_scalar_gradient(lk.loss, lk.grad_printed if printed else lk.grad, xs, tolerance, step)


# -- train / sweep -----------------------------------------------------------

def _resolved_dict(rc: config_mod.RunConfig) -> dict:
    return {"ini": rc.text}


def _curve_rows(res):
    for i in range(len(res.iters)):
        yield (int(res.iters[i]), res.lrs[i], *res.term_values[i], *res.weights[i], res.totals[i])


def cmd_train(config_ref: str | None, out_dir: str | Path):
    """Train on the configured task; writes curve.csv, summary.json, manifest.json."""
    rc = _load(config_ref)
    out = Path(out_dir)
    task = gen_task(**rc.task)
    res = train(task, rc.train)
    header = ("iter", "lr", *[f"loss_{n}" for n in TERM_NAMES],
              *[f"weight_{n}" for n in TERM_NAMES], "total")
    _write_csv(out / "curve.csv", header, _curve_rows(res))
    summary = {
        "outcome": "diverged" if res.diverged else "completed",
        "diverged_at": res.outcome.iter if isinstance(res.outcome, Diverged) else None,
        "iterations": len(res.iters),
        "initial_total": float(res.totals[0]),
        "final_total": res.final_total,
        "final_losses": res.final_losses,
        "loss": config_mod.describe_kind(rc.train.loss_kind),
        "weighting": config_mod.describe_weighting(rc.train.weighting),
    }
    _dump_json(out / "summary.json", summary)
    _dump_json(out / "manifest.json", _manifest(
        "train", _resolved_dict(rc), {"config": config_ref or "<defaults>"},
        {"curve": "curve.csv", "summary": "summary.json"}, rc.seed))
    return res


def cmd_sweep(config_ref: str | None, out_dir: str | Path, jobs: int | None = None):
    """LR x variant stability sweep; writes sweep.csv, summary.json, manifest.json."""
    rc = _load(config_ref)
    if not rc.lrs:
        raise ValidationError("sweep.lrs: empty learning-rate grid")
    if not rc.variants:
        raise ValidationError("sweep needs at least one [variant:NAME] section")
    task = gen_task(**rc.task)
    n_jobs = jobs or rc.jobs
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            table = divergence_sweep(task, rc.train, rc.lrs, rc.variants, runner=ex.map)
    else:
        table = divergence_sweep(task, rc.train, rc.lrs, rc.variants)
    out = Path(out_dir)
    rows = [(r.variant, r.lr, "diverged" if isinstance(r.outcome, Diverged) else "completed",
             r.outcome.iter if isinstance(r.outcome, Diverged) else None, r.final_total)
            for r in table.rows]
    _write_csv(out / "sweep.csv", ("variant", "lr", "outcome", "diverged_at", "final_total"), rows)
    _dump_json(out / "summary.json", {"lr_max": table.lr_max_table(), "lr_grid": list(table.lr_grid)})
    _dump_json(out / "manifest.json", _manifest(
        "sweep", _resolved_dict(rc), {"config": config_ref or "<defaults>"},
        {"table": "sweep.csv", "summary": "summary.json"}, rc.seed))
    return table


def _load(ref):
    try:
        return config_mod.load(ref)
    except config_mod.ConfigError as e:
        raise ValidationError(str(e)) from None


# -- eval-gps ------------------------------------------------------------------

def cmd_eval_gps(gt_path, pred_path, kappa: float = DEFAULT_KAPPA,
                 thresholds=DEFAULT_THRESHOLDS, similarity: str = "gps",
                 out_path="report.json", csv_path=None) -> dict:
    try:
        cfg = GpsConfig(kappa=kappa, thresholds=tuple(thresholds))
    except ValueError as e:
        raise ValidationError(str(e)) from None
    if similarity not in ("gps", "gpsm"):
        raise ValidationError(f"similarity must be gps or gpsm, got {similarity!r}")
    try:
        gts = load_jsonl(gt_path, prediction=False)
    except SchemaError as e:
        raise ValidationError(f"{gt_path}: {e}") from None
    try:
        preds = load_jsonl(pred_path, prediction=True)
    except SchemaError as e:
        raise ValidationError(f"{pred_path}: {e}") from None
    if not gts:
        raise ValidationError(f"{gt_path}: no ground-truth instances")
    report = ap_over_thresholds(gts, preds, cfg, similarity).to_json()
    out = Path(out_path)
    _dump_json(out, report)
    outputs = {"report": str(out)}
    if csv_path:
        rows = per_instance_rows(gts, preds, cfg, similarity)
        _write_csv(Path(csv_path), ("image_id", "gps", "iou", "gpsm"), rows)
        outputs["csv"] = str(csv_path)
    _dump_json(out.with_name(out.name + ".manifest.json"), _manifest(
        "eval-gps", {"kappa": cfg.kappa, "thresholds": list(cfg.thresholds), "similarity": similarity},
        {"gt": str(gt_path), "pred": str(pred_path)}, outputs, None))
    return report


# -- argparse ------------------------------------------------------------------

def _floats(s: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in s.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpbws", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("losscurve", help="tabulate loss and gradient curves to CSV")
    s.add_argument("--kind", default="dp", choices=("dp", "smoothl1"))
    s.add_argument("--omega", type=float, default=0.5)
    s.add_argument("--x-min", type=float, default=-3.0)
    s.add_argument("--x-max", type=float, default=3.0)
    s.add_argument("--step", type=float, default=0.01)
    s.add_argument("--out", required=True)

    s = sub.add_parser("gradcheck", help="finite-difference check of a loss gradient")
    s.add_argument("--kind", default="dp", choices=("dp", "smoothl1", "dp-printed", "smoothl1-printed"))
    s.add_argument("--omega", type=float, default=0.25)
    s.add_argument("--n-samples", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-6)

    s = sub.add_parser("train", help="run the training simulator")
    s.add_argument("--config", default=None, help="INI path or bundled name (%s)" % ", ".join(config_mod.bundled_names()))
    s.add_argument("--out", required=True)

    s = sub.add_parser("sweep", help="learning-rate stability sweep")
    s.add_argument("--config", default="sweep")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=None)

    s = sub.add_parser("eval-gps", help="AP over GPS thresholds from JSON-lines files")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--kappa", type=float, default=DEFAULT_KAPPA)
    s.add_argument("--thresholds", type=_floats, default=DEFAULT_THRESHOLDS)
    s.add_argument("--similarity", choices=("gps", "gpsm"), default="gps")
    s.add_argument("--out", required=True)
    s.add_argument("--csv", default=None, help="optional per-instance CSV")

    s = sub.add_parser("print-config", help="print a fully resolved simulator config")
    s.add_argument("--config", default=None)
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.cmd == "losscurve":
            cmd_losscurve(args.kind, args.omega, args.x_min, args.x_max, args.step, args.out)
        elif args.cmd == "gradcheck":
            rep = cmd_gradcheck(args.kind, args.omega, args.n_samples, args.seed, args.tol)
            status = "PASS" if rep.passed else "FAIL"
            print(f"{status} kind={args.kind} n={rep.n} worst_rel_err={rep.worst_rel_err:.3e} "
                  f"at x={rep.worst_x:.6f} tol={rep.tolerance:g}")
            if not rep.passed:
                return EXIT_CHECK
        elif args.cmd == "train":
            res = cmd_train(args.config, args.out)
            print(f"{res.outcome} after {len(res.iters)} iterations, final total {res.final_total:.6g}")
        elif args.cmd == "sweep":
            table = cmd_sweep(args.config, args.out, args.jobs)
            for v, lr in table.lr_max_table().items():
                print(f"{v}: lr_max={lr}")
        elif args.cmd == "eval-gps":
            rep = cmd_eval_gps(args.gt, args.pred, args.kappa, args.thresholds,
                               args.similarity, args.out, args.csv)
            print(f"AP_{args.similarity} = {rep['AP']:.6f}")
        elif args.cmd == "print-config":
            sys.stdout.write(_load(args.config).text)
    except (ValidationError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
