"""Sectioned key/value run configs for the simulator CLI.

A config is an INI file. Missing keys take the defaults below; the resolved
form (every key present) is what ``print-config`` shows and what manifests
record. Bundled configs live in ``dpbws/configs`` and can be named instead
of given as a path.
"""

from __future__ import annotations

import configparser
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .robust_loss import DensePoint, LossKind, SmoothL1, parse_loss_kind
from .sim_trainer import (
    SIM_WEIGHTS,
    TERM_NAMES,
    BwsWeighting,
    StaticWeighting,
    TrainConfig,
    Weighting,
)
from .task_weighting import BwsConfig, Group, format_weight_table, parse_weight_table


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict[str, str]] = {
    "task": {
        "seed": "42",
        "n_samples": "32",
        "n_points": "196",
        "feature_dim": "16",
        "outlier_frac": "0.05",
        "outlier_scale": "5.0",
    },
    "train": {
        "base_lr": "1.0",
        "warmup_iters": "500",
        "warmup_factor": "0.1",
        "total_iters": "2000",
        "decay_points": "1538, 1846",
        "decay_factor": "0.1",
        "seed": "42",
        "divergence_threshold": "1e6",
        "hidden_dim": "16",
        "init_scale": "1.0",
    },
    "loss": {"kind": "dp", "omega": "0.25"},
    "weighting": {
        "mode": "static",
        "k": "1.0",
        "detach_weights": "true",
        "apply_static_first": "true",
    },
    "weights": {name: f"{g.value}, {w!r}" for name, (g, w) in SIM_WEIGHTS.items()},
    "sweep": {"lrs": "", "jobs": "1"},
}

VARIANT_KEYS = ("kind", "omega", "mode", "k", "detach_weights", "apply_static_first")


@dataclass
class RunConfig:
    task: dict
    train: TrainConfig
    lrs: tuple[float, ...] = ()
    jobs: int = 1
    variants: dict[str, dict] = field(default_factory=dict)
    text: str = ""

    @property
    def seed(self) -> int:
        return self.train.seed


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # term names such as U and V are case-sensitive
    return cp


def bundled_names() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("dpbws.configs").iterdir() if p.name.endswith(".ini"))


def read_config_text(ref: str) -> str:
    """Text of a config given as a path, a run manifest, or a bundled config name."""
    p = Path(ref)
    if p.is_file():
        text = p.read_text(encoding="utf-8")
        if p.suffix == ".json":
            try:
                return json.loads(text)["config"]["ini"]
            except (ValueError, KeyError, TypeError):
                raise ConfigError(f"{ref}: not a run manifest") from None
        return text
    if ref in bundled_names():
        return resources.files("dpbws.configs").joinpath(ref + ".ini").read_text(encoding="utf-8")
    raise ConfigError(f"config {ref!r} is neither a file nor a bundled config ({', '.join(bundled_names())})")


def _get(cp, section, key, conv, check=None, msg=""):
    raw = cp[section][key]
    try:
        val = conv(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r}") from None
    if check is not None and not check(val):
        raise ConfigError(f"{section}.{key}: {msg} (got {raw!r})")
    return val


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(s)


def _int(s: str) -> int:
    f = float(s)
    if not f.is_integer():
        raise ValueError(s)
    return int(f)


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.replace(",", " ").split())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(_int(x) for x in s.replace(",", " ").split())


def _finite(x):
    return math.isfinite(x)


def _loss_kind(section: str, kind: str, omega: str) -> LossKind:
    try:
        om = float(omega)
    except ValueError:
        raise ConfigError(f"{section}.omega: cannot parse {omega!r}") from None
    try:
        return parse_loss_kind(kind, om)
    except ValueError as e:
        field_ = "omega" if "omega" in str(e) else "kind"
        raise ConfigError(f"{section}.{field_}: {e}") from None


def _weighting(section: str, vals: dict, table) -> Weighting:
    mode = vals["mode"].strip().lower()
    try:
        k = float(vals["k"])
    except ValueError:
        raise ConfigError(f"{section}.k: cannot parse {vals['k']!r}") from None
    if not (k > 0 and math.isfinite(k)):
        raise ConfigError(f"{section}.k: must be > 0 (got {vals['k']!r})")
    if mode == "static":
        return StaticWeighting(table, k)
    if mode == "bws":
        try:
            det, first = _bool(vals["detach_weights"]), _bool(vals["apply_static_first"])
        except ValueError as e:
            raise ConfigError(f"{section}: bad boolean {e}") from None
        return BwsWeighting(table, BwsConfig(k=k, detach_weights=det, apply_static_first=first))
    raise ConfigError(f"{section}.mode: expected 'static' or 'bws' (got {vals['mode']!r})")


def resolve(text: str = "") -> RunConfig:
    """Parse config text, fill defaults and validate every field."""
    cp = _parser()
    cp.read_dict(DEFAULTS)
    user = _parser()
    try:
        user.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config syntax: {e}") from None
    for sec in user.sections():
        if sec == "weights" and user[sec]:
            for key in list(cp["weights"]):
                del cp["weights"][key]
        if not sec.startswith("variant:") and sec not in DEFAULTS:
            raise ConfigError(f"unknown config section [{sec}]")
        if not cp.has_section(sec):
            cp.add_section(sec)
        for key, val in user[sec].items():
            allowed = VARIANT_KEYS if sec.startswith("variant:") else DEFAULTS[sec].keys()
            if sec != "weights" and key not in allowed:
                raise ConfigError(f"{sec}.{key}: unknown field")
            cp[sec][key] = val

    pos = lambda x: x > 0
    task = {
        "seed": _get(cp, "task", "seed", _int, lambda x: x >= 0, "must be >= 0"),
        "n_samples": _get(cp, "task", "n_samples", _int, pos, "must be > 0"),
        "n_points": _get(cp, "task", "n_points", _int, lambda x: 0 < x <= 196, "must lie in [1, 196]"),
        "feature_dim": _get(cp, "task", "feature_dim", _int, pos, "must be > 0"),
        "outlier_frac": _get(cp, "task", "outlier_frac", float, lambda x: 0 <= x < 1, "must lie in [0, 1)"),
        "outlier_scale": _get(cp, "task", "outlier_scale", float, lambda x: x > 1 and _finite(x), "must be > 1"),
    }

    try:
        table = parse_weight_table(dict(cp["weights"]))
    except ValueError as e:
        raise ConfigError(f"weights: {e}") from None
    if set(table) != set(TERM_NAMES):
        raise ConfigError(f"weights: simulator needs exactly the terms {', '.join(TERM_NAMES)}")

    kind = _loss_kind("loss", cp["loss"]["kind"], cp["loss"]["omega"])
    weighting = _weighting("weighting", dict(cp["weighting"]), table)

    total = _get(cp, "train", "total_iters", _int, pos, "must be > 0")
    warm = _get(cp, "train", "warmup_iters", _int, lambda x: 0 <= x < total, "must satisfy 0 <= warmup_iters < total_iters")
    decay = _get(cp, "train", "decay_points", _ints,
                 lambda d: all(b > a for a, b in zip(d, d[1:])), "must be strictly increasing")
    cfg = TrainConfig(
        base_lr=_get(cp, "train", "base_lr", float, lambda x: x >= 0 and _finite(x), "must be finite and >= 0"),
        warmup_iters=warm,
        warmup_factor=_get(cp, "train", "warmup_factor", float, lambda x: 0 < x <= 1, "must lie in (0, 1]"),
        total_iters=total,
        decay_points=decay,
        decay_factor=_get(cp, "train", "decay_factor", float, lambda x: 0 < x <= 1, "must lie in (0, 1]"),
        loss_kind=kind,
        weighting=weighting,
        seed=_get(cp, "train", "seed", _int, lambda x: x >= 0, "must be >= 0"),
        divergence_threshold=_get(cp, "train", "divergence_threshold", float, lambda x: x > 1, "must be > 1"),
        hidden_dim=_get(cp, "train", "hidden_dim", _int, pos, "must be > 0"),
        init_scale=_get(cp, "train", "init_scale", float, lambda x: x > 0 and _finite(x), "must be > 0"),
    )

    lrs = _get(cp, "sweep", "lrs", _floats,
               lambda g: all(b > a for a, b in zip(g, g[1:])) and all(x >= 0 and _finite(x) for x in g),
               "must be strictly increasing and >= 0")
    jobs = _get(cp, "sweep", "jobs", _int, pos, "must be > 0")

    variants = {}
    for sec in cp.sections():
        if not sec.startswith("variant:"):
            continue
        name = sec.split(":", 1)[1].strip()
        vals = {**dict(cp["loss"]), **dict(cp["weighting"]), **dict(cp[sec])}
        variants[name] = {
            "loss_kind": _loss_kind(sec, vals["kind"], vals["omega"]),
            "weighting": _weighting(sec, vals, table),
        }

    out = io.StringIO()
    cp.write(out)
    return RunConfig(task, cfg, lrs, jobs, variants, out.getvalue())


def load(ref: str | None = None) -> RunConfig:
    return resolve(read_config_text(ref) if ref else "")


def describe_kind(kind: LossKind) -> dict:
    if isinstance(kind, DensePoint):
        return {"kind": "dp", "omega": kind.omega}
    assert isinstance(kind, SmoothL1)
    return {"kind": "smoothl1"}


def describe_weighting(w: Weighting) -> dict:
    table = {n: [g.value, wt] for n, (g, wt) in w.table.items()}
    if isinstance(w, StaticWeighting):
        return {"mode": "static", "k": w.k, "weights": table}
    return {"mode": "bws", "k": w.cfg.k, "detach_weights": w.cfg.detach_weights,
            "apply_static_first": w.cfg.apply_static_first, "weights": table}


__all__ = ["ConfigError", "RunConfig", "resolve", "load", "bundled_names", "read_config_text",
           "describe_kind", "describe_weighting", "format_weight_table", "Group"]
