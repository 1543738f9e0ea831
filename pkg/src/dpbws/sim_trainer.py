"""Deterministic desk-scale training simulator.

A synthetic many-point regression task with injected outliers is fitted by
full-batch gradient descent. The model is a two-factor linear network: a
shared linear trunk ``H = X @ S`` feeds a regression head that predicts
``2 * n_points`` coordinates and a logistic head that plays the part of the
detection losses. The prediction is still linear in the features, but the
factorisation makes step-size blow-ups compound across iterations, which is
what lets large learning rates actually crash.

Loss terms per iteration:

* ``rcnn_cls``: binary cross-entropy of the logistic head (detection group);
* ``U`` / ``V``: mean robust loss over the u / v coordinates (dense-pose group).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from .robust_loss import DensePoint, LossKind, SmoothL1
from .task_weighting import (
    BwsConfig,
    Group,
    LossTerm,
    bws_backprop_scale,
    combine_bws,
    combine_static,
)

TERM_NAMES = ("rcnn_cls", "U", "V")

SIM_WEIGHTS: dict[str, tuple[Group, float]] = {
    "rcnn_cls": (Group.DETECTION, 1.0),
    "U": (Group.DENSEPOSE, 0.1),
    "V": (Group.DENSEPOSE, 0.1),
}


@dataclass(frozen=True)
class SyntheticTask:
    seed: int
    n_samples: int
    n_points: int
    feature_dim: int
    outlier_frac: float
    outlier_scale: float
    features: np.ndarray = field(repr=False)
    targets: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    outlier_mask: np.ndarray = field(repr=False)

    @property
    def n_outliers(self) -> int:
        return int(self.outlier_mask.sum())


def gen_task(
    seed: int = 42,
    n_samples: int = 32,
    n_points: int = 196,
    feature_dim: int = 16,
    outlier_frac: float = 0.05,
    outlier_scale: float = 5.0,
) -> SyntheticTask:
    """Generate a reproducible task.

    Clean targets are ``sigmoid(X @ A)`` for a fixed random map ``A`` scaled
    to unit pre-activation variance, hence in (0, 1). Exactly
    ``floor(outlier_frac * n_samples * n_points)`` (sample, point) pairs get
    both coordinates shifted by ``outlier_scale`` (the clean target range is
    1) with an independent random sign per coordinate. Classification labels
    come from a random hyperplane through the features.
    """
    if n_samples <= 0 or n_points <= 0 or feature_dim <= 0:
        raise ValueError("n_samples, n_points and feature_dim must be positive")
    if not (0.0 <= outlier_frac < 1.0):
        raise ValueError(f"outlier_frac must lie in [0, 1), got {outlier_frac!r}")
    if not outlier_scale > 1.0:
        raise ValueError(f"outlier_scale must be > 1, got {outlier_scale!r}")

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_samples, feature_dim))
    a = rng.standard_normal((feature_dim, 2 * n_points)) / math.sqrt(feature_dim)
    targets = 1.0 / (1.0 + np.exp(-(x @ a)))
    hyperplane = rng.standard_normal(feature_dim)
    labels = (x @ hyperplane > 0).astype(np.float64)

    n_out = math.floor(outlier_frac * n_samples * n_points)
    flat = rng.choice(n_samples * n_points, size=n_out, replace=False)
    mask = np.zeros(n_samples * n_points, dtype=bool)
    mask[flat] = True
    mask = mask.reshape(n_samples, n_points)
    signs = rng.choice(np.array([-1.0, 1.0]), size=(n_out, 2))
    rows, pts = np.nonzero(mask)
    targets[rows, 2 * pts] += outlier_scale * signs[:, 0]
    targets[rows, 2 * pts + 1] += outlier_scale * signs[:, 1]

    return SyntheticTask(seed, n_samples, n_points, feature_dim, outlier_frac,
                         outlier_scale, x, targets, labels, mask)


@dataclass(frozen=True)
class StaticWeighting:
    table: Mapping[str, tuple[Group, float]] = field(default_factory=lambda: dict(SIM_WEIGHTS))
    k: float = 1.0


@dataclass(frozen=True)
class BwsWeighting:
    table: Mapping[str, tuple[Group, float]] = field(default_factory=lambda: dict(SIM_WEIGHTS))
    cfg: BwsConfig = BwsConfig()


Weighting = Union[StaticWeighting, BwsWeighting]


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.002
    warmup_iters: int = 500
    warmup_factor: float = 0.1
    total_iters: int = 2000
    decay_points: tuple[int, ...] = (1538, 1846)
    decay_factor: float = 0.1
    loss_kind: LossKind = DensePoint(0.25)
    weighting: Weighting = StaticWeighting()
    seed: int = 42
    divergence_threshold: float = 1e6
    hidden_dim: int = 16
    init_scale: float = 1.0

    def __post_init__(self):
        if self.total_iters <= 0:
            raise ValueError("total_iters must be positive")
        if not (0 <= self.warmup_iters < self.total_iters):
            raise ValueError("warmup_iters must satisfy 0 <= warmup_iters < total_iters")
        dp = tuple(int(d) for d in self.decay_points)
        if any(b <= a for a, b in zip(dp, dp[1:])):
            raise ValueError("decay_points must be strictly increasing")
        object.__setattr__(self, "decay_points", dp)
        if self.base_lr < 0 or not math.isfinite(self.base_lr):
            raise ValueError("base_lr must be finite and >= 0")
        if not (0 < self.warmup_factor <= 1):
            raise ValueError("warmup_factor must lie in (0, 1]")
        if not (0 < self.decay_factor <= 1):
            raise ValueError("decay_factor must lie in (0, 1]")
        if not self.divergence_threshold > 1:
            raise ValueError("divergence_threshold must be > 1")
        if self.hidden_dim <= 0:
            raise ValueError("hidden_dim must be positive")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def scaled_decay_points(total_iters: int, fractions=(100 / 130, 120 / 130)) -> tuple[int, ...]:
    """Decay iterations at fixed fractions of the run, e.g. 1538 and 1846 of 2000."""
    return tuple(int(round(f * total_iters)) for f in fractions)


def lr_at(it: int, cfg: TrainConfig) -> float:
    """Linear warmup from ``warmup_factor * base_lr``, then step decay."""
    if not (0 <= it < cfg.total_iters):
        raise ValueError(f"iteration {it} outside [0, {cfg.total_iters})")
    if it < cfg.warmup_iters:
        alpha = it / cfg.warmup_iters
        return cfg.base_lr * (cfg.warmup_factor * (1.0 - alpha) + alpha)
    passed = sum(1 for d in cfg.decay_points if it >= d)
    return cfg.base_lr * cfg.decay_factor ** passed


# -- model -----------------------------------------------------------------

PARAM_NAMES = ("trunk", "reg_w", "reg_b", "cls_w", "cls_b")


def init_params(task: SyntheticTask, cfg: TrainConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    d, h, m = task.feature_dim, cfg.hidden_dim, 2 * task.n_points
    s = cfg.init_scale
    return {
        "trunk": rng.standard_normal((d, h)) * (s / math.sqrt(d)),
        "reg_w": rng.standard_normal((h, m)) * (s / math.sqrt(h)),
        "reg_b": np.zeros(m),
        "cls_w": rng.standard_normal(h) * (s / math.sqrt(h)),
        "cls_b": np.zeros(1),
    }


@dataclass
class _Forward:
    hidden: np.ndarray
    logits: np.ndarray
    elem_grad: np.ndarray
    values: dict[str, float]


def _forward(task: SyntheticTask, params, kind: LossKind) -> _Forward:
    # U/V are per-instance sums over points, averaged over samples.
    hidden = task.features @ params["trunk"]
    resid = hidden @ params["reg_w"] + params["reg_b"] - task.targets
    logits = hidden @ params["cls_w"] + params["cls_b"][0]
    y = task.labels
    n = task.n_samples
    cls = float(np.mean(np.logaddexp(0.0, logits) - y * logits))
    loss, grad = kind.loss_and_grad(resid)
    col = loss.sum(axis=0)
    values = {
        "rcnn_cls": cls,
        "U": float(col[0::2].sum()) / n,
        "V": float(col[1::2].sum()) / n,
    }
    return _Forward(hidden, logits, grad, values)


def _terms(values: Mapping[str, float], table) -> list[LossTerm]:
    return [LossTerm(n, values[n], *table[n]) for n in TERM_NAMES]


def weigh(values: Mapping[str, float], weighting: Weighting):
    """Return ``(total, effective_weights, grad_multipliers)`` for term values."""
    terms = _terms(values, weighting.table)
    if isinstance(weighting, StaticWeighting):
        wt = combine_static(terms, weighting.k)
        return wt.total, wt.per_term_weights, wt.per_term_weights
    wt = combine_bws(terms, weighting.cfg)
    return wt.total, wt.per_term_weights, bws_backprop_scale(terms, weighting.cfg)


def total_loss(task: SyntheticTask, params, cfg: TrainConfig,
               frozen_weights: Mapping[str, float] | None = None) -> float:
    """Weighted total at ``params``; with ``frozen_weights`` the weights are held fixed."""
    fw = _forward(task, params, cfg.loss_kind)
    if frozen_weights is not None:
        return float(sum(frozen_weights[n] * fw.values[n] for n in TERM_NAMES))
    return weigh(fw.values, cfg.weighting)[0]


def _backward(task: SyntheticTask, params, fw: _Forward,
              mult: Mapping[str, float]) -> dict[str, np.ndarray]:
    n = task.n_samples
    col_scale = np.empty(2 * task.n_points)
    col_scale[0::2] = mult["U"] / n
    col_scale[1::2] = mult["V"] / n
    g_out = fw.elem_grad * col_scale
    prob = 0.5 * (1.0 + np.tanh(0.5 * fw.logits))
    g_logit = (prob - task.labels) * (mult["rcnn_cls"] / n)
    g_hidden = g_out @ params["reg_w"].T + np.outer(g_logit, params["cls_w"])
    return {
        "trunk": task.features.T @ g_hidden,
        "reg_w": fw.hidden.T @ g_out,
        "reg_b": g_out.sum(axis=0),
        "cls_w": fw.hidden.T @ g_logit,
        "cls_b": np.array([g_logit.sum()]),
    }


def gradient(task: SyntheticTask, params, cfg: TrainConfig):
    """Analytic gradient of the total; returns ``(grads, values, effective_weights)``."""
    fw = _forward(task, params, cfg.loss_kind)
    _, eff, mult = weigh(fw.values, cfg.weighting)
    return _backward(task, params, fw, mult), fw.values, eff


# -- training --------------------------------------------------------------

@dataclass(frozen=True)
class Completed:
    def __str__(self):
        return "completed"


@dataclass(frozen=True)
class Diverged:
    iter: int

    def __str__(self):
        return f"diverged@{self.iter}"


Outcome = Union[Completed, Diverged]


@dataclass
class TrainResult:
    """Per-iteration history plus outcome.

    Rows are recorded before each update; a diverged run ends with the row
    whose total tripped the check.
    """

    iters: np.ndarray
    lrs: np.ndarray
    term_values: np.ndarray      # (n_rows, len(TERM_NAMES))
    weights: np.ndarray          # (n_rows, len(TERM_NAMES))
    totals: np.ndarray
    outcome: Outcome
    final_params: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    term_names: tuple[str, ...] = TERM_NAMES

    @property
    def diverged(self) -> bool:
        return isinstance(self.outcome, Diverged)

    @property
    def final_total(self) -> float:
        return float(self.totals[-1])

    @property
    def final_losses(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.term_names, self.term_values[-1])}


def train(task: SyntheticTask, cfg: TrainConfig) -> TrainResult:
    """Full-batch gradient descent with the configured schedule and weighting.

    Stops with :class:`Diverged` at the first iteration whose total is
    non-finite or exceeds ``divergence_threshold`` times the initial total.
    """
    params = init_params(task, cfg)
    n_terms = len(TERM_NAMES)
    T = cfg.total_iters
    lrs = np.empty(T)
    vals = np.empty((T, n_terms))
    wts = np.empty((T, n_terms))
    totals = np.empty(T)
    outcome: Outcome = Completed()
    initial = None
    last = T - 1
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for it in range(T):
            lr = lr_at(it, cfg)
            fw = _forward(task, params, cfg.loss_kind)
            if all(math.isfinite(v) for v in fw.values.values()):
                total, eff, mult = weigh(fw.values, cfg.weighting)
            else:
                total, eff, mult = math.inf, {n: math.nan for n in TERM_NAMES}, None
            lrs[it] = lr
            vals[it] = [fw.values[n] for n in TERM_NAMES]
            wts[it] = [eff[n] for n in TERM_NAMES]
            totals[it] = total
            if initial is None:
                initial = total
            if not math.isfinite(total) or total > cfg.divergence_threshold * initial:
                outcome, last = Diverged(it), it
                break
            if lr == 0.0:
                continue
            grads = _backward(task, params, fw, mult)
            for name in PARAM_NAMES:
                params[name] = params[name] - lr * grads[name]
    n = last + 1
    return TrainResult(np.arange(n), lrs[:n], vals[:n], wts[:n], totals[:n], outcome, params)


# -- sweeps ----------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    variant: str
    lr: float
    outcome: Outcome
    final_total: float


@dataclass
class SweepTable:
    rows: list[SweepRow]
    variants: tuple[str, ...]
    lr_grid: tuple[float, ...]

    def lr_max(self, variant: str) -> float | None:
        """Largest grid LR at which ``variant`` completed, or None."""
        ok = [r.lr for r in self.rows if r.variant == variant and isinstance(r.outcome, Completed)]
        return max(ok) if ok else None

    def lr_max_table(self) -> dict[str, float | None]:
        return {v: self.lr_max(v) for v in self.variants}


def divergence_sweep(
    task: SyntheticTask,
    base_cfg: TrainConfig,
    lr_grid: Sequence[float],
    variants: Mapping[str, Mapping[str, object]],
    runner: Callable | None = None,
) -> SweepTable:
    """Train every ``(variant, lr)`` cell; variants are field overrides of ``base_cfg``.

    ``runner`` may be an executor-style ``map`` to run cells concurrently;
    rows are assembled in (variant, lr) order regardless.
    """
    grid = tuple(float(x) for x in lr_grid)
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("lr_grid must be strictly increasing")
    cells = [(name, lr, base_cfg.replace(**dict(over), base_lr=lr))
             for name, over in variants.items() for lr in grid]
    mapper = runner or map
    results = list(mapper(train, [task] * len(cells), [c for _, _, c in cells]))
    rows = [SweepRow(name, lr, res.outcome, res.final_total)
            for (name, lr, _), res in zip(cells, results)]
    return SweepTable(rows, tuple(variants), grid)


def canonical_variants(k: float = 1.0) -> dict[str, dict[str, object]]:
    """The loss/weighting variants compared in the stability sweep."""
    static = StaticWeighting(dict(SIM_WEIGHTS), k)
    bws = BwsWeighting(dict(SIM_WEIGHTS), BwsConfig(k=k))
    return {
        "smoothl1": {"loss_kind": SmoothL1(), "weighting": static},
        "dp0.5": {"loss_kind": DensePoint(0.5), "weighting": static},
        "dp0.25": {"loss_kind": DensePoint(0.25), "weighting": static},
        "dp0.25+bws": {"loss_kind": DensePoint(0.25), "weighting": bws},
    }
