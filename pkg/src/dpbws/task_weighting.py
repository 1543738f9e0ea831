"""Multi-task loss composition: fixed per-term weights or balanced softmin weights.

Terms belong to one of two groups. Detection terms are summed as-is and
dense-pose terms are scaled by a group factor ``k``::

    total = detection_subtotal + k * densepose_subtotal

The balanced mode replaces the fixed weights inside each group with
``exp(-L_i) / sum_j exp(-L_j)``, so a term with a larger loss is given less
weight in that iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np


class Group(str, Enum):
    DETECTION = "detection"
    DENSEPOSE = "densepose"

    @classmethod
    def parse(cls, s) -> "Group":
        if isinstance(s, cls):
            return s
        key = str(s).strip().lower().replace("-", "").replace("_", "")
        aliases = {"det": cls.DETECTION, "detection": cls.DETECTION,
                   "uv": cls.DENSEPOSE, "densepose": cls.DENSEPOSE, "dp": cls.DENSEPOSE}
        if key not in aliases:
            raise ValueError(f"unknown loss group {s!r}")
        return aliases[key]


# Default fixed weights of the eight R-CNN dense-pose losses.
DEFAULT_WEIGHTS: dict[str, tuple[Group, float]] = {
    "rpn_cls": (Group.DETECTION, 1.0),
    "rpn_reg": (Group.DETECTION, 1.0),
    "rcnn_cls": (Group.DETECTION, 1.0),
    "rcnn_reg": (Group.DETECTION, 1.0),
    "Ann": (Group.DENSEPOSE, 2.0),
    "I": (Group.DENSEPOSE, 0.3),
    "U": (Group.DENSEPOSE, 0.1),
    "V": (Group.DENSEPOSE, 0.1),
}


@dataclass(frozen=True)
class LossTerm:
    name: str
    value: float
    group: Group
    static_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "group", Group.parse(self.group))
        v, w = float(self.value), float(self.static_weight)
        if not math.isfinite(v) or v < 0:
            raise ValueError(f"loss term {self.name!r}: value must be finite and >= 0, got {v!r}")
        if not math.isfinite(w) or w < 0:
            raise ValueError(f"loss term {self.name!r}: static_weight must be >= 0, got {w!r}")
        object.__setattr__(self, "value", v)
        object.__setattr__(self, "static_weight", w)


@dataclass(frozen=True)
class BwsConfig:
    k: float = 1.0
    detach_weights: bool = True
    apply_static_first: bool = True

    def __post_init__(self):
        if not (float(self.k) > 0 and math.isfinite(self.k)):
            raise ValueError(f"k must be > 0, got {self.k!r}")


@dataclass
class WeightedTotal:
    """Result of a composition.

    ``per_term_weights[name] * value`` summed over all terms gives ``total``;
    the group factor ``k`` is folded into the dense-pose entries.
    ``group_subtotals`` are reported before ``k`` is applied.
    """

    total: float
    per_term_weights: dict[str, float]
    group_subtotals: dict[Group, float]
    empty_groups: tuple[Group, ...] = field(default=())


def bws_weights(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """Softmin weights ``exp(-L_i) / sum_j exp(-L_j)``.

    The minimum is subtracted before exponentiating; the result is unchanged
    by this shift, but it keeps the largest exponent at ``exp(0)``.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("bws_weights needs at least one loss value")
    if not np.all(np.isfinite(v)):
        raise ValueError("bws_weights got a non-finite loss value")
    e = np.exp(-(v - v.min()))
    return e / e.sum()


def _group_factor(group: Group, k: float) -> float:
    return k if group is Group.DENSEPOSE else 1.0


def _check_terms(terms: Sequence[LossTerm]) -> None:
    if len(terms) == 0:
        raise ValueError("at least one loss term is required")
    names = [t.name for t in terms]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate loss term names in {names}")
    for t in terms:
        if not isinstance(t.group, Group):
            raise ValueError(f"unknown group {t.group!r} for term {t.name!r}")


def combine_static(terms: Sequence[LossTerm], k: float = 1.0) -> WeightedTotal:
    """Fixed-weight composition: ``sum_det w_i L_i + k * sum_uv w_i L_i``."""
    _check_terms(terms)
    k = float(k)
    if not k > 0:
        raise ValueError(f"k must be > 0, got {k!r}")
    subtotals = {Group.DETECTION: 0.0, Group.DENSEPOSE: 0.0}
    weights = {}
    for t in terms:
        subtotals[t.group] += t.static_weight * t.value
        weights[t.name] = t.static_weight * _group_factor(t.group, k)
    total = subtotals[Group.DETECTION] + k * subtotals[Group.DENSEPOSE]
    return WeightedTotal(total, weights, subtotals)


def _by_group(terms: Sequence[LossTerm]) -> dict[Group, list[LossTerm]]:
    out: dict[Group, list[LossTerm]] = {Group.DETECTION: [], Group.DENSEPOSE: []}
    for t in terms:
        out[t.group].append(t)
    return out


def _scaled_values(members: list[LossTerm], cfg: BwsConfig) -> tuple[np.ndarray, np.ndarray]:
    raw = np.array([t.value for t in members])
    scale = np.array([t.static_weight for t in members]) if cfg.apply_static_first else np.ones(len(members))
    return raw, scale


def combine_bws(terms: Sequence[LossTerm], cfg: BwsConfig = BwsConfig()) -> WeightedTotal:
    """Balanced composition, normalising the softmin weights within each group.

    A group with no terms contributes 0 and is listed in ``empty_groups``.
    """
    _check_terms(terms)
    subtotals = {Group.DETECTION: 0.0, Group.DENSEPOSE: 0.0}
    weights: dict[str, float] = {}
    empty = []
    for group, members in _by_group(terms).items():
        if not members:
            empty.append(group)
            continue
        raw, scale = _scaled_values(members, cfg)
        vals = scale * raw
        w = bws_weights(vals)
        subtotals[group] = float(np.dot(w, vals))
        factor = _group_factor(group, cfg.k)
        for t, wi, si in zip(members, w, scale):
            weights[t.name] = float(wi * si * factor)
    total = subtotals[Group.DETECTION] + cfg.k * subtotals[Group.DENSEPOSE]
    return WeightedTotal(total, weights, subtotals, tuple(empty))


def bws_backprop_scale(terms: Sequence[LossTerm], cfg: BwsConfig = BwsConfig()) -> dict[str, float]:
    """Gradient multiplier of each raw term value in the balanced total.

    Detached: the softmin weights are constants, so the multiplier is the
    effective weight. Otherwise the product rule through the softmin gives,
    for scaled values ``v`` with weights ``w`` and ``S = sum_i w_i v_i``::

        dS/dv_j = w_j * (1 - v_j + S)

    which is then multiplied by the static scale and the group factor.
    """
    _check_terms(terms)
    out: dict[str, float] = {}
    for group, members in _by_group(terms).items():
        if not members:
            continue
        raw, scale = _scaled_values(members, cfg)
        vals = scale * raw
        w = bws_weights(vals)
        if cfg.detach_weights:
            d = w
        else:
            d = w * (1.0 - vals + np.dot(w, vals))
        factor = _group_factor(group, cfg.k)
        for t, di, si in zip(members, d, scale):
            out[t.name] = float(di * si * factor)
    return out


def make_terms(values: Mapping[str, float], table: Mapping[str, tuple[Group, float]] = DEFAULT_WEIGHTS) -> list[LossTerm]:
    """Attach group and static weight from ``table`` to named loss values."""
    terms = []
    for name, value in values.items():
        if name not in table:
            raise KeyError(f"loss term {name!r} has no entry in the weight table")
        group, w = table[name]
        terms.append(LossTerm(name, value, group, w))
    return terms


def parse_weight_table(lines: Iterable[str] | Mapping[str, str]) -> dict[str, tuple[Group, float]]:
    """Parse ``name = group, weight`` entries (``#`` comments allowed).

    Also accepts an already split mapping such as a configparser section.
    """
    if isinstance(lines, Mapping):
        items = list(lines.items())
    else:
        items = []
        for lineno, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'name = group, weight'")
            key, val = line.split("=", 1)
            items.append((key.strip(), val))
    table = {}
    for key, val in items:
        parts = [p.strip() for p in val.replace(",", " ").split()]
        if len(parts) != 2:
            raise ValueError(f"weight table entry {key!r}: expected 'group, weight', got {val!r}")
        w = float(parts[1])
        if not (math.isfinite(w) and w >= 0):
            raise ValueError(f"weight table entry {key!r}: weight must be >= 0")
        table[key] = (Group.parse(parts[0]), w)
    return table


def format_weight_table(table: Mapping[str, tuple[Group, float]]) -> str:
    return "".join(f"{name} = {g.value}, {w!r}\n" for name, (g, w) in table.items())
