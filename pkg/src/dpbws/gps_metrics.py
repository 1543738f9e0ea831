"""Geodesic point similarity (GPS), masked GPS and AP over GPS thresholds.

The true surface distance needs the body mesh; here the distance function is
pluggable and defaults to :func:`point_distance_uv`, a per-part Euclidean
distance in UV space with a large constant across parts.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Literal, NamedTuple, Optional, Sequence

import numpy as np

N_PARTS = 24
MAX_POINTS = 196
DEFAULT_KAPPA = 0.255  # convention of the original dense-pose evaluation tooling
DEFAULT_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


class SchemaError(ValueError):
    """Malformed instance record; ``lineno`` is set when read from a file."""

    def __init__(self, msg: str, lineno: int | None = None):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {msg}" if lineno is not None else msg)


class EmptyUnionWarning(UserWarning):
    pass


class SurfacePoint(NamedTuple):
    part: int
    u: float
    v: float

    @classmethod
    def make(cls, part, u, v) -> "SurfacePoint":
        if isinstance(part, bool) or int(part) != part:
            raise SchemaError(f"part index must be an integer, got {part!r}")
        part = int(part)
        if not 1 <= part <= N_PARTS:
            raise SchemaError(f"part index must lie in [1, {N_PARTS}], got {part}")
        u, v = float(u), float(v)
        if not (0.0 < u <= 1.0 and 0.0 < v <= 1.0):
            raise SchemaError(f"u, v must lie in (0, 1], got ({u}, {v})")
        return cls(part, u, v)


@dataclass
class InstanceRecord:
    """One person instance. ``points`` entries may be None in predictions (missing)."""

    image_id: str
    mask: np.ndarray
    points: list[Optional[SurfacePoint]] = field(default_factory=list)
    score: Optional[float] = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2 or 0 in self.mask.shape:
            raise SchemaError("mask must be a non-empty 2-D grid")
        if len(self.points) > MAX_POINTS:
            raise SchemaError(f"at most {MAX_POINTS} points per instance, got {len(self.points)}")
        if self.score is not None:
            s = float(self.score)
            if not 0.0 <= s <= 1.0:
                raise SchemaError(f"score must lie in [0, 1], got {s}")
            self.score = s


def point_distance_uv(a: SurfacePoint, b: SurfacePoint, d_max: float) -> float:
    """Euclidean UV distance within a part; ``d_max`` across parts."""
    if not d_max > 0:
        raise ValueError("d_max must be > 0")
    if a.part != b.part:
        return float(d_max)
    return math.hypot(a.u - b.u, a.v - b.v)


DistanceFn = Callable[[SurfacePoint, SurfacePoint], float]


@dataclass(frozen=True)
class GpsConfig:
    kappa: float = DEFAULT_KAPPA
    distance: Optional[DistanceFn] = None
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS

    def __post_init__(self):
        if not (self.kappa > 0 and math.isfinite(self.kappa)):
            raise ValueError(f"kappa must be > 0, got {self.kappa!r}")
        ts = tuple(float(t) for t in self.thresholds)
        if not ts:
            raise ValueError("at least one threshold is required")
        if any(not 0.0 < t < 1.0 for t in ts):
            raise ValueError("thresholds must lie in (0, 1)")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("thresholds must be strictly increasing")
        object.__setattr__(self, "thresholds", ts)

    def dist(self, a: SurfacePoint, b: SurfacePoint) -> float:
        if self.distance is not None:
            return float(self.distance(a, b))
        return point_distance_uv(a, b, 10.0 * self.kappa)


class GpsScore(NamedTuple):
    value: float
    n_missing: int


def gps_detail(gt: InstanceRecord, pred: InstanceRecord, cfg: GpsConfig) -> GpsScore:
    """GPS plus the count of ground-truth points with no predicted counterpart.

    Points correspond by index; a missing prediction contributes similarity 0.
    """
    if not gt.points:
        raise ValueError("ground-truth instance has no points")
    two_k2 = 2.0 * cfg.kappa * cfg.kappa
    acc = 0.0
    missing = 0
    for i, p in enumerate(gt.points):
        q = pred.points[i] if i < len(pred.points) else None
        if q is None:
            missing += 1
            continue
        g = cfg.dist(p, q)
        acc += math.exp(-g * g / two_k2)
    return GpsScore(acc / len(gt.points), missing)


def gps_instance(gt: InstanceRecord, pred: InstanceRecord, cfg: GpsConfig = GpsConfig()) -> float:
    """Mean over ground-truth points of ``exp(-g**2 / (2 * kappa**2))``."""
    return gps_detail(gt, pred, cfg).value


def mask_iou(m, mhat) -> float:
    """Intersection over union of two boolean grids; 0 (with a warning) if both are empty."""
    a = np.asarray(m, dtype=bool)
    b = np.asarray(mhat, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask dimensions differ: {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        warnings.warn("both masks are empty; IoU defined as 0", EmptyUnionWarning, stacklevel=2)
        return 0.0
    return np.count_nonzero(a & b) / union


def gps_masked(gps: float, iou: float) -> float:
    if not (0.0 <= gps <= 1.0 and 0.0 <= iou <= 1.0):
        raise ValueError("gps and iou must lie in [0, 1]")
    return math.sqrt(gps * iou)


Similarity = Literal["gps", "gpsm"]


def _pair_iou(gt: InstanceRecord, pred: InstanceRecord) -> float:
    if gt.mask.shape != pred.mask.shape:
        return 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyUnionWarning)
        return mask_iou(gt.mask, pred.mask)


def pair_scores(gt: InstanceRecord, pred: InstanceRecord, cfg: GpsConfig) -> tuple[float, float, float]:
    """``(gps, iou, gpsm)`` for one ground-truth/prediction pair.

    Masks of different size cannot overlap, so their IoU is taken as 0.
    """
    g = gps_instance(gt, pred, cfg)
    iou = _pair_iou(gt, pred)
    return g, iou, gps_masked(g, iou)


def similarity_matrix(gts: Sequence[InstanceRecord], preds: Sequence[InstanceRecord],
                      cfg: GpsConfig, similarity: Similarity = "gps") -> np.ndarray:
    """``sim[i, j]`` between prediction i and ground truth j of one image."""
    col = {"gps": 0, "gpsm": 2}[similarity]
    sim = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            sim[i, j] = pair_scores(g, p, cfg)[col]
    return sim


def greedy_match(sim: np.ndarray, threshold: float) -> np.ndarray:
    """Match predictions (rows, already in score order) to ground truths.

    Each prediction takes the unmatched ground truth with the highest
    similarity ``>= threshold``; ties go to the lower column index.
    Returns the matched column per row, -1 when unmatched.
    """
    n_pred, n_gt = sim.shape
    taken = np.zeros(n_gt, dtype=bool)
    match = np.full(n_pred, -1)
    for i in range(n_pred):
        best, best_j = threshold, -1
        for j in range(n_gt):
            if taken[j]:
                continue
            s = sim[i, j]
            if s >= best and (best_j < 0 or s > best):
                best, best_j = s, j
        if best_j >= 0:
            taken[best_j] = True
            match[i] = best_j
    return match


RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def interpolated_ap(is_tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP for detections already sorted by score."""
    if n_gt <= 0:
        raise ValueError("AP is undefined without ground truths")
    if is_tp.size == 0:
        return 0.0
    tp = np.cumsum(is_tp, dtype=np.float64)
    fp = np.cumsum(~is_tp, dtype=np.float64)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < precision.size, precision[np.minimum(idx, precision.size - 1)], 0.0)
    return float(q.mean())


@dataclass
class ApReport:
    ap: float
    per_threshold: list[tuple[float, float]]
    n_images: int
    n_instances: int
    n_predictions: int = 0
    similarity: str = "gps"

    def to_json(self) -> dict:
        return {
            "AP": self.ap,
            "per_threshold": [{"t": t, "ap": a} for t, a in self.per_threshold],
            "n_images": self.n_images,
            "n_instances": self.n_instances,
            "n_predictions": self.n_predictions,
            "similarity": self.similarity,
        }


def _group(records: Iterable[InstanceRecord]) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        out.setdefault(r.image_id, []).append(i)
    return out


def ap_over_thresholds(gts: Sequence[InstanceRecord], preds: Sequence[InstanceRecord],
                       cfg: GpsConfig = GpsConfig(), similarity: Similarity = "gps") -> ApReport:
    """COCO-style AP averaged over the GPS (or GPSm) thresholds of ``cfg``.

    Predictions are ranked globally by descending score (ties keep input
    order) and matched greedily within their image. Predictions for images
    without ground truth count as false positives.
    """
    if len(gts) == 0:
        raise ValueError("AP is undefined without ground-truth instances")
    if similarity not in ("gps", "gpsm"):
        raise ValueError(f"similarity must be 'gps' or 'gpsm', got {similarity!r}")
    scores = np.array([p.score if p.score is not None else 0.0 for p in preds], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    rank = np.empty(len(preds), dtype=int)
    rank[order] = np.arange(len(preds))

    gt_groups = _group(gts)
    pred_groups = _group(preds)
    # per image: prediction indices in rank order, and their similarity rows
    per_image = []
    for image_id, p_idx in sorted(pred_groups.items()):
        p_idx = sorted(p_idx, key=lambda i: rank[i])
        g_idx = gt_groups.get(image_id, [])
        sim = similarity_matrix([gts[j] for j in g_idx], [preds[i] for i in p_idx], cfg, similarity)
        per_image.append((np.array(p_idx, dtype=int), sim))

    rows = []
    for t in cfg.thresholds:
        is_tp = np.zeros(len(preds), dtype=bool)
        for p_idx, sim in per_image:
            is_tp[p_idx] = greedy_match(sim, t) >= 0
        rows.append((t, interpolated_ap(is_tp[order], len(gts))))
    ap = float(np.mean([a for _, a in rows]))
    images = set(gt_groups) | set(pred_groups)
    return ApReport(ap, rows, len(images), len(gts), len(preds), similarity)


# -- file formats ------------------------------------------------------------

def rle_decode(w: int, h: int, runs: Sequence[int]) -> np.ndarray:
    """Row-major runs alternating 0/1, starting with a (possibly empty) run of 0."""
    if w <= 0 or h <= 0:
        raise SchemaError("mask width and height must be positive")
    runs = list(runs)
    if any(isinstance(r, bool) or not isinstance(r, int) or r < 0 for r in runs):
        raise SchemaError("rle runs must be non-negative integers")
    if sum(runs) != w * h:
        raise SchemaError(f"rle runs sum to {sum(runs)}, expected w*h = {w * h}")
    vals = np.arange(len(runs)) % 2
    return np.repeat(vals, runs).astype(bool).reshape(h, w)


def rle_encode(mask) -> list[int]:
    flat = np.asarray(mask, dtype=bool).ravel()
    runs = []
    cur, n = False, 0
    for b in flat:
        if b == cur:
            n += 1
        else:
            runs.append(n)
            cur, n = b, 1
    runs.append(n)
    return runs


def record_from_json(obj: dict, *, prediction: bool, lineno: int | None = None) -> InstanceRecord:
    try:
        if not isinstance(obj, dict):
            raise SchemaError("expected a JSON object")
        for key in ("image_id", "mask", "points") + (("score",) if prediction else ()):
            if key not in obj:
                raise SchemaError(f"missing field {key!r}")
        m = obj["mask"]
        if not isinstance(m, dict) or not {"w", "h", "rle"} <= set(m):
            raise SchemaError("mask must be an object with w, h, rle")
        mask = rle_decode(m["w"], m["h"], m["rle"])
        if not isinstance(obj["points"], list):
            raise SchemaError("points must be a list")
        points = []
        for p in obj["points"]:
            if p is None and prediction:
                points.append(None)
                continue
            if not isinstance(p, list) or len(p) != 3:
                raise SchemaError(f"point must be [part, u, v], got {p!r}")
            points.append(SurfacePoint.make(*p))
        if not prediction and not points:
            raise SchemaError("ground-truth instance needs at least one point")
        score = obj.get("score") if prediction else None
        if prediction and not isinstance(score, (int, float)):
            raise SchemaError("score must be a number")
        return InstanceRecord(str(obj["image_id"]), mask, points, score)
    except SchemaError as e:
        if lineno is not None and e.lineno is None:
            raise SchemaError(str(e), lineno) from None
        raise
    except (TypeError, ValueError) as e:
        raise SchemaError(str(e), lineno) from None


def record_to_json(rec: InstanceRecord) -> dict:
    h, w = rec.mask.shape
    obj = {
        "image_id": rec.image_id,
        "mask": {"w": w, "h": h, "rle": rle_encode(rec.mask)},
        "points": [None if p is None else [p.part, p.u, p.v] for p in rec.points],
    }
    if rec.score is not None:
        obj["score"] = rec.score
    return obj


def load_jsonl(path, *, prediction: bool) -> list[InstanceRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"invalid JSON: {e.msg}", lineno) from None
            records.append(record_from_json(obj, prediction=prediction, lineno=lineno))
    return records


def write_jsonl(path, records: Iterable[InstanceRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(record_to_json(r)) + "\n")


def per_instance_rows(gts: Sequence[InstanceRecord], preds: Sequence[InstanceRecord],
                      cfg: GpsConfig, similarity: Similarity = "gps") -> list[tuple]:
    """One row per prediction: scores against its most similar same-image ground truth.

    Predictions whose image has no ground truth get empty score fields.
    """
    col = {"gps": 0, "gpsm": 2}[similarity]
    by_image = _group(gts)
    rows = []
    for p in preds:
        cands = [pair_scores(gts[j], p, cfg) for j in by_image.get(p.image_id, [])]
        if not cands:
            rows.append((p.image_id, None, None, None))
            continue
        best = max(cands, key=lambda c: c[col])
        rows.append((p.image_id, *best))
    return rows
