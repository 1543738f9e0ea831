"""Regenerate tests/fixtures/gps_{gt,pred}.jsonl and the oracle AP values.

The expected values are computed by the exhaustive-matching oracle in
tests/oracles.py, never by the evaluator under test.
"""

import json
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from oracles import oracle_ap  # noqa: E402

from dpbws.gps_metrics import (  # noqa: E402
    DEFAULT_KAPPA,
    DEFAULT_THRESHOLDS,
    InstanceRecord,
    SurfacePoint,
    write_jsonl,
)

LAYOUT = {"img_a": (2, 3), "img_b": (1, 2), "img_c": (2, 1), "img_d": (0, 1)}


def _uv(rng):
    return float(np.clip(rng.uniform(0.05, 0.95), 0.01, 1.0))


def build(seed=7):
    rng = np.random.default_rng(seed)
    gts, preds = [], []
    for image, (n_gt, n_pred) in LAYOUT.items():
        image_gts = []
        for _ in range(n_gt):
            mask = rng.random((6, 6)) < 0.5
            pts = [SurfacePoint(int(rng.integers(1, 3)), round(_uv(rng), 4), round(_uv(rng), 4)) for _ in range(4)]
            image_gts.append(InstanceRecord(image, mask, pts))
        gts += image_gts
        for k in range(n_pred):
            if image_gts:
                src = image_gts[k % len(image_gts)]
                noise = rng.uniform(0.0, 0.25)
                pts = []
                for p in src.points:
                    u = float(np.clip(p.u + rng.normal(0, noise), 0.01, 1.0))
                    v = float(np.clip(p.v + rng.normal(0, noise), 0.01, 1.0))
                    pts.append(SurfacePoint(p.part, round(u, 4), round(v, 4)))
                mask = src.mask ^ (rng.random((6, 6)) < noise)
            else:
                pts = [SurfacePoint(1, 0.5, 0.5)] * 4
                mask = rng.random((6, 6)) < 0.5
            preds.append(InstanceRecord(image, mask, pts, score=round(float(rng.uniform(0.1, 1.0)), 3)))
    return gts, preds


def main():
    out = ROOT / "tests" / "fixtures"
    out.mkdir(parents=True, exist_ok=True)
    gts, preds = build()
    write_jsonl(out / "gps_gt.jsonl", gts)
    write_jsonl(out / "gps_pred.jsonl", preds)
    expected = {
        sim: oracle_ap(gts, preds, DEFAULT_KAPPA, DEFAULT_THRESHOLDS, sim) for sim in ("gps", "gpsm")
    }
    (out / "gps_expected.json").write_text(json.dumps(expected, indent=2) + "\n")
    print(expected)


if __name__ == "__main__":
    main()
