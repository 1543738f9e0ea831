import json
import math
import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpbws.gps_metrics import (
    DEFAULT_THRESHOLDS,
    EmptyUnionWarning,
    GpsConfig,
    InstanceRecord,
    SchemaError,
    SurfacePoint,
    ap_over_thresholds,
    gps_detail,
    gps_instance,
    gps_masked,
    greedy_match,
    interpolated_ap,
    load_jsonl,
    mask_iou,
    point_distance_uv,
    record_from_json,
    record_to_json,
    rle_decode,
    rle_encode,
)
from oracles import oracle_ap, oracle_gps, oracle_iou

FIXTURES = Path(__file__).parent / "fixtures"
KAPPA = 0.255
MASK = np.ones((2, 2), dtype=bool)


def rec(image, points, score=None, mask=MASK):
    return InstanceRecord(image, mask, [SurfacePoint(*p) if p is not None else None for p in points], score)


def test_thresholds_are_exact_decimals():
    assert DEFAULT_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)


class TestDistance:
    def test_identical(self):
        p = SurfacePoint(3, 0.2, 0.7)
        assert point_distance_uv(p, p, 2.55) == 0

    def test_345(self):
        assert point_distance_uv(SurfacePoint(1, 0.1, 0.1), SurfacePoint(1, 0.4, 0.5), 2.55) == pytest.approx(0.5)

    def test_cross_part(self):
        assert point_distance_uv(SurfacePoint(1, 0.1, 0.1), SurfacePoint(2, 0.1, 0.1), 2.55) == 2.55

    def test_point_validation(self):
        for bad in [(0, 0.5, 0.5), (25, 0.5, 0.5), (1, 0.0, 0.5), (1, 0.5, 1.2), (1.5, 0.5, 0.5)]:
            with pytest.raises(SchemaError):
                SurfacePoint.make(*bad)


class TestGps:
    def test_perfect(self):
        gt = rec("a", [(1, 0.2, 0.3), (4, 0.9, 0.1)])
        assert gps_instance(gt, gt, GpsConfig()) == 1.0

    def test_single_point_at_kappa_sqrt2(self):
        g = KAPPA * math.sqrt(2)
        gt = rec("a", [(1, 0.1, 0.1)])
        pred = rec("a", [(1, 0.1 + g, 0.1)])
        assert gps_instance(gt, pred, GpsConfig(KAPPA)) == pytest.approx(math.exp(-1), rel=1e-12)

    def test_missing_point(self):
        gt = rec("a", [(1, 0.2, 0.2), (2, 0.4, 0.4)])
        pred = rec("a", [(1, 0.2, 0.2), None])
        assert gps_detail(gt, pred, GpsConfig()) == (0.5, 1)
        assert gps_detail(gt, rec("a", [(1, 0.2, 0.2)]), GpsConfig()) == (0.5, 1)

    def test_pluggable_distance(self):
        cfg = GpsConfig(kappa=1.0, distance=lambda a, b: 1.0)
        gt = rec("a", [(1, 0.2, 0.2)])
        assert gps_instance(gt, gt, cfg) == pytest.approx(math.exp(-0.5))

    def test_cross_part_underflows(self):
        gt = rec("a", [(1, 0.5, 0.5)])
        assert gps_instance(gt, rec("a", [(2, 0.5, 0.5)]), GpsConfig()) < 1e-20

    @given(st.lists(st.tuples(st.integers(1, 3), st.floats(0.01, 1), st.floats(0.01, 1)), min_size=1, max_size=6),
           st.lists(st.tuples(st.integers(1, 3), st.floats(0.01, 1), st.floats(0.01, 1)), min_size=1, max_size=6))
    def test_matches_oracle_and_in_unit_interval(self, a, b):
        gt, pred = rec("a", a), rec("a", b)
        v = gps_instance(gt, pred, GpsConfig(KAPPA))
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(oracle_gps(gt, pred, KAPPA), rel=1e-12, abs=1e-300)

    @given(st.floats(0.0, 0.3), st.floats(1e-3, 0.3))
    def test_strictly_decreasing_in_distance(self, d, extra):
        gt = rec("a", [(1, 0.1, 0.1), (1, 0.5, 0.5)])
        near = rec("a", [(1, 0.1 + d, 0.1), (1, 0.5, 0.5)])
        far = rec("a", [(1, 0.1 + d + extra, 0.1), (1, 0.5, 0.5)])
        cfg = GpsConfig(KAPPA)
        assert gps_instance(gt, far, cfg) < gps_instance(gt, near, cfg)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            GpsConfig(kappa=0)
        with pytest.raises(ValueError):
            GpsConfig(thresholds=(0.5, 0.5))
        with pytest.raises(ValueError):
            GpsConfig(thresholds=(0.5, 1.0))


class TestMask:
    def test_identical(self):
        m = np.array([[1, 0], [1, 1]], bool)
        assert mask_iou(m, m) == 1.0

    def test_disjoint(self):
        assert mask_iou([[1, 0]], [[0, 1]]) == 0.0

    def test_one_of_two(self):
        assert mask_iou([[1, 0, 0]], [[1, 1, 0]]) == 0.5

    def test_empty_union_flagged(self):
        with pytest.warns(EmptyUnionWarning):
            assert mask_iou([[0, 0]], [[0, 0]]) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mask_iou(np.zeros((2, 2)), np.zeros((2, 3)))

    @given(st.integers(1, 5), st.integers(1, 5), st.data())
    def test_symmetric_and_matches_oracle(self, h, w, data):
        a = np.array(data.draw(st.lists(st.booleans(), min_size=h * w, max_size=h * w))).reshape(h, w)
        b = np.array(data.draw(st.lists(st.booleans(), min_size=h * w, max_size=h * w))).reshape(h, w)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyUnionWarning)
            assert mask_iou(a, b) == mask_iou(b, a) == pytest.approx(oracle_iou(a, b))
            if (a | b).any():
                assert (mask_iou(a, b) == 1.0) == bool((a == b).all())


class TestMasked:
    def test_examples(self):
        assert gps_masked(1, 1) == 1
        assert gps_masked(0.37, 0) == 0
        assert gps_masked(0.81, 0.25) == pytest.approx(0.45)

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_between_min_and_max(self, g, i):
        m = gps_masked(g, i)
        assert min(g, i) - 1e-15 <= m <= max(g, i) + 1e-15

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            gps_masked(1.1, 0.5)


class TestRle:
    def test_decode(self):
        m = rle_decode(3, 2, [1, 2, 3])
        np.testing.assert_array_equal(m, [[0, 1, 1], [0, 0, 0]])

    def test_leading_one(self):
        assert rle_decode(2, 1, [0, 2]).all()

    def test_bad_sum(self):
        with pytest.raises(SchemaError):
            rle_decode(2, 2, [1, 2])

    @given(st.integers(1, 6), st.integers(1, 6), st.data())
    def test_round_trip(self, h, w, data):
        bits = data.draw(st.lists(st.booleans(), min_size=h * w, max_size=h * w))
        m = np.array(bits).reshape(h, w)
        np.testing.assert_array_equal(rle_decode(w, h, rle_encode(m)), m)

    def test_record_round_trip(self):
        r = rec("x", [(1, 0.5, 0.25), None], score=0.5)
        back = record_from_json(json.loads(json.dumps(record_to_json(r))), prediction=True)
        assert back.points == r.points and back.score == 0.5
        np.testing.assert_array_equal(back.mask, r.mask)

    def test_schema_line_number(self, tmp_path):
        good = json.dumps(record_to_json(rec("a", [(1, 0.5, 0.5)])))
        p = tmp_path / "gt.jsonl"
        p.write_text(good + "\n" + good.replace('"points"', '"pts"') + "\n")
        with pytest.raises(SchemaError, match="line 2"):
            load_jsonl(p, prediction=False)

    def test_prediction_needs_score(self):
        obj = record_to_json(rec("a", [(1, 0.5, 0.5)]))
        with pytest.raises(SchemaError, match="score"):
            record_from_json(obj, prediction=True)


def table_fixture(sims, kappa=KAPPA):
    """One image whose prediction/GT similarities equal ``sims[i][j]``.

    Each record has a single point whose coordinates identify it; a lookup
    distance returns the distance that produces the requested similarity.
    Scores decrease with the row index.
    """
    n_pred, n_gt = len(sims), len(sims[0])
    gts = [InstanceRecord("a", MASK, [SurfacePoint(1, (j + 1) / 10, 0.05)]) for j in range(n_gt)]
    preds = [InstanceRecord("a", MASK, [SurfacePoint(2, 0.05, (i + 1) / 10)], 0.9 - 0.1 * i)
             for i in range(n_pred)]
    table = {}
    for i in range(n_pred):
        for j in range(n_gt):
            table[(gts[j].points[0], preds[i].points[0])] = kappa * math.sqrt(-2 * math.log(sims[i][j]))
    return gts, preds, lambda a, b: table[(a, b)]


class TestAp:
    def test_perfect(self):
        gt = rec("a", [(1, 0.3, 0.3)])
        rep = ap_over_thresholds([gt], [rec("a", [(1, 0.3, 0.3)], score=0.9)])
        assert rep.ap == 1.0
        assert [t for t, _ in rep.per_threshold] == list(DEFAULT_THRESHOLDS)

    def test_similarity_point_six(self):
        # GPS of exactly 0.6 clears the thresholds 0.5, 0.55 and 0.6 only
        gts = [InstanceRecord("a", MASK, [SurfacePoint(1, 0.1, 0.1)] * 5)]
        preds = [InstanceRecord("a", MASK, [SurfacePoint(1, 0.1, 0.1)] * 3 + [None, None], 0.5)]
        cfg = GpsConfig(KAPPA)
        assert gps_instance(gts[0], preds[0], cfg) == 0.6
        rep = ap_over_thresholds(gts, preds, cfg)
        assert rep.ap == pytest.approx(0.3, abs=1e-15)
        assert [a for _, a in rep.per_threshold] == [1.0, 1.0, 1.0] + [0.0] * 7

    def test_higher_score_steals_best_gt(self):
        # greedy: pred0 takes gt1 (0.95), leaving pred1 only gt0 at 0.3, so one
        # TP at every threshold and AP = 51/101; the optimal pairing would do better
        gts, preds, dist = table_fixture([[0.8, 0.95], [0.3, 0.9]])
        cfg = GpsConfig(KAPPA, distance=dist)
        rep = ap_over_thresholds(gts, preds, cfg)
        assert rep.ap == pytest.approx(51 / 101, abs=1e-12)
        assert rep.ap == pytest.approx(oracle_ap(gts, preds, KAPPA, cfg.thresholds, distance=dist), abs=1e-12)

    def test_no_ground_truth(self):
        with pytest.raises(ValueError):
            ap_over_thresholds([], [rec("a", [(1, 0.5, 0.5)], 0.3)])

    def test_no_predictions(self):
        assert ap_over_thresholds([rec("a", [(1, 0.5, 0.5)])], []).ap == 0.0

    def test_prediction_on_unknown_image_is_false_positive(self):
        gt = rec("a", [(1, 0.5, 0.5)])
        good = rec("a", [(1, 0.5, 0.5)], 0.5)
        stray = rec("zzz", [(1, 0.5, 0.5)], 0.9)
        rep = ap_over_thresholds([gt], [good, stray])
        assert rep.ap == pytest.approx(oracle_ap([gt], [good, stray], KAPPA, DEFAULT_THRESHOLDS))
        assert rep.ap < 1.0

    def test_greedy_match_tie_breaks_to_first_gt(self):
        sim = np.array([[0.7, 0.7], [0.7, 0.7]])
        np.testing.assert_array_equal(greedy_match(sim, 0.5), [0, 1])
        np.testing.assert_array_equal(greedy_match(np.array([[0.4, 0.6]]), 0.6), [1])
        np.testing.assert_array_equal(greedy_match(np.array([[0.4, 0.59]]), 0.6), [-1])

    def test_interpolated_ap(self):
        assert interpolated_ap(np.array([True, False, True]), 2) == pytest.approx((51 + 50 * 2 / 3) / 101)
        with pytest.raises(ValueError):
            interpolated_ap(np.array([True]), 0)

    def test_bundled_fixture(self):
        from dpbws.gps_metrics import load_jsonl
        gts = load_jsonl(FIXTURES / "gps_gt.jsonl", prediction=False)
        preds = load_jsonl(FIXTURES / "gps_pred.jsonl", prediction=True)
        expected = json.loads((FIXTURES / "gps_expected.json").read_text())
        for sim in ("gps", "gpsm"):
            assert ap_over_thresholds(gts, preds, GpsConfig(), sim).ap == pytest.approx(expected[sim], abs=1e-12)


point = st.tuples(st.integers(1, 2), st.floats(0.05, 1.0), st.floats(0.05, 1.0))


@st.composite
def small_eval(draw):
    gts, preds = [], []
    for image in draw(st.lists(st.sampled_from("abc"), min_size=1, max_size=3, unique=True)):
        n_gt = draw(st.integers(0, 3))
        for _ in range(n_gt):
            m = np.array(draw(st.lists(st.booleans(), min_size=9, max_size=9))).reshape(3, 3)
            gts.append(InstanceRecord(image, m, [SurfacePoint(*p) for p in draw(st.lists(point, min_size=1, max_size=3))]))
        for _ in range(draw(st.integers(0, 5 - n_gt if n_gt < 5 else 0))):
            m = np.array(draw(st.lists(st.booleans(), min_size=9, max_size=9))).reshape(3, 3)
            pts = [SurfacePoint(*p) for p in draw(st.lists(point, min_size=1, max_size=3))]
            preds.append(InstanceRecord(image, m, pts, draw(st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9]))))
    if not gts:
        gts.append(InstanceRecord("a", np.ones((3, 3), bool), [SurfacePoint(1, 0.5, 0.5)]))
    return gts, preds


@settings(max_examples=60, deadline=None)
@given(small_eval(), st.sampled_from(["gps", "gpsm"]))
def test_ap_matches_exhaustive_oracle(case, similarity):
    gts, preds = case
    cfg = GpsConfig(kappa=0.5)
    got = ap_over_thresholds(gts, preds, cfg, similarity).ap
    assert abs(got - oracle_ap(gts, preds, 0.5, cfg.thresholds, similarity)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(small_eval())
def test_ap_invariant_to_monotone_score_rescaling(case):
    gts, preds = case
    cfg = GpsConfig(kappa=0.5)
    rescaled = [InstanceRecord(p.image_id, p.mask, p.points, p.score ** 3 / 2) for p in preds]
    assert ap_over_thresholds(gts, preds, cfg).ap == ap_over_thresholds(gts, rescaled, cfg).ap
