import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dpbws.gradcheck import central_diff_params
from dpbws.robust_loss import DensePoint, SmoothL1
from dpbws.sim_trainer import (
    PARAM_NAMES,
    SIM_WEIGHTS,
    BwsWeighting,
    Completed,
    Diverged,
    StaticWeighting,
    TrainConfig,
    canonical_variants,
    divergence_sweep,
    gen_task,
    gradient,
    init_params,
    lr_at,
    scaled_decay_points,
    total_loss,
    train,
)
from dpbws.task_weighting import BwsConfig


class TestGenTask:
    def test_clean_targets_in_unit_interval(self):
        t = gen_task(1, n_samples=20, n_points=10, outlier_frac=0.0)
        assert np.all((t.targets > 0) & (t.targets <= 1))
        assert t.n_outliers == 0

    def test_deterministic(self):
        a, b = gen_task(42), gen_task(42)
        assert a.features.tobytes() == b.features.tobytes()
        assert a.targets.tobytes() == b.targets.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()
        assert gen_task(43).targets.tobytes() != a.targets.tobytes()

    def test_outlier_count(self):
        t = gen_task(42, n_samples=64, n_points=196, outlier_frac=0.05)
        assert t.n_outliers == 627 == math.floor(0.05 * 64 * 196)
        assert t.targets.shape == (64, 392)

    def test_outliers_are_displaced(self):
        t = gen_task(5, n_samples=10, n_points=8, outlier_frac=0.2, outlier_scale=4.0)
        rows, pts = np.nonzero(t.outlier_mask)
        for col in (2 * pts, 2 * pts + 1):
            vals = t.targets[rows, col]
            assert np.all((vals > 3.0) | (vals < -3.0))
        clean = ~np.repeat(t.outlier_mask, 2, axis=1)
        assert np.all((t.targets[clean] > 0) & (t.targets[clean] <= 1))

    @pytest.mark.parametrize("kw", [{"n_samples": 0}, {"n_points": 0}, {"outlier_frac": 1.0}, {"outlier_scale": 1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            gen_task(0, **kw)


class TestSchedule:
    def test_examples(self):
        cfg = TrainConfig(base_lr=0.002, warmup_iters=500, warmup_factor=0.1, total_iters=2000)
        assert lr_at(0, cfg) == pytest.approx(0.0002)
        assert lr_at(500, cfg) == 0.002
        assert lr_at(1538, cfg) == pytest.approx(0.0002)
        assert lr_at(1537, cfg) == 0.002
        assert lr_at(1999, cfg) == pytest.approx(0.00002)

    def test_scaled_decay_points(self):
        assert scaled_decay_points(2000) == (1538, 1846)
        assert scaled_decay_points(130_000) == (100_000, 120_000)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(2000, TrainConfig())

    @given(st.integers(1, 50), st.integers(220, 400), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
    def test_monotone(self, warm, total, factor, decay):
        cfg = TrainConfig(base_lr=0.1, warmup_iters=warm, total_iters=total, warmup_factor=factor,
                          decay_points=scaled_decay_points(total), decay_factor=decay)
        lrs = [lr_at(i, cfg) for i in range(total)]
        assert all(b >= a for a, b in zip(lrs[: warm + 1], lrs[1: warm + 1]))
        assert all(b <= a for a, b in zip(lrs[warm:], lrs[warm + 1:]))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(warmup_iters=2000, total_iters=2000)
        with pytest.raises(ValueError):
            TrainConfig(decay_points=(10, 10))


SMALL = dict(n_samples=6, n_points=4, feature_dim=3, outlier_frac=0.1, outlier_scale=3.0)
WEIGHTINGS = {
    "static": StaticWeighting(dict(SIM_WEIGHTS), 1.5),
    "bws-detached": BwsWeighting(dict(SIM_WEIGHTS), BwsConfig(k=2.0, detach_weights=True)),
    "bws-full": BwsWeighting(dict(SIM_WEIGHTS), BwsConfig(k=2.0, detach_weights=False)),
}


@pytest.mark.parametrize("kind", [SmoothL1(), DensePoint(0.25)], ids=["sl1", "dp"])
@pytest.mark.parametrize("mode", list(WEIGHTINGS))
def test_gradient_matches_finite_differences(kind, mode):
    task = gen_task(11, **SMALL)
    cfg = TrainConfig(loss_kind=kind, weighting=WEIGHTINGS[mode], hidden_dim=3, seed=3)
    params = init_params(task, cfg)
    grads, _, eff = gradient(task, params, cfg)
    frozen = eff if mode == "bws-detached" else None
    numeric = central_diff_params(lambda p: total_loss(task, p, cfg, frozen), params)
    for name in PARAM_NAMES:
        a, n = grads[name], numeric[name]
        assert np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-12) < 1e-5, name


def test_zero_lr_leaves_params_unchanged():
    task = gen_task(2, n_samples=8, n_points=5, feature_dim=4)
    cfg = TrainConfig(base_lr=0.0, total_iters=50, warmup_iters=5, decay_points=(30, 40), hidden_dim=4)
    res = train(task, cfg)
    assert isinstance(res.outcome, Completed)
    assert np.all(res.totals == res.totals[0])
    init = init_params(task, cfg)
    for name in PARAM_NAMES:
        np.testing.assert_array_equal(res.final_params[name], init[name])


def test_deterministic():
    task = gen_task(42, n_samples=8, n_points=20)
    cfg = TrainConfig(base_lr=1.0, total_iters=200, warmup_iters=20, decay_points=(150, 180),
                      weighting=BwsWeighting())
    a, b = train(task, cfg), train(task, cfg)
    assert a.totals.tobytes() == b.totals.tobytes()
    assert a.term_values.tobytes() == b.term_values.tobytes()
    assert a.outcome == b.outcome


def test_large_lr_diverges():
    task = gen_task(42)
    res = train(task, TrainConfig(base_lr=16.0, loss_kind=SmoothL1()))
    assert isinstance(res.outcome, Diverged)
    last = res.totals[-1]
    assert not math.isfinite(last) or last > 1e6 * res.totals[0]
    assert res.outcome.iter == len(res.totals) - 1


@pytest.mark.slow
@pytest.mark.parametrize("kind", [SmoothL1(), DensePoint(0.25)], ids=["sl1", "dp"])
def test_clean_task_converges(kind):
    task = gen_task(42, outlier_frac=0.0)
    res = train(task, TrainConfig(base_lr=0.5, loss_kind=kind))
    assert isinstance(res.outcome, Completed)
    assert res.totals[-1] < 0.1 * res.totals[0]


def test_bws_records_effective_weights():
    task = gen_task(4, n_samples=8, n_points=10)
    res = train(task, TrainConfig(base_lr=0.1, total_iters=20, warmup_iters=2, decay_points=(15,),
                                  weighting=BwsWeighting()))
    w = res.weights[0]
    # detection group has a single term, so its softmin weight is 1
    assert w[0] == 1.0
    assert w[1] + w[2] == pytest.approx(0.1)
    totals = (res.term_values * res.weights).sum(axis=1)
    np.testing.assert_allclose(totals, res.totals, rtol=1e-12)


def test_sweep_tiny_grid_completes():
    task = gen_task(42, n_samples=8, n_points=20)
    cfg = TrainConfig(total_iters=100, warmup_iters=10, decay_points=(70, 90))
    table = divergence_sweep(task, cfg, [1e-4, 1e-3], canonical_variants())
    assert all(isinstance(r.outcome, Completed) for r in table.rows)
    assert table.lr_max_table() == {v: 1e-3 for v in canonical_variants()}
    assert [r.variant for r in table.rows][:2] == ["smoothl1", "smoothl1"]


def test_sweep_rejects_unsorted_grid():
    with pytest.raises(ValueError):
        divergence_sweep(gen_task(1, n_samples=4, n_points=2), TrainConfig(), [0.1, 0.01], canonical_variants())
