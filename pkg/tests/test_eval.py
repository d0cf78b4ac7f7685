import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenetraj.data import TrajectoryWindow
from scenetraj.evaluate import (
    MetricsReport,
    ade,
    fde,
    linear_baseline,
    nde,
    nonlinear_mask,
    reports_to_csv,
    score,
)
from scenetraj.grid import chord_deviation

T = 12


def line(n=T, dx=1.0, dy=0.0):
    k = np.arange(n, dtype=float)[:, None]
    return k * np.array([dx, dy])


def turn(n=T):
    half = n // 2
    a = np.stack([np.arange(half, dtype=float), np.zeros(half)], 1)
    b = np.stack([np.full(n - half, half - 1.0), np.arange(1, n - half + 1, dtype=float)], 1)
    return np.vstack([a, b])


# ------------------------------------------------------------------ ADE / FDE

def test_metric_examples():
    truth = np.zeros((T, 2))
    assert ade(truth, truth) == 0.0 and fde(truth, truth) == 0.0
    shifted = truth + [3.0, 4.0]
    assert ade(shifted, truth) == pytest.approx(5.0) and fde(shifted, truth) == pytest.approx(5.0)
    ramp = np.zeros((T, 2))
    ramp[:, 0] = np.arange(T)
    assert ade(ramp, truth) == pytest.approx(5.5)
    assert fde(ramp, truth) == pytest.approx(11.0)


def test_metrics_batched_and_shape_checked():
    rng = np.random.default_rng(0)
    p, t = rng.normal(size=(5, T, 2)), rng.normal(size=(5, T, 2))
    assert ade(p, t).shape == (5,)
    assert np.allclose(ade(p, t), [ade(a, b) for a, b in zip(p, t)])
    with pytest.raises(ValueError):
        ade(p[:, :-1], t)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(-math.pi, math.pi), st.floats(-50, 50), st.floats(-50, 50))
def test_metrics_rigid_invariant(seed, angle, tx, ty):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=(T, 2)), rng.normal(size=(T, 2))
    R = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    move = lambda a: a @ R.T + [tx, ty]
    assert ade(move(p), move(t)) == pytest.approx(ade(p, t), abs=1e-9)
    assert fde(move(p), move(t)) == pytest.approx(fde(p, t), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_metrics_scale_linearly(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=(T, 2)), rng.normal(size=(T, 2))
    assert ade(2 * p, 2 * t) == pytest.approx(2 * ade(p, t), rel=1e-12)
    assert fde(2 * p, 2 * t) == pytest.approx(2 * fde(p, t), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_fde_bounded_by_worst_step_and_ade_monte_carlo(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=(T, 2)), rng.normal(size=(T, 2))
    d = [math.dist(a, b) for a, b in zip(p, t)]
    assert ade(p, t) == pytest.approx(sum(d) / T, rel=1e-12)
    assert fde(p, t) <= max(d) + 1e-12


# ------------------------------------------------------------------ NDE

def test_nde_null_when_all_linear():
    futures = np.stack([line(), line(dy=1.0)])
    assert not nonlinear_mask(futures, 0.1).any()
    assert nde(futures + 1.0, futures, 0.1) is None


def test_nde_single_nonlinear_window():
    futures = np.stack([line(), turn()])
    pred = futures + [[[0.0, 1.0]], [[0.0, 2.0]]]
    assert nonlinear_mask(futures, 0.1).tolist() == [False, True]
    assert nde(pred, futures, 0.1) == pytest.approx(2.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 1.0))
def test_nde_matches_brute_force_filter(seed, theta):
    rng = np.random.default_rng(seed)
    truth = np.cumsum(rng.normal(scale=0.3, size=(6, T, 2)), axis=1)
    pred = truth + rng.normal(size=truth.shape)
    keep = [k for k in range(6) if chord_deviation(truth[k]) > theta]
    expected = None if not keep else float(np.mean([ade(pred[k], truth[k]) for k in keep]))
    got = nde(pred, truth, theta)
    assert (got is None) == (expected is None)
    if expected is not None:
        assert got == pytest.approx(expected, rel=1e-12)


# ------------------------------------------------------------------ linear baseline

def test_linear_baseline_constant_velocity_exact():
    obs = line(8, 0.4, -0.1) + [1.0, 2.0]
    pred = linear_baseline(obs, T)
    truth = line(20, 0.4, -0.1)[8:] + [1.0, 2.0]
    assert np.allclose(pred, truth, atol=1e-12)


def test_linear_baseline_stationary():
    obs = np.tile([[3.0, -1.0]], (8, 1))
    assert np.allclose(linear_baseline(obs), obs[-1], atol=1e-12)


def test_linear_baseline_beats_zero_velocity_on_noisy_walks():
    rng = np.random.default_rng(3)
    wins = []
    for _ in range(200):
        v = rng.uniform(0.2, 0.6) * np.array([1.0, rng.uniform(-0.3, 0.3)])
        wins.append(line(20, *v) + rng.normal(scale=0.05, size=(20, 2)))
    lin = np.mean([ade(linear_baseline(w[:8]), w[8:]) for w in wins])
    still = np.mean([ade(np.tile(w[7], (T, 1)), w[8:]) for w in wins])
    assert lin < still


# ------------------------------------------------------------------ reports

def windows_for(scene, futures):
    out = []
    for k, f in enumerate(futures):
        obs = f[0] - line(9)[1:][::-1] * (f[1] - f[0])
        out.append(TrajectoryWindow(scene, k, 20 * k, np.vstack([obs[:8], f]), 1))
    return out


def test_report_weighting_and_round_trip():
    wa = windows_for("a", [line(), line(), turn()])
    wb = windows_for("b", [line()])
    windows = wa + wb
    truth = np.stack([w.future for w in windows])
    offsets = np.array([1.0, 1.0, 1.0, 5.0])
    pred = truth + offsets[:, None, None] * np.array([1.0, 0.0])
    r = score("toy", windows, pred, 0.1, "fp")
    assert r.scenes["a"].n_windows == 3 and r.scenes["a"].n_nonlinear == 1
    assert r.ade == pytest.approx((3 * 1.0 + 1 * 5.0) / 4)
    assert r.nde == pytest.approx(1.0) and r.scenes["b"].nde is None
    back = MetricsReport.from_dict(json.loads(r.to_json()))
    assert back.to_json() == r.to_json()
    csv = reports_to_csv([r]).splitlines()
    assert csv[0] == "config,scene,n_windows,n_nonlinear,ade,fde,nde"
    assert [row.split(",")[1] for row in csv[1:]] == ["a", "b", "average"]
    assert csv[2].endswith(",")  # no non-linear window in b


def test_report_rejects_foreign_format():
    with pytest.raises(ValueError):
        MetricsReport.from_dict({"format": "other", "version": 1})


def test_score_requires_aligned_predictions():
    ws = windows_for("a", [line()])
    with pytest.raises(ValueError):
        score("x", ws, np.zeros((2, T, 2)), 0.1)
