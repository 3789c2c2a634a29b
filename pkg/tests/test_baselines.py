from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajqa.baselines import (
    BASELINES,
    KalmanParams,
    kalman_path,
    linear_path,
    predict_kalman,
    predict_linear,
    predict_stop,
    run_baseline,
)
from trajqa.dataset import TrajectoryWindow
from trajqa.evaluation import ade, fde
from trajqa.synthetic import constant_velocity_window_tracks

from helpers import random_window, rotation


def cv_window(v=(1.0, 0.0), n=1):
    return TrajectoryWindow("cv", constant_velocity_window_tracks(n, v))


def test_stop_holds_last_observation():
    w = cv_window()
    np.testing.assert_array_equal(predict_stop(w, 1), np.tile(w.obs(1)[-1], (12, 1)))


def test_stop_errors_on_unit_speed_walker():
    w = cv_window((1.0, 0.0))
    p = predict_stop(w, 1)
    assert ade(p, w.future(1)) == pytest.approx(np.mean(np.arange(1, 13)))
    assert ade(p, w.future(1)) == pytest.approx(6.5)
    assert fde(p, w.future(1)) == pytest.approx(12.0)


def test_linear_exact_on_linear_track():
    w = cv_window((0.37, -0.81))
    p = predict_linear(w, 1)
    assert ade(p, w.future(1)) < 1e-12 and fde(p, w.future(1)) < 1e-12


def test_linear_on_stationary_equals_stop():
    w = TrajectoryWindow("s", np.tile([[4.0, -1.0]], (1, 20, 1)))
    np.testing.assert_allclose(predict_linear(w, 1), predict_stop(w, 1), atol=1e-12)


def test_linear_fit_solves_normal_equations(rng):
    for _ in range(50):
        obs = rng.normal(size=(8, 2)).cumsum(axis=0)
        t = np.arange(8.0)
        A = np.column_stack([np.ones(8), t])
        coef, *_ = np.linalg.lstsq(A, obs, rcond=None)
        future = np.column_stack([np.ones(12), np.arange(8.0, 20.0)]) @ coef
        np.testing.assert_allclose(linear_path(obs, 12), future, atol=1e-10)
        # any perturbed line has a larger residual on the observations
        res = ((A @ coef - obs) ** 2).sum()
        for _ in range(5):
            alt = coef + rng.normal(0, 0.05, coef.shape)
            assert ((A @ alt - obs) ** 2).sum() >= res


def test_kalman_matches_linear_on_noiseless_track(rng):
    for _ in range(50):
        w = TrajectoryWindow("cv", constant_velocity_window_tracks(1, rng.normal(0, 1, 2), rng.normal(0, 5, (1, 2))))
        np.testing.assert_allclose(predict_kalman(w, 1), predict_linear(w, 1), atol=1e-6)


def test_kalman_settles_on_stationary_noisy_track(rng):
    sigma = 0.1
    speeds = []
    for _ in range(500):
        obs = np.array([3.0, -2.0]) + rng.normal(0, sigma, (8, 2))
        p = kalman_path(obs, 12)
        speeds.append(np.linalg.norm(p[1] - p[0]))
    # a two-point velocity estimate would move at about sigma * sqrt(2) per frame
    assert np.percentile(speeds, 95) < sigma


def test_kalman_params_validation():
    with pytest.raises(ValueError):
        KalmanParams(q=0.0)
    with pytest.raises(ValueError):
        KalmanParams(r=-1.0)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.floats(-100, 100), st.floats(-100, 100), st.floats(0, 2 * math.pi))
def test_baselines_equivariant(seed, dx, dy, theta):
    w = random_window(np.random.default_rng(seed), 1)
    R = rotation(theta)
    moved = TrajectoryWindow("s", w.agents @ R.T + [dx, dy])
    for name, f in BASELINES.items():
        np.testing.assert_allclose(f(moved, 1), f(w, 1) @ R.T + [dx, dy], atol=1e-9, rtol=0)


def test_run_baseline_records():
    w = cv_window(n=3)
    recs = run_baseline([w], "linear")
    assert [(r.agent, r.sample, r.fallback) for r in recs] == [(1, 0, False), (2, 0, False), (3, 0, False)]
    custom = run_baseline([w], "kalman", kalman=KalmanParams(q=1.0))
    assert len(custom) == 3
    with pytest.raises(ValueError):
        run_baseline([w], "oracle")
