"""Classical zero-shot predictors: Stop, least-squares Linear, constant-velocity Kalman."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from trajqa.dataset import TrajectoryWindow
from trajqa.evaluation import PredictionRecord


@dataclass(frozen=True)
class KalmanParams:
    q: float = 1e-2
    r: float = 1e-1
    p0: float = 1.0

    def __post_init__(self):
        if min(self.q, self.r, self.p0) <= 0:
            raise ValueError("Kalman noise parameters must be positive")


def stop_path(obs: np.ndarray, t_pred: int) -> np.ndarray:
    return np.repeat(obs[-1:], t_pred, axis=0)


def linear_path(obs: np.ndarray, t_pred: int) -> np.ndarray:
    """Per-axis least-squares line through the observations, extrapolated."""
    t_obs = len(obs)
    t = np.arange(t_obs, dtype=np.float64)
    t_mean = t.mean()
    o_mean = obs.mean(axis=0)
    slope = ((t - t_mean)[:, None] * (obs - o_mean)).sum(axis=0) / ((t - t_mean) ** 2).sum()
    future_t = np.arange(t_obs, t_obs + t_pred, dtype=np.float64)
    return o_mean + (future_t - t_mean)[:, None] * slope


def kalman_path(obs: np.ndarray, t_pred: int, params: KalmanParams = KalmanParams()) -> np.ndarray:
    """Constant-velocity Kalman filter over the observations, then open-loop rollout.

    State is (x, y, vx, vy) with a one-frame step. Position starts at the
    first observation and velocity at the first observed step. Process noise
    is white acceleration with spectral density ``q``.
    """
    F = np.eye(4)
    F[0, 2] = F[1, 3] = 1.0
    H = np.zeros((2, 4))
    H[0, 0] = H[1, 1] = 1.0
    q_axis = params.q * np.array([[1 / 3, 1 / 2], [1 / 2, 1.0]])
    Q = np.zeros((4, 4))
    Q[np.ix_([0, 2], [0, 2])] = q_axis
    Q[np.ix_([1, 3], [1, 3])] = q_axis
    R = params.r * np.eye(2)

    x = np.concatenate([obs[0], obs[1] - obs[0] if len(obs) > 1 else np.zeros(2)])
    P = params.p0 * np.eye(4)
    for z in obs[1:]:
        x = F @ x
        P = F @ P @ F.T + Q
        S = H @ P @ H.T + R
        K = P @ H.T @ np.linalg.inv(S)
        x = x + K @ (z - H @ x)
        P = (np.eye(4) - K @ H) @ P
    out = np.empty((t_pred, 2))
    for i in range(t_pred):
        x = F @ x
        out[i] = x[:2]
    return out


def predict_stop(window: TrajectoryWindow, n: int) -> np.ndarray:
    return stop_path(window.obs(n), window.t_pred)


def predict_linear(window: TrajectoryWindow, n: int) -> np.ndarray:
    return linear_path(window.obs(n), window.t_pred)


def predict_kalman(window: TrajectoryWindow, n: int, params: KalmanParams = KalmanParams()) -> np.ndarray:
    return kalman_path(window.obs(n), window.t_pred, params)


BASELINES: dict[str, Callable[[TrajectoryWindow, int], np.ndarray]] = {
    "stop": predict_stop,
    "linear": predict_linear,
    "kalman": predict_kalman,
}


def run_baseline(windows: Iterable[TrajectoryWindow], which: str, kalman: KalmanParams | None = None) -> list[PredictionRecord]:
    if which not in BASELINES:
        raise ValueError(f"unknown baseline {which!r}; choose from {sorted(BASELINES)}")
    records = []
    for w in windows:
        for n in range(1, w.n_agents + 1):
            if which == "kalman" and kalman is not None:
                path = predict_kalman(w, n, kalman)
            else:
                path = BASELINES[which](w, n)
            records.append(PredictionRecord.for_window(w, n, 0, path))
    return records
