"""Pseudo-labels for the five auxiliary QA tasks.

All rules read ground-truth tracks of one window:

- destination: the last future position, rounded to the coordinate format.
- direction: mean per-frame future displacement, measured from the last
  observed point and expressed in the agent's heading frame (heading =
  total observed displacement). Slow agents or a degenerate heading give
  ``stop``.
- mimic: partner with the smallest mean distance between mean-centred
  observed tracks, if within ``mimic_tol``.
- group: nearest partner whose mean observed distance is within
  ``group_dist_max`` and whose mean observed velocity has cosine similarity
  of at least ``group_cos_min`` with the target's.
- collision: partner with the smallest future closest-approach distance, if
  within ``collision_dist``.

Distance thresholds are in meters; ``meters_per_unit`` converts them for
pixel windows.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from trajqa.dataset import TrajectoryWindow
from trajqa.prompt_codec import (
    ALL_TASKS,
    CoordFormat,
    Direction,
    PromptBundle,
    Task,
    nearest_subwindow,
    render_bundle,
    round_path,
    window_format,
)


@dataclass(frozen=True)
class AuxThresholds:
    stop_eps: float = 0.01
    mimic_tol: float = 0.5
    group_dist_max: float = 1.5
    group_cos_min: float = 0.9
    collision_dist: float = 0.5
    meters_per_unit: float = 1.0

    def scaled(self, name: str) -> float:
        return getattr(self, name) / self.meters_per_unit


@dataclass(frozen=True)
class AuxLabel:
    task: Task
    target_agent: int
    value: object

    def __post_init__(self):
        if Task(self.task) in (Task.MIMIC, Task.GROUP, Task.COL) and self.value == self.target_agent:
            raise ValueError("partner index must differ from the target agent")


DEFAULT_THRESHOLDS = AuxThresholds()


def label_destination(window: TrajectoryWindow, n: int, fmt: CoordFormat | None = None) -> np.ndarray:
    return round_path(window.track(n)[-1], fmt or window_format(window))


def _mean_speed(track: np.ndarray) -> float:
    return float(np.linalg.norm(track[-1] - track[0]) / (len(track) - 1))


def label_direction(window: TrajectoryWindow, n: int, th: AuxThresholds = DEFAULT_THRESHOLDS) -> Direction:
    obs = window.obs(n)
    eps = th.scaled("stop_eps")
    if _mean_speed(obs) < eps:
        return Direction.STOP
    disp = (window.track(n)[-1] - obs[-1]) / window.t_pred
    if np.linalg.norm(disp) < eps:
        return Direction.STOP
    h = obs[-1] - obs[0]
    h = h / np.linalg.norm(h)
    along = disp[0] * h[0] + disp[1] * h[1]
    across = h[0] * disp[1] - h[1] * disp[0]  # positive: counter-clockwise of heading
    if abs(along) >= abs(across):
        return Direction.FORWARD if along >= 0 else Direction.BACKWARD
    return Direction.LEFT if across > 0 else Direction.RIGHT


def _argmin_partner(scores: dict[int, float], limit: float):
    if not scores:
        return None
    k = min(scores, key=lambda a: (scores[a], a))
    return k if scores[k] <= limit else None


def label_mimic(window: TrajectoryWindow, n: int, th: AuxThresholds = DEFAULT_THRESHOLDS):
    obs = window.agents[:, : window.t_obs]
    centred = obs - obs.mean(axis=1, keepdims=True)
    scores = {
        k: float(np.linalg.norm(centred[n - 1] - centred[k - 1], axis=1).mean())
        for k in range(1, window.n_agents + 1)
        if k != n
    }
    return _argmin_partner(scores, th.scaled("mimic_tol"))


def _mean_velocity(track: np.ndarray) -> np.ndarray:
    return (track[-1] - track[0]) / (len(track) - 1)


def label_group(window: TrajectoryWindow, n: int, th: AuxThresholds = DEFAULT_THRESHOLDS):
    obs = window.agents[:, : window.t_obs]
    eps = th.scaled("stop_eps")
    v_n = _mean_velocity(obs[n - 1])
    if np.linalg.norm(v_n) < eps:
        return None
    scores = {}
    for k in range(1, window.n_agents + 1):
        if k == n:
            continue
        v_k = _mean_velocity(obs[k - 1])
        if np.linalg.norm(v_k) < eps:
            continue
        cos = float(v_n @ v_k / (np.linalg.norm(v_n) * np.linalg.norm(v_k)))
        if cos < th.group_cos_min:
            continue
        scores[k] = float(np.linalg.norm(obs[n - 1] - obs[k - 1], axis=1).mean())
    return _argmin_partner(scores, th.scaled("group_dist_max"))


def label_collision(window: TrajectoryWindow, n: int, th: AuxThresholds = DEFAULT_THRESHOLDS):
    fut = window.agents[:, window.t_obs :]
    scores = {
        k: float(np.linalg.norm(fut[n - 1] - fut[k - 1], axis=1).min())
        for k in range(1, window.n_agents + 1)
        if k != n
    }
    return _argmin_partner(scores, th.scaled("collision_dist"))


def label_for(window: TrajectoryWindow, task: Task | str, n: int, th: AuxThresholds = DEFAULT_THRESHOLDS):
    """Training label of any task, forecast included (ground-truth future)."""
    task = Task(task)
    if task is Task.FORECAST:
        return window.future(n)
    if task is Task.DEST:
        return label_destination(window, n)
    if task is Task.DIR:
        return label_direction(window, n, th)
    if task is Task.MIMIC:
        return label_mimic(window, n, th)
    if task is Task.GROUP:
        return label_group(window, n, th)
    return label_collision(window, n, th)


def aux_labels(window: TrajectoryWindow, n: int, th: AuxThresholds = DEFAULT_THRESHOLDS) -> list[AuxLabel]:
    return [AuxLabel(t, n, label_for(window, t, n, th)) for t in (Task.DEST, Task.DIR, Task.MIMIC, Task.GROUP, Task.COL)]


def window_bundles(
    window: TrajectoryWindow,
    tasks=ALL_TASKS,
    th: AuxThresholds = DEFAULT_THRESHOLDS,
    max_agents: int | None = None,
    caption: bool = True,
) -> list[PromptBundle]:
    """Labelled training bundles for every agent of ``window`` and every task.

    With ``max_agents`` set, each bundle's context keeps only the agents
    nearest the target (see ``nearest_subwindow``); labels are computed on
    that reduced window so partner indices stay valid.
    """
    out = []
    for n in range(1, window.n_agents + 1):
        w, m = (window, n) if max_agents is None else nearest_subwindow(window, n, max_agents)
        for task in tasks:
            out.append(render_bundle(w, task, m, label_for(w, task, m, th), caption=caption))
    return out
