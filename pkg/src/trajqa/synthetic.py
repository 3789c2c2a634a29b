"""Synthetic pedestrian scenes in the raw benchmark layout.

Used by the tests and smoke runs when the ETH/UCY files are not available.
Agents walk at pedestrian speeds with slowly drifting headings and some
walk side by side in pairs; a fraction stand still. Frame ids advance by 10
per 0.4 s step as in the benchmark files.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from trajqa.dataset import RawRecord


@dataclass(frozen=True)
class SceneParams:
    n_frames: int = 200
    spawn_rate: float = 0.35
    speed_mean: float = 0.5
    speed_std: float = 0.12
    turn_std: float = 0.04
    noise_std: float = 0.02
    extent: float = 15.0
    pair_prob: float = 0.3
    still_prob: float = 0.08
    min_life: int = 20
    max_life: int = 60
    frame_step: int = 10


def simulate_scene(seed: int, params: SceneParams = SceneParams()) -> list[RawRecord]:
    rng = np.random.default_rng(seed)
    records = []
    next_id = 1
    for t0 in range(params.n_frames):
        for _ in range(rng.poisson(params.spawn_rate)):
            life = int(rng.integers(params.min_life, params.max_life + 1))
            start = rng.uniform(0, params.extent, size=2)
            heading = rng.uniform(0, 2 * np.pi)
            speed = 0.0 if rng.random() < params.still_prob else max(0.1, rng.normal(params.speed_mean, params.speed_std))
            members = [np.zeros(2)]
            if rng.random() < params.pair_prob:
                side = np.array([-np.sin(heading), np.cos(heading)]) * rng.uniform(0.5, 1.0)
                members.append(side)
            turn = np.cumsum(rng.normal(0, params.turn_std, size=life))
            pos = start.copy()
            path = []
            for step in range(life):
                h = heading + turn[step]
                pos = pos + speed * np.array([np.cos(h), np.sin(h)])
                path.append(pos.copy())
            path = np.array(path)
            for offset in members:
                noisy = path + offset + rng.normal(0, params.noise_std, size=path.shape)
                for step in range(life):
                    t = t0 + step
                    if t >= params.n_frames:
                        break
                    records.append(
                        RawRecord(t * params.frame_step, next_id, round(float(noisy[step, 0]), 2), round(float(noisy[step, 1]), 2))
                    )
                next_id += 1
    records.sort(key=lambda r: (r.frame_id, r.agent_id))
    return records


def write_raw(records, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(f"{r.frame_id}\t{r.agent_id}\t{r.x:.2f}\t{r.y:.2f}\n")


def write_benchmark(root, scenes=("eth", "hotel", "univ", "zara1", "zara2"), seed: int = 0, params: SceneParams = SceneParams()) -> Path:
    """Write one synthetic raw file per scene under ``root/<scene>/``."""
    root = Path(root)
    for i, scene in enumerate(scenes):
        write_raw(simulate_scene(seed * 1000 + i, params), root / scene / f"{scene}_synthetic.txt")
    return root


def constant_velocity_window_tracks(n_agents: int, velocity, start=None, t_total: int = 20) -> np.ndarray:
    """Straight-line tracks, (n_agents, t_total, 2), all with ``velocity`` per frame."""
    v = np.asarray(velocity, dtype=float)
    starts = np.zeros((n_agents, 2)) if start is None else np.asarray(start, dtype=float)
    steps = np.arange(t_total)[None, :, None]
    return starts[:, None, :] + steps * v[None, None, :]
