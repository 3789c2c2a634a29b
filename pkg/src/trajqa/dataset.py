"""Raw trajectory ingestion, scene windowing and leave-one-out splits.

Raw files hold one observation per line, whitespace separated:
``frame agent x y`` (``Columns.FRAME_AGENT_X_Y``) or ``frame agent y x``
(``Columns.FRAME_AGENT_Y_X``). Consecutive distinct frame ids are taken to
be one timestep (0.4 s) apart; no resampling is done.

Windows serialize to JSON Lines, one window per line::

    {"scene_id": "eth", "frame": 780, "coord_system": "world_meters",
     "t_obs": 8, "t_pred": 12, "caption": "", "agent_ids": [3, 7],
     "source": "biwi_eth", "agents": [[[x, y], ...20 points...], ...]}

Floats are written with ``repr`` precision, so reloading is bit-exact.
"""
from __future__ import annotations

import enum
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

T_OBS = 8
T_PRED = 12

ETH_UCY_SCENES = ("eth", "hotel", "univ", "zara1", "zara2")


class DatasetError(ValueError):
    """Base class for ingestion problems."""


class ParseError(DatasetError):
    def __init__(self, path, lineno: int, line: str, reason: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {reason}: {line.strip()!r}")


class IntegrityError(DatasetError):
    pass


class ConfigurationError(ValueError):
    pass


class Columns(str, enum.Enum):
    FRAME_AGENT_X_Y = "frame_agent_x_y"
    FRAME_AGENT_Y_X = "frame_agent_y_x"


class CoordSystem(str, enum.Enum):
    WORLD_METERS = "world_meters"
    PIXEL = "pixel"


@dataclass(frozen=True)
class RawRecord:
    frame_id: int
    agent_id: int
    x: float
    y: float


@dataclass
class TrajectoryWindow:
    """One scene sample: N agent tracks of ``t_obs + t_pred`` positions.

    ``agents`` has shape (N, t_obs + t_pred, 2). Agent ``n`` in prompts is
    ``agents[n - 1]``. ``frame`` is the anchor frame id; ``key`` combines it
    with the scene and source file into a unique window id.
    """

    scene_id: str
    agents: np.ndarray
    coord_system: CoordSystem = CoordSystem.WORLD_METERS
    t_obs: int = T_OBS
    t_pred: int = T_PRED
    frame: int = 0
    caption: str = ""
    agent_ids: list[int] = field(default_factory=list)
    source: str = ""

    def __post_init__(self):
        self.agents = np.asarray(self.agents, dtype=np.float64)
        self.coord_system = CoordSystem(self.coord_system)
        if self.agents.ndim != 3 or self.agents.shape[2] != 2:
            raise DatasetError(f"agents must have shape (N, T, 2), got {self.agents.shape}")
        if self.agents.shape[0] == 0:
            raise DatasetError("a window needs at least one agent")
        if self.agents.shape[1] != self.t_obs + self.t_pred:
            raise DatasetError(
                f"track length {self.agents.shape[1]} != t_obs + t_pred = {self.t_obs + self.t_pred}"
            )
        if not self.agent_ids:
            self.agent_ids = list(range(1, self.n_agents + 1))

    @property
    def key(self) -> str:
        if self.source:
            return f"{self.scene_id}:{self.source}:{self.frame}"
        return f"{self.scene_id}:{self.frame}"

    @property
    def n_agents(self) -> int:
        return self.agents.shape[0]

    def track(self, n: int) -> np.ndarray:
        """Full track of 1-based agent ``n``."""
        if not 1 <= n <= self.n_agents:
            raise IndexError(f"agent index {n} outside 1..{self.n_agents}")
        return self.agents[n - 1]

    def obs(self, n: int) -> np.ndarray:
        return self.track(n)[: self.t_obs]

    def future(self, n: int) -> np.ndarray:
        return self.track(n)[self.t_obs :]

    def with_agents(self, agents: np.ndarray, agent_ids: Sequence[int] | None = None) -> "TrajectoryWindow":
        return TrajectoryWindow(
            scene_id=self.scene_id,
            agents=agents,
            coord_system=self.coord_system,
            t_obs=self.t_obs,
            t_pred=self.t_pred,
            frame=self.frame,
            caption=self.caption,
            agent_ids=list(agent_ids) if agent_ids is not None else list(self.agent_ids),
            source=self.source,
        )

    def to_record(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "frame": int(self.frame),
            "coord_system": self.coord_system.value,
            "t_obs": self.t_obs,
            "t_pred": self.t_pred,
            "caption": self.caption,
            "agent_ids": [int(a) for a in self.agent_ids],
            "source": self.source,
            "agents": self.agents.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TrajectoryWindow":
        return cls(
            scene_id=rec["scene_id"],
            agents=np.asarray(rec["agents"], dtype=np.float64),
            coord_system=CoordSystem(rec.get("coord_system", "world_meters")),
            t_obs=int(rec.get("t_obs", T_OBS)),
            t_pred=int(rec.get("t_pred", T_PRED)),
            frame=int(rec.get("frame", 0)),
            caption=rec.get("caption", ""),
            agent_ids=list(rec.get("agent_ids", [])),
            source=rec.get("source", ""),
        )


@dataclass(frozen=True)
class SplitSpec:
    held_out_scene: str
    train_scenes: list[str]

    def __post_init__(self):
        if self.held_out_scene in self.train_scenes:
            raise ConfigurationError(f"held-out scene {self.held_out_scene!r} is also a training scene")


def _parse_number(tok: str, kind: type):
    if kind is int:
        # benchmark files store frame/agent ids as floats ("780.0")
        v = float(tok)
        if not math.isfinite(v) or v != int(v):
            raise ValueError(f"not an integer: {tok}")
        return int(v)
    v = float(tok)
    if not math.isfinite(v):
        raise ValueError(f"non-finite value: {tok}")
    return v


def load_raw(path, columns: Columns | str = Columns.FRAME_AGENT_X_Y) -> list[RawRecord]:
    """Parse one raw trajectory file into records sorted by (frame, agent)."""
    columns = Columns(columns)
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ParseError(path, lineno, line, f"expected 4 columns, got {len(parts)}")
            try:
                frame = _parse_number(parts[0], int)
                agent = _parse_number(parts[1], int)
                a = _parse_number(parts[2], float)
                b = _parse_number(parts[3], float)
            except ValueError as exc:
                raise ParseError(path, lineno, line, str(exc)) from None
            x, y = (a, b) if columns is Columns.FRAME_AGENT_X_Y else (b, a)
            if (frame, agent) in seen:
                raise IntegrityError(f"{path}:{lineno}: duplicate (frame, agent) = ({frame}, {agent})")
            seen.add((frame, agent))
            records.append(RawRecord(frame, agent, x, y))
    records.sort(key=lambda r: (r.frame_id, r.agent_id))
    return records


def build_windows(
    records: Sequence[RawRecord],
    t_obs: int = T_OBS,
    t_pred: int = T_PRED,
    stride: int = 1,
    scene_id: str = "scene",
    coord_system: CoordSystem | str = CoordSystem.WORLD_METERS,
    caption: str = "",
    source: str = "",
) -> list[TrajectoryWindow]:
    """Cut records into windows of ``t_obs + t_pred`` consecutive frames.

    Only agents present in every frame of a window are kept; windows left
    with no agents are dropped. Agents are ordered by agent id.
    """
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    seq_len = t_obs + t_pred
    frames = sorted({r.frame_id for r in records})
    frame_index = {f: i for i, f in enumerate(frames)}
    # positions[agent][frame_idx] = (x, y)
    positions: dict[int, dict[int, tuple[float, float]]] = defaultdict(dict)
    for r in records:
        positions[r.agent_id][frame_index[r.frame_id]] = (r.x, r.y)

    windows = []
    for start in range(0, len(frames) - seq_len + 1, stride):
        span = range(start, start + seq_len)
        tracks, ids = [], []
        for agent in sorted(positions):
            pts = positions[agent]
            if all(i in pts for i in span):
                tracks.append([pts[i] for i in span])
                ids.append(agent)
        if tracks:
            windows.append(
                TrajectoryWindow(
                    scene_id=scene_id,
                    agents=np.array(tracks, dtype=np.float64),
                    coord_system=CoordSystem(coord_system),
                    t_obs=t_obs,
                    t_pred=t_pred,
                    frame=frames[start],
                    caption=caption,
                    agent_ids=ids,
                    source=source,
                )
            )
    return windows


def leave_one_out(scenes: Sequence[str], held_out: str) -> SplitSpec:
    if held_out not in scenes:
        raise ConfigurationError(f"unknown held-out scene {held_out!r}; known: {list(scenes)}")
    train = [s for s in scenes if s != held_out]
    if not train:
        raise ConfigurationError("leave-one-out needs at least two scenes")
    return SplitSpec(held_out_scene=held_out, train_scenes=train)


def save_windows(windows: Iterable[TrajectoryWindow], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for w in windows:
            fh.write(json.dumps(w.to_record()) + "\n")


def load_windows(path) -> list[TrajectoryWindow]:
    with open(path, encoding="utf-8") as fh:
        return [TrajectoryWindow.from_record(json.loads(line)) for line in fh if line.strip()]


def load_captions(path) -> dict[str, str]:
    """Read a caption sidecar: ``scene_id<TAB>caption`` per line."""
    captions = {}
    if path is None or not Path(path).exists():
        return captions
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            scene, _, text = line.rstrip("\n").partition("\t")
            captions[scene] = text.strip()
    return captions


def scene_files(root, scene: str) -> list[Path]:
    """Raw files of one scene: every ``*.txt`` under ``root/scene``."""
    d = Path(root) / scene
    return sorted(p for p in d.rglob("*.txt") if p.is_file())


def load_scene(
    root,
    scene: str,
    stride: int = 1,
    columns: Columns | str = Columns.FRAME_AGENT_X_Y,
    coord_system: CoordSystem | str = CoordSystem.WORLD_METERS,
    caption: str = "",
    t_obs: int = T_OBS,
    t_pred: int = T_PRED,
) -> list[TrajectoryWindow]:
    """Windows of every raw file of ``scene``. Files are windowed separately."""
    files = scene_files(root, scene)
    if not files:
        raise DatasetError(f"no raw files for scene {scene!r} under {Path(root) / scene}")
    windows = []
    for f in files:
        windows.extend(
            build_windows(
                load_raw(f, columns),
                t_obs=t_obs,
                t_pred=t_pred,
                stride=stride,
                scene_id=scene,
                coord_system=coord_system,
                caption=caption,
                source=f.stem,
            )
        )
    return windows
