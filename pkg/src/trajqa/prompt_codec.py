"""Text rendering of trajectory windows as QA prompts, and parsing back.

Six templates are supported. Each bundle carries a context (optional scene
caption followed by one observation sentence per agent), a question and,
for training, an answer::

    context : "{caption} Pedestrian 1 moved along the trajectory [(x, y), ...] for 8 frames. ..."
    forecast: "What trajectory does pedestrian {n} follow for the next {T_pred} frames?"
              "Pedestrian {n} will move along the trajectory [...] for the next {T_pred} frames."
    dest    : "At which coordinates does pedestrian {n} arrive after the next {T_pred} frames?"
              "Pedestrian {n} will arrive at coordinate ({x}, {y}) after the next {T_pred} frames."
    dir     : "In which direction will pedestrian {n} move in the future?"
              "Pedestrian {n} will {move forward|move backward|move left|move right|stop}."
    mimic   : "Which pedestrian seems to walk similarly to pedestrian {n}?"
              "Pedestrian {n} walks similarly to pedestrian {k}." | "Pedestrian {n} will walk alone."
    group   : "With which pedestrians does pedestrian {n} form a group?"
              "Pedestrian {n} forms a group with pedestrian {k}." | "Pedestrian {n} will walk alone."
    col     : "With which pedestrian does pedestrian {n} have a collision risk?"
              "Pedestrian {n} has a collision risk with pedestrian {k}." | "Pedestrian {n} has no collision risk."

Bundles serialize to JSON Lines with keys task, scene_id, frame, source,
agent, context, question, answer.
"""
from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable

import numpy as np

from trajqa.dataset import CoordSystem, TrajectoryWindow


class CodecError(ValueError):
    pass


class AnswerFormatError(CodecError):
    """Model output does not match the expected answer schema."""


class Task(str, enum.Enum):
    FORECAST = "forecast"
    DEST = "dest"
    DIR = "dir"
    MIMIC = "mimic"
    GROUP = "group"
    COL = "col"


class Direction(str, enum.Enum):
    FORWARD = "forward"
    BACKWARD = "backward"
    LEFT = "left"
    RIGHT = "right"
    STOP = "stop"


ALL_TASKS = tuple(Task)
PARTNER_TASKS = (Task.MIMIC, Task.GROUP, Task.COL)


class CoordFormat(str, enum.Enum):
    TWO_DECIMALS = "two_decimals"
    INTEGER = "integer"

    @classmethod
    def for_system(cls, coord_system: CoordSystem | str) -> "CoordFormat":
        if CoordSystem(coord_system) is CoordSystem.PIXEL:
            return cls.INTEGER
        return cls.TWO_DECIMALS


_QUANTUM = {CoordFormat.TWO_DECIMALS: Decimal("0.01"), CoordFormat.INTEGER: Decimal("1")}


def format_number(v: float, fmt: CoordFormat) -> str:
    """Half-up rounding of the shortest decimal repr of ``v``."""
    if not math.isfinite(v):
        raise CodecError(f"cannot render non-finite coordinate {v!r}")
    q = Decimal(repr(float(v))).quantize(_QUANTUM[fmt], rounding=ROUND_HALF_UP)
    if q.is_zero():
        q = abs(q)
    return str(q)


def round_value(v: float, fmt: CoordFormat) -> float:
    return float(format_number(v, fmt))


def round_path(path, fmt: CoordFormat) -> np.ndarray:
    arr = np.asarray(path, dtype=np.float64)
    return np.array([[round_value(x, fmt), round_value(y, fmt)] for x, y in arr.reshape(-1, 2)]).reshape(arr.shape)


def format_point(p, fmt: CoordFormat) -> str:
    return f"({format_number(p[0], fmt)}, {format_number(p[1], fmt)})"


def serialize_trajectory(track, fmt: CoordFormat) -> str:
    track = np.asarray(track, dtype=np.float64)
    if track.size == 0:
        raise CodecError("cannot serialize an empty track")
    return "[" + ", ".join(format_point(p, fmt) for p in track.reshape(-1, 2)) + "]"


def window_format(window: TrajectoryWindow) -> CoordFormat:
    return CoordFormat.for_system(window.coord_system)


def render_observation(window: TrajectoryWindow, n: int, fmt: CoordFormat | None = None) -> str:
    fmt = fmt or window_format(window)
    traj = serialize_trajectory(window.obs(n), fmt)
    return f"Pedestrian {n} moved along the trajectory {traj} for {window.t_obs} frames."


def render_context(window: TrajectoryWindow, fmt: CoordFormat | None = None, caption: bool = True) -> str:
    parts = []
    if caption and window.caption:
        parts.append(window.caption)
    parts.extend(render_observation(window, n, fmt) for n in range(1, window.n_agents + 1))
    return " ".join(parts)


def render_question(task: Task | str, n: int, t_pred: int) -> str:
    task = Task(task)
    if task is Task.FORECAST:
        return f"What trajectory does pedestrian {n} follow for the next {t_pred} frames?"
    if task is Task.DEST:
        return f"At which coordinates does pedestrian {n} arrive after the next {t_pred} frames?"
    if task is Task.DIR:
        return f"In which direction will pedestrian {n} move in the future?"
    if task is Task.MIMIC:
        return f"Which pedestrian seems to walk similarly to pedestrian {n}?"
    if task is Task.GROUP:
        return f"With which pedestrians does pedestrian {n} form a group?"
    return f"With which pedestrian does pedestrian {n} have a collision risk?"


def render_answer(task: Task | str, n: int, label, t_pred: int, fmt: CoordFormat) -> str:
    """Answer sentence for ``label``.

    ``label`` is the future path (forecast), a point (dest), a ``Direction``
    (dir) or a partner index / ``None`` (mimic, group, col).
    """
    task = Task(task)
    if task is Task.FORECAST:
        traj = serialize_trajectory(label, fmt)
        return f"Pedestrian {n} will move along the trajectory {traj} for the next {t_pred} frames."
    if task is Task.DEST:
        return f"Pedestrian {n} will arrive at coordinate {format_point(np.asarray(label, float), fmt)} after the next {t_pred} frames."
    if task is Task.DIR:
        d = Direction(label)
        verb = "stop" if d is Direction.STOP else f"move {d.value}"
        return f"Pedestrian {n} will {verb}."
    if label is not None and int(label) == n:
        raise CodecError(f"partner of pedestrian {n} cannot be itself")
    if task is Task.MIMIC:
        return f"Pedestrian {n} walks similarly to pedestrian {label}." if label is not None else f"Pedestrian {n} will walk alone."
    if task is Task.GROUP:
        return f"Pedestrian {n} forms a group with pedestrian {label}." if label is not None else f"Pedestrian {n} will walk alone."
    return f"Pedestrian {n} has a collision risk with pedestrian {label}." if label is not None else f"Pedestrian {n} has no collision risk."


_NO_LABEL = object()


@dataclass
class PromptBundle:
    task: Task
    target_agent: int
    context: str
    question: str
    answer: str | None = None
    scene_id: str = ""
    frame: int = 0
    source: str = ""

    @property
    def source_text(self) -> str:
        """Model input: context followed by question."""
        return f"{self.context} {self.question}" if self.context else self.question

    @property
    def window_key(self) -> str:
        if self.source:
            return f"{self.scene_id}:{self.source}:{self.frame}"
        return f"{self.scene_id}:{self.frame}"

    def to_record(self) -> dict:
        return {
            "task": Task(self.task).value,
            "scene_id": self.scene_id,
            "frame": self.frame,
            "source": self.source,
            "agent": self.target_agent,
            "context": self.context,
            "question": self.question,
            "answer": self.answer,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PromptBundle":
        return cls(
            task=Task(rec["task"]),
            target_agent=int(rec["agent"]),
            context=rec["context"],
            question=rec["question"],
            answer=rec.get("answer"),
            scene_id=rec.get("scene_id", ""),
            frame=int(rec.get("frame", 0)),
            source=rec.get("source", ""),
        )


def render_bundle(
    window: TrajectoryWindow,
    task: Task | str,
    n: int,
    label=_NO_LABEL,
    *,
    training: bool = True,
    fmt: CoordFormat | None = None,
    caption: bool = True,
) -> PromptBundle:
    """Build the bundle for ``task`` about agent ``n``.

    For forecast the label defaults to the window's ground-truth future.
    Other tasks need an explicit label when ``training`` is set.
    """
    task = Task(task)
    fmt = fmt or window_format(window)
    window.track(n)  # range check
    answer = None
    if training:
        if label is _NO_LABEL:
            if task is not Task.FORECAST:
                raise CodecError(f"training bundle for task {task.value!r} needs a label")
            label = window.future(n)
        answer = render_answer(task, n, label, window.t_pred, fmt)
    return PromptBundle(
        task=task,
        target_agent=n,
        context=render_context(window, fmt, caption=caption),
        question=render_question(task, n, window.t_pred),
        answer=answer,
        scene_id=window.scene_id,
        frame=window.frame,
        source=window.source,
    )


def nearest_subwindow(window: TrajectoryWindow, n: int, max_agents: int) -> tuple[TrajectoryWindow, int]:
    """Keep the ``max_agents`` agents closest to ``n`` at the last observed frame.

    Agents keep their relative order and are renumbered 1..M; returns the new
    window and the new index of the target.
    """
    if window.n_agents <= max_agents:
        return window, n
    last = window.agents[:, window.t_obs - 1]
    d = np.linalg.norm(last - last[n - 1], axis=1)
    d[n - 1] = -1.0
    keep = np.sort(np.argsort(d, kind="stable")[:max_agents])
    ids = [window.agent_ids[i] for i in keep]
    new_n = int(np.flatnonzero(keep == n - 1)[0]) + 1
    return window.with_agents(window.agents[keep], ids), new_n


# ---------------------------------------------------------------- parsing

_NUM = r"-?\d+(?:\.\d+)?"
_POINT_RE = re.compile(rf"\(\s*({_NUM})\s*,\s*({_NUM})\s*\)")
_LIST_RE = re.compile(rf"\[\s*(?:\(\s*{_NUM}\s*,\s*{_NUM}\s*\)\s*,\s*)*\(\s*{_NUM}\s*,\s*{_NUM}\s*\)\s*\]")
_FORECAST_RE = re.compile(
    r"^Pedestrian (\d+) will move along the trajectory (\[.*\]) for the next (\d+) frames\.$"
)
_DEST_RE = re.compile(rf"will arrive at coordinate \(\s*({_NUM})\s*,\s*({_NUM})\s*\)")


def _check_number(tok: str, fmt: CoordFormat | None, strict: bool) -> float:
    if strict and fmt is not None:
        ok = re.fullmatch(r"-?\d+\.\d{2}" if fmt is CoordFormat.TWO_DECIMALS else r"-?\d+", tok)
        if not ok:
            raise AnswerFormatError(f"number {tok!r} does not match {fmt.value} rendering")
    return float(tok)


def parse_answer_trajectory(
    text: str, t_expected: int, fmt: CoordFormat | None = None, strict: bool = False
) -> np.ndarray:
    """Extract a (t_expected, 2) path from an answer.

    Lenient mode accepts the first well-formed bracketed point list anywhere
    in the text. Strict mode requires the exact forecast answer sentence.
    """
    if strict:
        m = _FORECAST_RE.match(text.strip())
        if m is None:
            raise AnswerFormatError("answer does not follow the forecast sentence schema")
        span = m.group(2)
        if not _LIST_RE.fullmatch(span):
            raise AnswerFormatError("malformed trajectory list")
        if int(m.group(3)) != t_expected:
            raise AnswerFormatError(f"answer states {m.group(3)} frames, expected {t_expected}")
    else:
        m = _LIST_RE.search(text)
        if m is None:
            raise AnswerFormatError("no bracketed trajectory found")
        span = m.group(0)
    pts = [(_check_number(a, fmt, strict), _check_number(b, fmt, strict)) for a, b in _POINT_RE.findall(span)]
    if len(pts) != t_expected:
        raise AnswerFormatError(f"expected {t_expected} points, found {len(pts)}")
    return np.array(pts, dtype=np.float64)


def parse_answer_destination(text: str) -> np.ndarray:
    m = _DEST_RE.search(text)
    if m is None:
        raise AnswerFormatError("no destination coordinate found")
    return np.array([float(m.group(1)), float(m.group(2))])


_DIR_RE = re.compile(r"will (move forward|move backward|move left|move right|stop)\b")
_PARTNER_RE = {
    Task.MIMIC: (re.compile(r"walks similarly to pedestrian (\d+)"), re.compile(r"will walk alone")),
    Task.GROUP: (re.compile(r"forms a group with pedestrian (\d+)"), re.compile(r"will walk alone")),
    Task.COL: (re.compile(r"has a collision risk with pedestrian (\d+)"), re.compile(r"has no collision risk")),
}


def parse_answer_categorical(text: str, task: Task | str):
    """Label of a dir/mimic/group/col answer: a ``Direction`` or partner index / None."""
    task = Task(task)
    if task is Task.DIR:
        m = _DIR_RE.search(text)
        if m is None:
            raise AnswerFormatError("no direction phrase found")
        return Direction(m.group(1).removeprefix("move "))
    if task not in _PARTNER_RE:
        raise CodecError(f"task {task.value!r} has no categorical answer")
    yes, no = _PARTNER_RE[task]
    m = yes.search(text)
    if m is not None:
        return int(m.group(1))
    if no.search(text):
        return None
    raise AnswerFormatError(f"no {task.value} label phrase found")


def save_bundles(bundles: Iterable[PromptBundle], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for b in bundles:
            fh.write(json.dumps(b.to_record()) + "\n")


def load_bundles(path) -> list[PromptBundle]:
    with open(path, encoding="utf-8") as fh:
        return [PromptBundle.from_record(json.loads(line)) for line in fh if line.strip()]
