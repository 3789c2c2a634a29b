"""Displacement metrics, best-of-K selection and benchmark aggregation.

Prediction dumps are JSON Lines, one predicted path per line::

    {"scene_id": "eth", "source": "biwi_eth", "frame": 780, "agent": 2,
     "sample": 0, "path": [[x, y], ...], "fallback": false}

``agent`` is the 1-based index inside the window. Deterministic predictors
write ``sample`` 0 only; K-sample predictors write samples 0..K-1.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from trajqa.dataset import TrajectoryWindow


class IncompleteEvaluationError(ValueError):
    def __init__(self, missing: Sequence[tuple[str, int]]):
        self.missing = list(missing)
        shown = ", ".join(f"{k}#{a}" for k, a in self.missing[:10])
        more = f" (+{len(self.missing) - 10} more)" if len(self.missing) > 10 else ""
        super().__init__(f"{len(self.missing)} ground-truth agent windows have no prediction: {shown}{more}")


def ade(pred, gt) -> float:
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def fde(pred, gt) -> float:
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred[-1] - gt[-1]))


def best_of_k(preds, gt, mode: str = "joint") -> tuple[float, float]:
    """(minADE, minFDE) over K candidate paths.

    ``joint`` reports ADE and FDE of the single ADE-best candidate (first
    one on ties); ``independent`` minimises each metric separately.
    """
    preds = np.asarray(preds, float)
    gt = np.asarray(gt, float)
    if preds.ndim == 2:
        preds = preds[None]
    if len(preds) == 0:
        raise ValueError("best_of_k needs at least one candidate")
    dist = np.linalg.norm(preds - gt[None], axis=-1)
    ades = dist.mean(axis=1)
    fdes = dist[:, -1]
    if mode == "joint":
        i = int(np.argmin(ades))
        return float(ades[i]), float(fdes[i])
    if mode == "independent":
        return float(ades.min()), float(fdes.min())
    raise ValueError(f"unknown best-of-K mode {mode!r}")


@dataclass
class PredictionRecord:
    scene_id: str
    frame: int
    agent: int
    sample: int
    path: np.ndarray
    fallback: bool = False
    source: str = ""

    @property
    def key(self) -> str:
        if self.source:
            return f"{self.scene_id}:{self.source}:{self.frame}"
        return f"{self.scene_id}:{self.frame}"

    @classmethod
    def for_window(cls, window: TrajectoryWindow, agent: int, sample: int, path, fallback: bool = False):
        return cls(window.scene_id, window.frame, agent, sample, np.asarray(path, float), fallback, window.source)

    def to_record(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "source": self.source,
            "frame": int(self.frame),
            "agent": int(self.agent),
            "sample": int(self.sample),
            "path": np.asarray(self.path, float).tolist(),
            "fallback": bool(self.fallback),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PredictionRecord":
        return cls(
            scene_id=rec["scene_id"],
            frame=int(rec["frame"]),
            agent=int(rec["agent"]),
            sample=int(rec.get("sample", 0)),
            path=np.asarray(rec["path"], float),
            fallback=bool(rec.get("fallback", False)),
            source=rec.get("source", ""),
        )


def write_dump(records: Iterable[PredictionRecord], path, append: bool = False) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_record()) + "\n")


def read_dump(path) -> list[PredictionRecord]:
    with open(path, encoding="utf-8") as fh:
        return [PredictionRecord.from_record(json.loads(line)) for line in fh if line.strip()]


@dataclass
class SceneMetrics:
    ade: float
    fde: float
    n: int


@dataclass
class MetricsReport:
    scenes: dict[str, SceneMetrics]
    k_used: int
    mode: str
    fallback_rate: float
    missing: int = 0
    tokenizer_stats: dict | None = None
    config_fingerprint: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def avg_ade(self) -> float:
        return float(np.mean([s.ade for s in self.scenes.values()])) if self.scenes else float("nan")

    @property
    def avg_fde(self) -> float:
        return float(np.mean([s.fde for s in self.scenes.values()])) if self.scenes else float("nan")

    def to_dict(self) -> dict:
        return {
            "scenes": {k: {"ade": v.ade, "fde": v.fde, "n": v.n} for k, v in self.scenes.items()},
            "avg": {"ade": self.avg_ade, "fde": self.avg_fde},
            "k_used": self.k_used,
            "mode": self.mode,
            "fallback_rate": self.fallback_rate,
            "missing": self.missing,
            "tokenizer_stats": self.tokenizer_stats,
            "config_fingerprint": self.config_fingerprint,
            **({"extra": self.extra} if self.extra else {}),
        }

    def table(self, title: str = "") -> str:
        lines = [f"{title or 'Scene':<8} {'ADE / FDE':>15}   n"]
        for name, m in self.scenes.items():
            lines.append(f"{name.upper():<8} {m.ade:>6.2f} / {m.fde:<6.2f} {m.n:>5d}")
        lines.append(f"{'AVG':<8} {self.avg_ade:>6.2f} / {self.avg_fde:<6.2f}")
        lines.append(f"(K={self.k_used}, {self.mode}, fallback rate {self.fallback_rate:.3f}, missing {self.missing})")
        return "\n".join(lines)


def evaluate(
    predictions: Iterable[PredictionRecord],
    windows: Iterable[TrajectoryWindow],
    k: int = 1,
    mode: str = "joint",
    allow_missing: bool = False,
) -> MetricsReport:
    """Aggregate per (window, agent), then per scene, then unweighted over scenes.

    Samples with index >= k are ignored. Every agent of every window needs
    at least one prediction unless ``allow_missing`` is set, in which case
    gaps are counted in ``missing`` and left out of the averages.
    """
    by_key: dict[tuple[str, int], list[PredictionRecord]] = defaultdict(list)
    for r in predictions:
        if r.sample < k:
            by_key[(r.key, r.agent)].append(r)

    per_scene: dict[str, list[tuple[float, float]]] = defaultdict(list)
    missing = []
    n_pred = n_fallback = 0
    k_used = k
    for w in windows:
        for n in range(1, w.n_agents + 1):
            recs = by_key.get((w.key, n))
            if not recs:
                missing.append((w.key, n))
                continue
            recs = sorted(recs, key=lambda r: r.sample)
            k_used = min(k_used, len(recs))
            n_pred += len(recs)
            n_fallback += sum(r.fallback for r in recs)
            per_scene[w.scene_id].append(best_of_k([r.path for r in recs], w.future(n), mode))
    if missing and not allow_missing:
        raise IncompleteEvaluationError(missing)
    scenes = {
        s: SceneMetrics(float(np.mean([a for a, _ in v])), float(np.mean([f for _, f in v])), len(v))
        for s, v in per_scene.items()
    }
    return MetricsReport(
        scenes=scenes,
        k_used=k_used,
        mode=mode,
        fallback_rate=n_fallback / n_pred if n_pred else 0.0,
        missing=len(missing),
    )
