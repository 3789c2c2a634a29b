"""Zero-shot forecasting through an external chat-completion service.

Requests use the common chat wire format::

    POST {endpoint}
    {"model": ..., "messages": [{"role": "user", "content": prompt}], "temperature": ...}
    -> {"choices": [{"message": {"content": answer}}]}

Responses are cached under ``cache_dir/<sha256>.json``; the key covers the
endpoint, model, temperature, prompt, sample index and attempt number, so a
rerun replays the same conversation without touching the network.
"""
from __future__ import annotations

import hashlib
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol

import numpy as np

from trajqa.dataset import TrajectoryWindow
from trajqa.evaluation import PredictionRecord, read_dump
from trajqa.prompt_codec import AnswerFormatError, Task, parse_answer_trajectory, render_bundle

log = logging.getLogger(__name__)

DEFAULT_PREAMBLE = (
    "You forecast pedestrian motion. Coordinates are listed once per frame. "
    "Reply with exactly one sentence of the form "
    "\"Pedestrian {n} will move along the trajectory [(x1, y1), (x2, y2), ...] for the next {t_pred} frames.\" "
    "The list must contain exactly {t_pred} points written with the same number format as the input."
)


class TransportError(RuntimeError):
    """A request failed before producing an answer (timeout, HTTP error, bad payload)."""


class Transport(Protocol):
    def __call__(self, request: dict, timeout: float) -> str: ...


@dataclass
class ZeroShotConfig:
    endpoint: str = "http://localhost:8000/v1/chat/completions"
    model: str = "gpt-4"
    max_concurrency: int = 8
    retry_budget: int = 3
    timeout: float = 60.0
    preamble: str = DEFAULT_PREAMBLE
    caption: bool = False
    k: int = 1
    temperature: float = 0.0
    api_key_env: str = "OPENAI_API_KEY"
    cache_dir: str | None = None

    def __post_init__(self):
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if self.retry_budget < 0:
            raise ValueError("retry_budget must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ZeroShotConfig":
        return cls(**d)


def build_zero_shot_prompt(window: TrajectoryWindow, n: int, cfg: ZeroShotConfig = ZeroShotConfig()) -> str:
    bundle = render_bundle(window, Task.FORECAST, n, training=False, caption=cfg.caption)
    preamble = cfg.preamble.format(n=n, t_pred=window.t_pred, t_obs=window.t_obs)
    return f"{preamble}\n\n{bundle.source_text}"


def build_request(cfg: ZeroShotConfig, prompt: str) -> dict:
    return {
        "model": cfg.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": cfg.temperature,
    }


class HttpTransport:
    """Chat-completion transport over httpx; one shared connection pool."""

    def __init__(self, endpoint: str, api_key: str | None = None):
        import httpx

        self._httpx = httpx
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.endpoint = endpoint
        self.client = httpx.Client(headers=headers)

    def __call__(self, request: dict, timeout: float) -> str:
        httpx = self._httpx
        try:
            resp = self.client.post(self.endpoint, json=request, timeout=timeout)
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except httpx.TimeoutException as exc:
            raise TransportError(f"timeout after {timeout}s") from exc
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise TransportError(f"unexpected response payload: {exc}") from exc

    def close(self) -> None:
        self.client.close()


class ResponseCache:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(request: dict, endpoint: str, sample: int, attempt: int) -> str:
        blob = json.dumps({"endpoint": endpoint, "request": request, "sample": sample, "attempt": attempt}, sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def get(self, key: str) -> str | None:
        p = self.root / f"{key}.json"
        if not p.exists():
            return None
        return json.loads(p.read_text(encoding="utf-8"))["content"]

    def put(self, key: str, content: str) -> None:
        tmp = self.root / f"{key}.json.{threading.get_ident()}.tmp"
        tmp.write_text(json.dumps({"content": content}), encoding="utf-8")
        tmp.replace(self.root / f"{key}.json")


@dataclass
class ZeroShotResult:
    path: np.ndarray
    attempts: int
    raw: str


@dataclass
class FailureRecord:
    attempts: int
    last_raw: str | None
    errors: list[str] = field(default_factory=list)
    window_key: str = ""
    agent: int = 0
    sample: int = 0

    def to_record(self) -> dict:
        return asdict(self)


def request_with_retry(
    cfg: ZeroShotConfig,
    prompt: str,
    t_expected: int,
    transport: Transport,
    cache: ResponseCache | None = None,
    sample: int = 0,
) -> ZeroShotResult | FailureRecord:
    """Ask until an answer parses; at most ``1 + cfg.retry_budget`` attempts."""
    request = build_request(cfg, prompt)
    errors: list[str] = []
    last_raw = None
    for attempt in range(cfg.retry_budget + 1):
        key = ResponseCache.key(request, cfg.endpoint, sample, attempt) if cache else None
        raw = cache.get(key) if cache else None
        if raw is None:
            try:
                raw = transport(request, cfg.timeout)
            except TransportError as exc:
                errors.append(f"attempt {attempt + 1}: {exc}")
                continue
            if cache:
                cache.put(key, raw)
        last_raw = raw
        try:
            return ZeroShotResult(parse_answer_trajectory(raw, t_expected), attempt + 1, raw)
        except AnswerFormatError as exc:
            errors.append(f"attempt {attempt + 1}: {exc}")
    return FailureRecord(cfg.retry_budget + 1, last_raw, errors)


@dataclass
class BenchmarkResult:
    records: list[PredictionRecord]
    failures: list[FailureRecord]
    skipped: int

    @property
    def failure_rate(self) -> float:
        total = len(self.records) + len(self.failures)
        return len(self.failures) / total if total else 0.0


def run_benchmark(
    cfg: ZeroShotConfig,
    windows: Iterable[TrajectoryWindow],
    transport: Transport,
    out_path,
    failure_log=None,
) -> BenchmarkResult:
    """Query every (window, agent, sample) not already in ``out_path``.

    At most ``cfg.max_concurrency`` requests are in flight. Results are
    appended by the calling thread in job order, so the dump is
    deterministic given the responses. Failures go to ``failure_log``
    (JSON Lines) and never into the dump.
    """
    out_path = Path(out_path)
    done = set()
    if out_path.exists():
        done = {(r.key, r.agent, r.sample) for r in read_dump(out_path)}
    cache = ResponseCache(cfg.cache_dir) if cfg.cache_dir else None

    jobs = []
    skipped = 0
    for w in windows:
        for n in range(1, w.n_agents + 1):
            prompt = None
            for s in range(cfg.k):
                if (w.key, n, s) in done:
                    skipped += 1
                    continue
                prompt = prompt or build_zero_shot_prompt(w, n, cfg)
                jobs.append((w, n, s, prompt))

    def run(job):
        w, n, s, prompt = job
        return request_with_retry(cfg, prompt, w.t_pred, transport, cache, sample=s)

    records: list[PredictionRecord] = []
    failures: list[FailureRecord] = []
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fail_fh = open(failure_log, "a", encoding="utf-8") if failure_log else None
    try:
        with ThreadPoolExecutor(max_workers=cfg.max_concurrency) as pool, open(out_path, "a", encoding="utf-8") as fh:
            futures = [pool.submit(run, j) for j in jobs]
            for (w, n, s, _), fut in zip(jobs, futures):
                res = fut.result()
                if isinstance(res, FailureRecord):
                    res.window_key, res.agent, res.sample = w.key, n, s
                    failures.append(res)
                    if fail_fh:
                        fail_fh.write(json.dumps(res.to_record()) + "\n")
                        fail_fh.flush()
                    continue
                rec = PredictionRecord.for_window(w, n, s, res.path)
                records.append(rec)
                fh.write(json.dumps(rec.to_record()) + "\n")
                fh.flush()
    finally:
        if fail_fh:
            fail_fh.close()
    if failures:
        log.warning("%d of %d requests failed", len(failures), len(jobs))
    return BenchmarkResult(records, failures, skipped)


def echo_linear_transport(fmt_digits: int = 17) -> Callable[[dict, float], str]:
    """Offline stand-in service answering with the least-squares extrapolation.

    It reads the target's observations back out of the prompt and prints the
    extrapolated points with ``fmt_digits`` decimals. Useful for dry runs of
    the zero-shot pipeline and as an equivalence check against the Linear
    baseline.
    """
    import re

    from trajqa.baselines import linear_path
    from trajqa.prompt_codec import _POINT_RE

    q_re = re.compile(r"What trajectory does pedestrian (\d+) follow for the next (\d+) frames\?")
    obs_re = re.compile(r"Pedestrian (\d+) moved along the trajectory (\[[^\]]*\]) for \d+ frames\.")

    def transport(request: dict, timeout: float) -> str:
        prompt = request["messages"][-1]["content"]
        q = q_re.search(prompt)
        n, t_pred = int(q.group(1)), int(q.group(2))
        obs = {int(m.group(1)): m.group(2) for m in obs_re.finditer(prompt)}
        pts = np.array([(float(a), float(b)) for a, b in _POINT_RE.findall(obs[n])])
        path = linear_path(pts, t_pred)
        body = ", ".join(f"({x:.{fmt_digits}f}, {y:.{fmt_digits}f})" for x, y in path)
        return f"Pedestrian {n} will move along the trajectory [{body}] for the next {t_pred} frames."

    return transport
