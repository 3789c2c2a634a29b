"""Answer generation: greedy, beam search and temperature sampling.

The search routines are model-agnostic. They take ``logits_fn(prefixes)``,
which maps a batch of equal-length token-id prefixes (each starting with
BOS) to an array of next-token logits of shape (batch, vocab). Returned
sequences exclude BOS and the final EOS.
"""
from __future__ import annotations

import hashlib
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from trajqa.baselines import predict_linear
from trajqa.dataset import TrajectoryWindow
from trajqa.evaluation import PredictionRecord
from trajqa.prompt_codec import AnswerFormatError, Task, nearest_subwindow, parse_answer_trajectory, render_bundle
from trajqa.tokenizer import BOS_ID, EOS_ID, Tokenizer

LogitsFn = Callable[[list[list[int]]], np.ndarray]


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "beam"
    d: int = 2
    tau: float = 0.7
    k: int = 20
    max_tokens: int = 256
    retry_budget: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam", "sample"):
            raise ValueError(f"unknown decode strategy {self.strategy!r}")
        if self.d < 1:
            raise ValueError("beam width d must be >= 1")
        if self.tau <= 0:
            raise ValueError("temperature tau must be > 0")
        if self.k < 1:
            raise ValueError("sample count k must be >= 1")
        if self.max_tokens < 1 or self.retry_budget < 0:
            raise ValueError("max_tokens must be >= 1 and retry_budget >= 0")

    @property
    def stochastic(self) -> bool:
        return self.strategy == "sample"

    @property
    def n_samples(self) -> int:
        return self.k if self.stochastic else 1

    @classmethod
    def parse(cls, spec: str, **overrides) -> "DecodeConfig":
        """Parse ``greedy``, ``beam:d`` or ``sample:tau,k``."""
        spec = spec.strip()
        if spec == "greedy":
            return cls(strategy="greedy", **overrides)
        m = re.fullmatch(r"beam(?::(\d+))?", spec)
        if m:
            return cls(strategy="beam", d=int(m.group(1) or 2), **overrides)
        m = re.fullmatch(r"sample(?::([0-9.eE+-]+)(?:,(\d+))?)?", spec)
        if m:
            kw = {"tau": float(m.group(1))} if m.group(1) else {}
            if m.group(2):
                kw["k"] = int(m.group(2))
            return cls(strategy="sample", **{**kw, **overrides})
        raise ValueError(f"cannot parse decode spec {spec!r}; use greedy, beam:d or sample:tau,k")


@dataclass
class Hypothesis:
    tokens: list[int]
    logprob: float
    complete: bool


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    m = np.max(logits, axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def greedy(logits_fn: LogitsFn, max_tokens: int, bos: int = BOS_ID, eos: int = EOS_ID) -> Hypothesis:
    """Arg-max token at every step; ties go to the smaller id."""
    seq = [bos]
    score = 0.0
    for _ in range(max_tokens):
        lp = log_softmax(logits_fn([seq]))[0]
        tok = int(np.argmax(lp))
        score += float(lp[tok])
        if tok == eos:
            return Hypothesis(seq[1:], score, True)
        seq.append(tok)
    return Hypothesis(seq[1:], score, False)


def _rank_key(h: Hypothesis):
    return (-h.logprob, len(h.tokens), h.tokens)


def beam_search(logits_fn: LogitsFn, d: int, max_tokens: int, bos: int = BOS_ID, eos: int = EOS_ID) -> Hypothesis:
    """Width-``d`` beam search on raw cumulative log-probability.

    At each step all extensions of the live beams are ranked and the best
    ``d`` kept; those ending in EOS retire as finished. The search stops
    once no live beam can beat the best finished one. The best finished
    hypothesis wins (ties: shorter, then smaller ids); if none finished
    within ``max_tokens``, the best live one is returned with
    ``complete=False``.
    """
    if d < 1:
        raise ValueError("beam width must be >= 1")
    beams = [Hypothesis([], 0.0, False)]
    finished: list[Hypothesis] = []
    for _ in range(max_tokens):
        lp = log_softmax(logits_fn([[bos] + b.tokens for b in beams]))
        cands = []
        for b, row in zip(beams, lp):
            # only a beam's own d best extensions can reach the global top d
            ids = np.flatnonzero(np.isfinite(row))
            if len(ids) > d:
                ids = ids[np.lexsort((ids, -row[ids]))[:d]]
            for tok in ids:
                cands.append((b.logprob + float(row[tok]), b.tokens, int(tok)))
        cands.sort(key=lambda c: (-c[0], len(c[1]), c[1] + [c[2]]))
        beams = []
        for score, toks, tok in cands[:d]:
            if tok == eos:
                finished.append(Hypothesis(toks, score, True))
            else:
                beams.append(Hypothesis(toks + [tok], score, False))
        if not beams:
            break
        if finished and max(f.logprob for f in finished) >= beams[0].logprob:
            break
    if finished:
        return min(finished, key=_rank_key)
    return min(beams, key=_rank_key)


def sample(
    logits_fn: LogitsFn,
    tau: float,
    rngs: Sequence[np.random.Generator],
    max_tokens: int,
    bos: int = BOS_ID,
    eos: int = EOS_ID,
) -> list[Hypothesis]:
    """One sequence per generator, drawn token by token from softmax(logits / tau).

    The sequences are decoded in one batch, but each consumes only its own
    generator, so a draw depends only on its stream.
    """
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    k = len(rngs)
    seqs = [[bos] for _ in range(k)]
    scores = [0.0] * k
    done = [False] * k
    for _ in range(max_tokens):
        live = [i for i in range(k) if not done[i]]
        if not live:
            break
        logits = np.asarray(logits_fn([seqs[i] for i in live]), dtype=np.float64)
        probs = np.exp(log_softmax(logits / tau))
        base_lp = log_softmax(logits)
        for row, i in enumerate(live):
            cdf = np.cumsum(probs[row])
            tok = int(np.searchsorted(cdf, rngs[i].random() * cdf[-1], side="right"))
            tok = min(tok, len(cdf) - 1)
            while probs[row, tok] == 0.0:  # guard against landing on a zero-mass id at the cdf edge
                tok -= 1
            scores[i] += float(base_lp[row, tok])
            if tok == eos:
                done[i] = True
            else:
                seqs[i].append(tok)
    return [Hypothesis(s[1:], sc, dn) for s, sc, dn in zip(seqs, scores, done)]


def stream_seed(seed: int, window_key: str, agent: int, sample_index: int) -> list[int]:
    """Entropy for the random stream of one (window, agent, sample) draw."""
    digest = hashlib.sha256(window_key.encode("utf-8")).digest()
    return [seed, int.from_bytes(digest[:8], "little"), agent, sample_index]


# ---------------------------------------------------------------- windows


@dataclass
class WindowPrediction:
    paths: list[np.ndarray]
    fallback: list[bool]
    attempts: list[int]
    texts: list[str] = field(default_factory=list)


def forecast_source_ids(
    tokenizer: Tokenizer, window: TrajectoryWindow, n: int, max_src_len: int | None = None, caption: bool = True
) -> list[int]:
    """Tokenized forecast prompt; drops the farthest context agents if it is too long."""
    w, m = window, n
    while True:
        bundle = render_bundle(w, Task.FORECAST, m, training=False, caption=caption)
        ids = tokenizer.encode(bundle.source_text) + [EOS_ID]
        if max_src_len is None or len(ids) <= max_src_len or w.n_agents == 1:
            return ids
        w, m = nearest_subwindow(window, n, w.n_agents - 1)


def _try_parse(tokenizer: Tokenizer, h: Hypothesis, t_pred: int):
    text = tokenizer.decode(h.tokens)
    if not h.complete:
        return None, text
    try:
        return parse_answer_trajectory(text, t_pred), text
    except AnswerFormatError:
        return None, text


def predict_window(model, tokenizer: Tokenizer, window: TrajectoryWindow, n: int, cfg: DecodeConfig) -> WindowPrediction:
    """Forecast agent ``n``: one path (greedy/beam) or ``cfg.k`` paths (sample).

    ``model`` needs ``step_fn(src_ids) -> logits_fn``; a ``cfg`` attribute
    with ``max_src_len``/``max_tgt_len`` is honoured when present. Failed
    parses are retried up to ``cfg.retry_budget`` times, widening the beam
    by one per retry or drawing a fresh sample; after that the linear
    baseline path is used and flagged.
    """
    mcfg = getattr(model, "cfg", None)
    max_src = getattr(mcfg, "max_src_len", None)
    max_tokens = cfg.max_tokens
    if mcfg is not None:
        max_tokens = min(max_tokens, mcfg.max_tgt_len - 1)
    logits_fn = model.step_fn(forecast_source_ids(tokenizer, window, n, max_src))
    t_pred = window.t_pred

    if not cfg.stochastic:
        text = ""
        for attempt in range(cfg.retry_budget + 1):
            width = (1 if cfg.strategy == "greedy" else cfg.d) + attempt
            h = greedy(logits_fn, max_tokens) if width == 1 else beam_search(logits_fn, width, max_tokens)
            path, text = _try_parse(tokenizer, h, t_pred)
            if path is not None:
                return WindowPrediction([path], [False], [attempt + 1], [text])
        return WindowPrediction([predict_linear(window, n)], [True], [cfg.retry_budget + 1], [text])

    rngs = [np.random.default_rng(stream_seed(cfg.seed, window.key, n, i)) for i in range(cfg.k)]
    paths: list[np.ndarray | None] = [None] * cfg.k
    texts = [""] * cfg.k
    attempts = [0] * cfg.k
    pending = list(range(cfg.k))
    for _ in range(cfg.retry_budget + 1):
        if not pending:
            break
        hyps = sample(logits_fn, cfg.tau, [rngs[i] for i in pending], max_tokens)
        still = []
        for i, h in zip(pending, hyps):
            attempts[i] += 1
            paths[i], texts[i] = _try_parse(tokenizer, h, t_pred)
            if paths[i] is None:
                still.append(i)
        pending = still
    fallback = [p is None for p in paths]
    if pending:
        lin = predict_linear(window, n)
        for i in pending:
            paths[i] = lin.copy()
    return WindowPrediction(paths, fallback, attempts, texts)


def predict_windows(
    model, tokenizer: Tokenizer, windows: Iterable[TrajectoryWindow], cfg: DecodeConfig, workers: int = 1
) -> list[PredictionRecord]:
    """Prediction records for every agent of every window, in input order."""
    jobs = [(w, n) for w in windows for n in range(1, w.n_agents + 1)]

    def run(job):
        w, n = job
        return predict_window(model, tokenizer, w, n, cfg)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    records = []
    for (w, n), res in zip(jobs, results):
        for s, (path, fb) in enumerate(zip(res.paths, res.fallback)):
            records.append(PredictionRecord.for_window(w, n, s, path, fb))
    return records
