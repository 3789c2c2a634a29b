"""Training of the four tokenizer algorithms.

Subword training (bpe, unigram) runs on class-pure chunks from
``presegment``: letters, digits and punctuation never share a piece and
spaces are never merged, so learned pieces cannot mix letters and digits.
"""
from __future__ import annotations

import math
from collections import Counter, defaultdict
from typing import Iterable, Sequence

from trajqa.tokenizer.core import SPECIALS, Algo, Tokenizer, TokenizerConfigError, presegment

DEFAULT_BUDGET = {Algo.BPE: 1224, Algo.UNIGRAM: 1113}


def _chunk_counts(corpus: Iterable[str]) -> Counter:
    counts: Counter = Counter()
    for text in corpus:
        counts.update(presegment(text))
    return counts


def _charset(corpus: Sequence[str]) -> list[str]:
    chars = set()
    for text in corpus:
        chars.update(text)
    return sorted(chars)


def _check_budget(budget: int, n_chars: int) -> None:
    if budget < n_chars + len(SPECIALS):
        raise TokenizerConfigError(
            f"vocabulary budget {budget} is below character set + specials ({n_chars} + {len(SPECIALS)})"
        )


def train_char(corpus: Sequence[str]) -> Tokenizer:
    return Tokenizer(Algo.CHAR, list(SPECIALS) + _charset(corpus))


def train_word(corpus: Sequence[str]) -> Tokenizer:
    words = set()
    for text in corpus:
        words.update(w for w in text.split(" ") if w)
    return Tokenizer(Algo.WORD, list(SPECIALS) + sorted(words))


def train_bpe(corpus: Sequence[str], vocab_budget: int = DEFAULT_BUDGET[Algo.BPE], min_frequency: int = 2) -> Tokenizer:
    """Greedy most-frequent-pair merging until the budget or ``min_frequency``.

    Ties between equally frequent pairs go to the lexicographically smallest
    (left, right) pair.
    """
    chars = _charset(corpus)
    _check_budget(vocab_budget, len(chars))
    vocab = list(SPECIALS) + chars
    known = set(vocab)

    chunk_freq = {c: f for c, f in _chunk_counts(corpus).items() if len(c) > 1}
    words = [list(c) for c in chunk_freq]
    freqs = list(chunk_freq.values())

    pair_counts: Counter = Counter()
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for idx, (sym, f) in enumerate(zip(words, freqs)):
        for pair in zip(sym, sym[1:]):
            pair_counts[pair] += f
            where[pair].add(idx)

    merges: list[tuple[str, str]] = []
    while len(vocab) < vocab_budget and pair_counts:
        best = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        (a, b), count = best
        if count < min_frequency:
            break
        merges.append((a, b))
        new = a + b
        if new not in known:
            vocab.append(new)
            known.add(new)
        for idx in sorted(where.pop((a, b), ())):
            sym, f = words[idx], freqs[idx]
            for pair in zip(sym, sym[1:]):
                pair_counts[pair] -= f
                if pair_counts[pair] <= 0:
                    del pair_counts[pair]
            merged, i = [], 0
            while i < len(sym):
                if i < len(sym) - 1 and sym[i] == a and sym[i + 1] == b:
                    merged.append(new)
                    i += 2
                else:
                    merged.append(sym[i])
                    i += 1
            words[idx] = merged
            for pair in zip(merged, merged[1:]):
                pair_counts[pair] += f
                where[pair].add(idx)
        pair_counts.pop((a, b), None)
    return Tokenizer(Algo.BPE, vocab, merges=merges)


# ---------------------------------------------------------------- unigram


def _logsumexp(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    m = max(a, b)
    return m + math.log(math.exp(a - m) + math.exp(b - m))


def _expected_counts(chunks: dict[str, int], logp: dict[str, float], max_len: int) -> tuple[dict[str, float], float]:
    """E-step: expected piece counts by forward-backward, and corpus log-likelihood."""
    counts: dict[str, float] = defaultdict(float)
    total_ll = 0.0
    for text, freq in chunks.items():
        n = len(text)
        alpha = [0.0] + [-math.inf] * n
        for end in range(1, n + 1):
            acc = -math.inf
            for start in range(max(0, end - max_len), end):
                lp = logp.get(text[start:end])
                if lp is not None and alpha[start] != -math.inf:
                    acc = _logsumexp(acc, alpha[start] + lp)
            alpha[end] = acc
        beta = [-math.inf] * n + [0.0]
        for start in range(n - 1, -1, -1):
            acc = -math.inf
            for end in range(start + 1, min(n, start + max_len) + 1):
                lp = logp.get(text[start:end])
                if lp is not None and beta[end] != -math.inf:
                    acc = _logsumexp(acc, lp + beta[end])
            beta[start] = acc
        z = alpha[n]
        total_ll += freq * z
        for start in range(n):
            if alpha[start] == -math.inf:
                continue
            for end in range(start + 1, min(n, start + max_len) + 1):
                piece = text[start:end]
                lp = logp.get(piece)
                if lp is None or beta[end] == -math.inf:
                    continue
                counts[piece] += freq * math.exp(alpha[start] + lp + beta[end] - z)
    return counts, total_ll


def _m_step(counts: dict[str, float], pieces: Iterable[str], floor: float = 1e-6) -> dict[str, float]:
    pieces = list(pieces)
    total = sum(max(counts.get(p, 0.0), floor) for p in pieces)
    return {p: math.log(max(counts.get(p, 0.0), floor) / total) for p in pieces}


def _best_score(text: str, logp: dict[str, float], max_len: int, exclude: str | None = None) -> float:
    n = len(text)
    best = [0.0] + [-math.inf] * n
    for end in range(1, n + 1):
        for start in range(max(0, end - max_len), end):
            piece = text[start:end]
            if piece == exclude:
                continue
            lp = logp.get(piece)
            if lp is not None and best[start] != -math.inf:
                best[end] = max(best[end], best[start] + lp)
    return best[n]


def _viterbi_usage(chunks: dict[str, int], logp: dict[str, float], max_len: int) -> Counter:
    from trajqa.tokenizer.core import viterbi_segment

    usage: Counter = Counter()
    for text, freq in chunks.items():
        for piece in viterbi_segment(text, logp, max_len):
            usage[piece] += freq
    return usage


def train_unigram(
    corpus: Sequence[str],
    vocab_budget: int = DEFAULT_BUDGET[Algo.UNIGRAM],
    max_piece_len: int = 8,
    seed_factor: int = 4,
    em_rounds: int = 2,
    prune_fraction: float = 0.2,
) -> Tokenizer:
    """EM-trained unigram piece inventory pruned down to ``vocab_budget``.

    Seeds are all characters plus the most frequent substrings (up to
    ``max_piece_len``) of the non-space chunks. Each pruning step runs
    ``em_rounds`` EM iterations, then drops ``prune_fraction`` of the
    multi-character pieces whose removal costs the least corpus
    log-likelihood (Viterbi approximation). Single characters are never
    pruned so every training character stays encodable.
    """
    chars = _charset(corpus)
    _check_budget(vocab_budget, len(chars))
    chunks = {c: f for c, f in _chunk_counts(corpus).items() if len(c) > 1}
    piece_budget = vocab_budget - len(SPECIALS)

    sub_freq: Counter = Counter()
    for text, f in chunks.items():
        for i in range(len(text)):
            for j in range(i + 2, min(len(text), i + max_piece_len) + 1):
                sub_freq[text[i:j]] += f
    seeds = sorted(sub_freq.items(), key=lambda kv: (-kv[1], kv[0]))[: seed_factor * piece_budget]
    char_freq: Counter = Counter()
    for text in corpus:
        char_freq.update(text)
    init = dict(seeds)
    init.update({c: char_freq[c] for c in chars})
    total = sum(init.values())
    logp = {p: math.log(f / total) for p, f in init.items()}
    single = set(chars)

    def em(lp):
        for _ in range(em_rounds):
            counts, _ = _expected_counts(chunks, lp, max_piece_len)
            for c in single:
                counts[c] = counts.get(c, 0.0) + char_freq[c] * 1e-3
            lp = _m_step(counts, lp.keys())
        return lp

    logp = em(logp)
    while len(logp) > piece_budget:
        usage = _viterbi_usage(chunks, logp, max_piece_len)
        loss = {}
        for piece in logp:
            if piece in single:
                continue
            used = usage.get(piece, 0)
            if used == 0:
                loss[piece] = 0.0
                continue
            alt = _best_score(piece, logp, max_piece_len, exclude=piece)
            loss[piece] = used * (logp[piece] - alt)
        n_drop = max(1, int(len(loss) * prune_fraction))
        n_drop = min(n_drop, len(logp) - piece_budget)
        drop = sorted(loss, key=lambda p: (loss[p], p))[:n_drop]
        for p in drop:
            del logp[p]
        logp = em(logp)

    ordered = sorted(logp, key=lambda p: (-logp[p], p))
    return Tokenizer(Algo.UNIGRAM, list(SPECIALS) + ordered, piece_logprobs=logp)


def train(corpus: Sequence[str], algo: Algo | str, vocab_budget: int | None = None, **kwargs) -> Tokenizer:
    corpus = list(corpus)
    if not corpus:
        raise TokenizerConfigError("cannot train a tokenizer on an empty corpus")
    algo = Algo(algo)
    if algo is Algo.CHAR:
        return train_char(corpus)
    if algo is Algo.WORD:
        return train_word(corpus)
    budget = vocab_budget if vocab_budget is not None else DEFAULT_BUDGET[algo]
    if algo is Algo.BPE:
        return train_bpe(corpus, budget, **kwargs)
    return train_unigram(corpus, budget, **kwargs)
