from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

from trajqa.tokenizer.core import UNK_ID, Tokenizer, is_mixed


def rouge1(reference: str, candidate: str) -> float:
    """ROUGE-1 F1 over whitespace tokens with clipped overlap counts."""
    ref = Counter(reference.split())
    cand = Counter(candidate.split())
    if not ref and not cand:
        return 1.0
    if not ref or not cand:
        return 0.0
    overlap = sum((ref & cand).values())
    if overlap == 0:
        return 0.0
    precision = overlap / sum(cand.values())
    recall = overlap / sum(ref.values())
    return 2 * precision * recall / (precision + recall)


@dataclass
class TokenizerStats:
    algo: str
    n_vocab: int
    n_mixed: int
    clarity: float
    coverage: float
    tokens_per_input_sentence: float
    tokens_per_output_sentence: float
    rouge1_input: float
    rouge1_output: float

    @property
    def rouge1(self) -> float:
        return min(self.rouge1_input, self.rouge1_output)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["rouge1"] = self.rouge1
        return d


def _corpus_stats(tok: Tokenizer, sentences: Sequence[str]) -> tuple[float, float, int, int]:
    n_tokens = 0
    rouge = 0.0
    covered = total = 0
    for s in sentences:
        pieces = tok.encode_pieces(s)
        n_tokens += len(pieces)
        rouge += rouge1(s, tok.decode([i for i, _ in pieces]))
        total += len(s)
        covered += len(s) - sum(len(p) for i, p in pieces if i == UNK_ID)
    n = max(len(sentences), 1)
    return n_tokens / n, rouge / n, covered, total


def stats(tok: Tokenizer, inputs: Sequence[str], outputs: Sequence[str]) -> TokenizerStats:
    """Vocabulary and corpus statistics of ``tok``.

    ``coverage`` is the fraction of corpus characters not absorbed by unk
    tokens; ``rouge1_*`` compare each sentence with its encode/decode round
    trip.
    """
    n_vocab = len(tok.vocab)
    n_mixed = sum(1 for t in tok.vocab if is_mixed(t))
    tin, rin, cov_in, tot_in = _corpus_stats(tok, inputs)
    tout, rout, cov_out, tot_out = _corpus_stats(tok, outputs)
    total = tot_in + tot_out
    return TokenizerStats(
        algo=tok.algo.value,
        n_vocab=n_vocab,
        n_mixed=n_mixed,
        clarity=100.0 * (1 - n_mixed / n_vocab),
        coverage=(cov_in + cov_out) / total if total else 1.0,
        tokens_per_input_sentence=tin,
        tokens_per_output_sentence=tout,
        rouge1_input=rin,
        rouge1_output=rout,
    )


def format_stats_table(rows: Sequence[TokenizerStats]) -> str:
    head = f"{'Tokenizer':<10} {'#Vocab':>7} {'#Mixed':>7} {'Clarity':>8} {'Cover':>6} {'#Tok in':>8} {'Rouge':>6} {'#Tok out':>8} {'Rouge':>6}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r.algo:<10} {r.n_vocab:>7d} {r.n_mixed:>7d} {r.clarity:>8.3f} {r.coverage:>6.2f} "
            f"{r.tokens_per_input_sentence:>8.2f} {r.rouge1_input:>6.2f} {r.tokens_per_output_sentence:>8.2f} {r.rouge1_output:>6.2f}"
        )
    return "\n".join(lines)
