"""Tokenizer state, pre-segmentation, encode/decode and the vocabulary file.

Vocabulary file (UTF-8 text, ``\\n`` line ends)::

    #trajqa-tokenizer 1
    algo bpe
    [vocab]
    <token>                # one per line, line i+1 of the section is id i
    <token>\\t<logprob>     # unigram only: float repr of the piece log-probability
    [merges]               # bpe only, in training order
    <left> <right>

Tokens are escaped: backslash ``\\\\``, space ``\\s``, tab ``\\t``, newline
``\\n``, carriage return ``\\r``, other control characters ``\\uXXXX``. The
first four vocabulary entries are always ``<pad> <unk> <bos> <eos>``. A
token spelled like a section marker has its ``[`` written as ``\\u005b``.
"""
from __future__ import annotations

import enum
import hashlib
import math
import re
from dataclasses import dataclass, field

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIALS = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3

_HEADER = "#trajqa-tokenizer 1"


class TokenizerConfigError(ValueError):
    pass


class Algo(str, enum.Enum):
    CHAR = "char"
    WORD = "word"
    UNIGRAM = "unigram"
    BPE = "bpe"


def char_class(c: str) -> int:
    if c.isspace():
        return 0
    if c.isalpha():
        return 1
    if c.isdigit():
        return 2
    return 3


def presegment(text: str) -> list[str]:
    """Split into runs of one character class; every whitespace char stands alone."""
    chunks: list[str] = []
    start = 0
    prev = None
    for i, c in enumerate(text):
        cls = char_class(c)
        if cls == 0 or cls != prev:
            if i > start:
                chunks.append(text[start:i])
            start = i
        prev = cls
    if text:
        chunks.append(text[start:])
    return chunks


def is_mixed(token: str) -> bool:
    """True if the token holds a numeral and any other visible character."""
    has_digit = any(c.isdigit() for c in token)
    has_other = any(not c.isdigit() and not c.isspace() for c in token)
    return has_digit and has_other


_ESC = {"\\": "\\\\", " ": "\\s", "\t": "\\t", "\n": "\\n", "\r": "\\r"}
_UNESC = {"\\": "\\", "s": " ", "t": "\t", "n": "\n", "r": "\r"}


def escape_token(tok: str) -> str:
    out = []
    if tok in ("[vocab]", "[merges]"):
        # keep section markers unambiguous
        return "\\u005b" + tok[1:]
    for c in tok:
        if c in _ESC:
            out.append(_ESC[c])
        elif ord(c) < 32 or ord(c) == 127:
            out.append(f"\\u{ord(c):04x}")
        else:
            out.append(c)
    return "".join(out)


def unescape_token(s: str) -> str:
    out = []
    i = 0
    while i < len(s):
        c = s[i]
        if c != "\\":
            out.append(c)
            i += 1
            continue
        nxt = s[i + 1]
        if nxt == "u":
            out.append(chr(int(s[i + 2 : i + 6], 16)))
            i += 6
        else:
            out.append(_UNESC[nxt])
            i += 2
    return "".join(out)


@dataclass
class Tokenizer:
    algo: Algo
    vocab: list[str]
    merges: list[tuple[str, str]] = field(default_factory=list)
    piece_logprobs: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.algo = Algo(self.algo)
        if tuple(self.vocab[:4]) != SPECIALS:
            raise TokenizerConfigError(f"vocabulary must start with {SPECIALS}")
        self.token_to_id = {t: i for i, t in enumerate(self.vocab)}
        if len(self.token_to_id) != len(self.vocab):
            raise TokenizerConfigError("duplicate vocabulary entries")
        self._merge_rank = {pair: i for i, pair in enumerate(self.merges)}
        self._cache: dict[str, list[int]] = {}
        if self.algo is Algo.UNIGRAM:
            self._max_piece = max((len(p) for p in self.piece_logprobs), default=1)

    def __len__(self) -> int:
        return len(self.vocab)

    @property
    def pad_id(self) -> int:
        return PAD_ID

    @property
    def unk_id(self) -> int:
        return UNK_ID

    @property
    def bos_id(self) -> int:
        return BOS_ID

    @property
    def eos_id(self) -> int:
        return EOS_ID

    # ------------------------------------------------------------ encoding

    def _chunk_ids(self, chunk: str) -> list[int]:
        ids = self._cache.get(chunk)
        if ids is None:
            if self.algo is Algo.BPE:
                pieces = self._bpe_pieces(chunk)
            else:
                pieces = self._viterbi_pieces(chunk)
            ids = [self.token_to_id.get(p, UNK_ID) for p in pieces]
            self._cache[chunk] = ids
        return ids

    def _bpe_pieces(self, chunk: str) -> list[str]:
        parts = list(chunk)
        rank = self._merge_rank
        while len(parts) > 1:
            best = None
            for i in range(len(parts) - 1):
                r = rank.get((parts[i], parts[i + 1]))
                if r is not None and (best is None or r < best[0]):
                    best = (r, parts[i], parts[i + 1])
            if best is None:
                break
            _, a, b = best
            merged, i = [], 0
            while i < len(parts):
                if i < len(parts) - 1 and parts[i] == a and parts[i + 1] == b:
                    merged.append(a + b)
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        return parts

    def _viterbi_pieces(self, chunk: str) -> list[str]:
        return viterbi_segment(chunk, self.piece_logprobs, self._max_piece)

    def encode_pieces(self, text: str) -> list[tuple[int, str]]:
        """(id, covered text) pairs. Unknown text maps to ``UNK_ID``."""
        out = []
        if self.algo is Algo.CHAR:
            return [(self.token_to_id.get(c, UNK_ID), c) for c in text]
        if self.algo is Algo.WORD:
            if not text:
                return out
            return [(self.token_to_id.get(w, UNK_ID), w) for w in text.split(" ")]
        for chunk in presegment(text):
            if len(chunk) == 1:
                out.append((self.token_to_id.get(chunk, UNK_ID), chunk))
                continue
            pos = 0
            # unknown characters are never merged, so an unk piece is one char
            for i in self._chunk_ids(chunk):
                piece = self.vocab[i] if i != UNK_ID else chunk[pos]
                out.append((i, piece))
                pos += len(piece)
        return out

    def encode(self, text: str) -> list[int]:
        return [i for i, _ in self.encode_pieces(text)]

    def decode(self, ids) -> str:
        pieces = []
        for i in ids:
            i = int(i)
            if i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            pieces.append("�" if i == UNK_ID else self.vocab[i])
        if self.algo is Algo.WORD:
            return " ".join(pieces)
        return "".join(pieces)

    # ------------------------------------------------------------ persistence

    def dumps(self) -> str:
        lines = [_HEADER, f"algo {self.algo.value}", "[vocab]"]
        for tok in self.vocab:
            if self.algo is Algo.UNIGRAM and tok in self.piece_logprobs:
                lines.append(f"{escape_token(tok)}\t{self.piece_logprobs[tok]!r}")
            else:
                lines.append(escape_token(tok))
        if self.algo is Algo.BPE:
            lines.append("[merges]")
            lines.extend(f"{escape_token(a)} {escape_token(b)}" for a, b in self.merges)
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Tokenizer":
        lines = text.split("\n")
        if lines[0] != _HEADER:
            raise TokenizerConfigError("not a trajqa tokenizer file")
        m = re.fullmatch(r"algo (\w+)", lines[1])
        if m is None:
            raise TokenizerConfigError("missing algo line")
        algo = Algo(m.group(1))
        vocab, merges, logp = [], [], {}
        section = None
        for line in lines[2:]:
            if line in ("[vocab]", "[merges]"):
                section = line
                continue
            if line == "":
                continue
            if section == "[vocab]":
                tok_s, _, lp = line.partition("\t")
                tok = unescape_token(tok_s)
                vocab.append(tok)
                if lp:
                    logp[tok] = float(lp)
            elif section == "[merges]":
                a, b = line.split(" ")
                merges.append((unescape_token(a), unescape_token(b)))
        return cls(algo=algo, vocab=vocab, merges=merges, piece_logprobs=logp)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "Tokenizer":
        with open(path, encoding="utf-8", newline="") as fh:
            return cls.loads(fh.read())

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()


def viterbi_segment(text: str, logp: dict[str, float], max_len: int) -> list[str]:
    """Most likely segmentation under independent piece log-probabilities.

    Characters not covered by any piece become single-character pieces
    (which encode as unk). Ties keep the earliest-found split, i.e. the
    shorter last piece.
    """
    n = len(text)
    best = [0.0] + [-math.inf] * n
    back = [0] * (n + 1)
    for end in range(1, n + 1):
        for start in range(max(0, end - max_len), end):
            lp = logp.get(text[start:end])
            if lp is None or best[start] == -math.inf:
                continue
            s = best[start] + lp
            if s > best[end]:
                best[end] = s
                back[end] = start
        if best[end] == -math.inf:
            # unknown character: pass it through with a large penalty
            best[end] = best[end - 1] - 1e6
            back[end] = end - 1
    pieces = []
    end = n
    while end > 0:
        start = back[end]
        pieces.append(text[start:end])
        end = start
    return pieces[::-1]
