from trajqa.tokenizer.core import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    SPECIALS,
    UNK_ID,
    Algo,
    Tokenizer,
    TokenizerConfigError,
    is_mixed,
    presegment,
)
from trajqa.tokenizer.stats import TokenizerStats, format_stats_table, rouge1, stats
from trajqa.tokenizer.train import DEFAULT_BUDGET, train


def encode(tok: Tokenizer, text: str) -> list[int]:
    return tok.encode(text)


def decode(tok: Tokenizer, ids) -> str:
    return tok.decode(ids)


__all__ = [
    "Algo",
    "BOS_ID",
    "DEFAULT_BUDGET",
    "EOS_ID",
    "PAD_ID",
    "SPECIALS",
    "Tokenizer",
    "TokenizerConfigError",
    "TokenizerStats",
    "UNK_ID",
    "decode",
    "encode",
    "format_stats_table",
    "is_mixed",
    "presegment",
    "rouge1",
    "stats",
    "train",
]
