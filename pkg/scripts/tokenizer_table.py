"""Tokenizer characteristics of the char, word, BPE and unigram tokenizers.

Builds the six-task prompt corpus from every scene of a raw tree (windows
at ``--stride``), trains the four tokenizers on it and prints the table:
vocabulary size, mixed entries, clarity, coverage, tokens per input and
output sentence, and round-trip ROUGE-1.
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

from trajqa.aux_labels import window_bundles
from trajqa.dataset import ETH_UCY_SCENES, load_scene
from trajqa.tokenizer import format_stats_table, stats, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", default="data/raw")
    ap.add_argument("--stride", type=int, default=10)
    ap.add_argument("--out", default="results/tokenizers")
    args = ap.parse_args()

    bundles = [b for s in ETH_UCY_SCENES for w in load_scene(args.data, s, stride=args.stride) for b in window_bundles(w)]
    inputs = [b.source_text for b in bundles]
    outputs = [b.answer for b in bundles]
    rows = [stats(train(inputs + outputs, algo), inputs, outputs) for algo in ("char", "word", "unigram", "bpe")]
    table = format_stats_table(rows)
    print(f"{len(bundles)} prompt bundles\n{table}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "tok_stats.json").write_text(json.dumps([r.as_dict() for r in rows], indent=2) + "\n", encoding="utf-8")
    (out / "tok_stats.txt").write_text(table + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
