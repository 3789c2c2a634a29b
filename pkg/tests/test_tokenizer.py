from __future__ import annotations

import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajqa.aux_labels import window_bundles
from trajqa.tokenizer import (
    SPECIALS,
    UNK_ID,
    Algo,
    Tokenizer,
    TokenizerConfigError,
    decode,
    encode,
    format_stats_table,
    is_mixed,
    presegment,
    rouge1,
    stats,
    train,
)
from trajqa.tokenizer.core import escape_token, unescape_token, viterbi_segment


@pytest.fixture(scope="module")
def prompt_corpus(synthetic_windows):
    bundles = [b for w in synthetic_windows[:40] for b in window_bundles(w, max_agents=4)]
    return [b.source_text for b in bundles], [b.answer for b in bundles]


@pytest.fixture(scope="module")
def tokenizers(prompt_corpus):
    inputs, outputs = prompt_corpus
    corpus = inputs + outputs
    return {a: train(corpus, a, 800 if a in ("bpe", "unigram") else None) for a in ("char", "word", "unigram", "bpe")}


# ---------------------------------------------------------------- reference BPE


def naive_bpe_merges(corpus, budget, min_frequency=2):
    """Recount every pair from scratch each step; lexicographic tie-break."""
    words = Counter()
    for text in corpus:
        words.update(presegment(text))
    words = {tuple(w): f for w, f in words.items() if len(w) > 1}
    n_vocab = len(SPECIALS) + len({c for t in corpus for c in t})
    seen = {c for t in corpus for c in t}
    merges = []
    while n_vocab < budget:
        counts = Counter()
        for w, f in words.items():
            for i in range(len(w) - 1):
                counts[(w[i], w[i + 1])] += f
        if not counts:
            break
        top = max(counts.values())
        if top < min_frequency:
            break
        pair = min(p for p, c in counts.items() if c == top)
        merges.append(pair)
        if pair[0] + pair[1] not in seen:
            seen.add(pair[0] + pair[1])
            n_vocab += 1
        new_words = {}
        for w, f in words.items():
            out, i = [], 0
            while i < len(w):
                if i < len(w) - 1 and (w[i], w[i + 1]) == pair:
                    out.append(w[i] + w[i + 1])
                    i += 2
                else:
                    out.append(w[i])
                    i += 1
            new_words[tuple(out)] = new_words.get(tuple(out), 0) + f
        words = new_words
    return merges


def test_bpe_first_merge():
    tok = train(["ab ab", "ab"], "bpe", 100)
    assert tok.merges[0] == ("a", "b")
    assert "ab" in tok.vocab


@settings(max_examples=60)
@given(st.lists(st.text(alphabet="ab1.( ", min_size=1, max_size=12), min_size=1, max_size=8), st.integers(8, 30))
def test_bpe_matches_naive_reference(corpus, extra):
    budget = len(SPECIALS) + len({c for t in corpus for c in t}) + extra
    tok = train(corpus, "bpe", budget)
    assert tok.merges == naive_bpe_merges(corpus, budget)


def test_char_vocab_example():
    tok = train(["(1.00, 2.00)"], "char")
    assert set("(1.0, 2)") <= set(tok.vocab)
    assert tok.vocab[:4] == list(SPECIALS)


def test_budget_too_small():
    with pytest.raises(TokenizerConfigError):
        train(["abcdef"], "bpe", 9)
    with pytest.raises(TokenizerConfigError):
        train(["abcdef"], "unigram", 5)
    with pytest.raises(TokenizerConfigError):
        train([], "char")


def test_presegment_classes():
    assert presegment("Pedestrian 12 at (1.05, -2.00).") == [
        "Pedestrian", " ", "12", " ", "at", " ", "(", "1", ".", "05", ",", " ", "-", "2", ".", "00", ").",
    ]
    assert presegment("") == []
    assert presegment("  a") == [" ", " ", "a"]


def test_is_mixed_definition():
    assert [is_mixed(t) for t in ("ab", "12", "a1")] == [False, False, True]
    assert is_mixed("(1") and not is_mixed(" ") and not is_mixed("(")
    assert sum(is_mixed(t) for t in ("ab", "12", "a1")) == 1


def test_rouge_examples():
    assert rouge1("a b c", "a b c") == 1.0
    assert rouge1("a b c", "a b d") == pytest.approx(2 / 3)
    assert rouge1("a", "") == 0.0
    assert rouge1("", "") == 1.0
    # clipping: the repeated candidate word counts once
    assert rouge1("a b", "a a") == pytest.approx(0.5)


@pytest.mark.parametrize("algo", ["char", "word", "unigram", "bpe"])
def test_round_trip_on_corpus(tokenizers, prompt_corpus, algo):
    tok = tokenizers[algo]
    for s in prompt_corpus[0][:50] + prompt_corpus[1][:50]:
        assert decode(tok, encode(tok, s)) == s
    assert encode(tok, "") == [] and decode(tok, []) == ""


@pytest.mark.parametrize("algo", ["char", "unigram", "bpe"])
def test_subword_no_mixed_tokens(tokenizers, algo):
    tok = tokenizers[algo]
    assert not any(is_mixed(t) for t in tok.vocab)


def test_bpe_splits_decimal_at_point(tokenizers):
    tok = tokenizers["bpe"]
    pieces = [p for _, p in tok.encode_pieces("(1.00")]
    assert "".join(pieces) == "(1.00"
    assert "." in pieces
    assert all(not is_mixed(p) for p in pieces)


def test_stats_table_properties(tokenizers, prompt_corpus):
    rows = {a: stats(t, *prompt_corpus) for a, t in tokenizers.items()}
    for a in ("char", "unigram", "bpe"):
        r = rows[a]
        assert (r.n_mixed, r.clarity, r.coverage, r.rouge1) == (0, 100.0, 1.0, 1.0)
    assert rows["word"].n_mixed > 0
    tps = {a: r.tokens_per_input_sentence + r.tokens_per_output_sentence for a, r in rows.items()}
    assert tps["word"] < tps["bpe"] <= tps["unigram"] < tps["char"]
    inputs = prompt_corpus[0]
    assert rows["char"].tokens_per_input_sentence == pytest.approx(np.mean([len(s) for s in inputs]))
    table = format_stats_table(list(rows.values()))
    assert table.count("\n") == 5


def test_unknown_characters_counted_against_coverage(tokenizers):
    tok = tokenizers["char"]
    st_ = stats(tok, ["Pedestrian €"], ["x"])
    assert st_.coverage < 1.0
    assert UNK_ID in tok.encode("€")


@pytest.mark.parametrize("algo", ["char", "word", "unigram", "bpe"])
def test_training_deterministic_and_file_round_trip(prompt_corpus, tmp_path, algo):
    corpus = prompt_corpus[0][:60] + prompt_corpus[1][:60]
    a = train(corpus, algo, 400 if algo in ("bpe", "unigram") else None)
    b = train(corpus, algo, 400 if algo in ("bpe", "unigram") else None)
    assert a.dumps() == b.dumps()
    a.save(tmp_path / "t.vocab")
    back = Tokenizer.load(tmp_path / "t.vocab")
    assert back.dumps() == a.dumps() and back.fingerprint == a.fingerprint
    for s in corpus[:10]:
        assert back.encode(s) == a.encode(s)


def test_bpe_merge_closure(tokenizers, prompt_corpus):
    tok = tokenizers["bpe"]
    vocab = set(tok.vocab)
    for a, b in tok.merges:
        assert a in vocab and b in vocab and a + b in vocab
    for s in prompt_corpus[0][:30]:
        assert UNK_ID not in tok.encode(s)


def test_vocab_file_escapes_awkward_tokens(tmp_path):
    tok = Tokenizer(Algo.CHAR, list(SPECIALS) + [" ", "\t", "\n", "\\", "[vocab]", "[merges]", "\x01", "é"])
    assert Tokenizer.loads(tok.dumps()).vocab == tok.vocab


@given(st.text())
def test_escape_round_trip(s):
    assert unescape_token(escape_token(s)) == s
    assert "\n" not in escape_token(s) and " " not in escape_token(s)


def test_unigram_viterbi_is_exact_optimum():
    logp = {"a": math.log(0.3), "b": math.log(0.3), "ab": math.log(0.2), "abb": math.log(0.05), "bb": math.log(0.15)}
    for text in ("ab", "abb", "abab", "babba", "bbbb"):
        best = None
        for cuts in itertools.product([0, 1], repeat=len(text) - 1):
            pieces, start = [], 0
            for i, c in enumerate(cuts, start=1):
                if c:
                    pieces.append(text[start:i])
                    start = i
            pieces.append(text[start:])
            if all(p in logp for p in pieces):
                score = sum(logp[p] for p in pieces)
                if best is None or score > best[0] + 1e-12:
                    best = (score, pieces)
        got = viterbi_segment(text, logp, 3)
        assert sum(logp[p] for p in got) == pytest.approx(best[0])


def test_word_tokenizer_unknown_word():
    tok = train(["hello world"], "word")
    assert tok.encode("hello there") == [tok.token_to_id["hello"], UNK_ID]
