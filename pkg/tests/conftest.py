from __future__ import annotations

import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []

REPO_ROOT = Path(__file__).resolve().parent.parent
SCENES = ("eth", "hotel", "univ", "zara1", "zara2")


def eth_ucy_root() -> Path | None:
    """Raw ETH/UCY tree (``$TRAJQA_DATA`` or ``data/raw``) if all five scenes have files."""
    root = Path(os.environ.get("TRAJQA_DATA", REPO_ROOT / "data" / "raw"))
    if all((root / s).is_dir() and any((root / s).rglob("*.txt")) for s in SCENES):
        return root
    return None


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def synthetic_windows():
    from trajqa.dataset import build_windows
    from trajqa.synthetic import simulate_scene

    return build_windows(simulate_scene(3), stride=10, scene_id="toy", source="toy_synthetic")


@pytest.fixture(scope="session")
def overfit_run(synthetic_windows):
    """A small model trained to memorise 32 multi-task bundles (shared, ~3 min)."""
    from trajqa.aux_labels import window_bundles
    from trajqa.prompt_codec import ALL_TASKS, nearest_subwindow
    from trajqa.seq2seq import ModelConfig, Seq2SeqTransformer, TrainConfig, encode_source, encode_target, train
    from trajqa.tokenizer import train as train_tokenizer

    pool = []  # (bundle, subwindow, new index)
    for w in synthetic_windows:
        for n in range(1, w.n_agents + 1):
            sub, m = nearest_subwindow(w, n, 2)
            for b in window_bundles(sub, max_agents=None):
                if b.target_agent == m:
                    pool.append((b, sub, m))
    by_task = {t: [p for p in pool if p[0].task is t] for t in ALL_TASKS}
    chosen = []
    i = 0
    while len(chosen) < 32:
        for t in ALL_TASKS:
            if len(chosen) < 32 and i < len(by_task[t]):
                chosen.append(by_task[t][i])
        i += 1
    corpus = [p[0].source_text for p in pool] + [p[0].answer for p in pool]
    tok = train_tokenizer(corpus, "bpe", 600)
    bundles = [c[0] for c in chosen]
    src = max(len(encode_source(tok, b)) for b in bundles)
    tgt = max(len(encode_target(tok, b.answer)) for b in bundles)
    torch.manual_seed(0)
    mcfg = ModelConfig(len(tok), d_model=64, n_heads=4, n_enc_layers=2, n_dec_layers=2, ffn_dim=128,
                       max_src_len=src + 8, max_tgt_len=tgt + 8, dropout=0.0)
    model = Seq2SeqTransformer(mcfg)
    t0 = time.monotonic()
    ckpt = train(model, bundles, tok, TrainConfig(batch_size=32, learning_rate=3e-3, epochs=300, seed=0, log_every=0))
    elapsed = time.monotonic() - t0
    model.eval()
    return {"model": model, "tokenizer": tok, "chosen": chosen, "bundles": bundles, "checkpoint": ckpt, "seconds": elapsed}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
