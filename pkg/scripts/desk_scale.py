"""Desk-scale supervised run on one leave-one-out split.

Trains a multi-task model on the four training scenes for a wall-clock
budget, then evaluates on the held-out scene:

* the Stop baseline,
* deterministic decoding (beam, width 2),
* stochastic decoding (tau=0.7, K=20), with the share of samples that
  parse on their first attempt and the share that fall back to Linear.

Writes ``report.json`` (read by the acceptance suite), the checkpoint,
tokenizer and prediction dumps under ``--out``. ``--synthetic`` swaps in
the generated scenes and labels the report accordingly.

    python scripts/desk_scale.py --data data/raw --held-out eth --hours 2
"""
from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from trajqa.aux_labels import window_bundles
from trajqa.baselines import run_baseline
from trajqa.dataset import ETH_UCY_SCENES, leave_one_out, load_scene
from trajqa.decode import DecodeConfig, predict_window
from trajqa.evaluation import PredictionRecord, evaluate, write_dump
from trajqa.seq2seq import ModelConfig, Seq2SeqTransformer, TrainConfig, encode_source, encode_target, train
from trajqa.synthetic import write_benchmark
from trajqa.tokenizer import train as train_tokenizer


def predict(model, tok, windows, cfg: DecodeConfig):
    records, first_ok, total = [], 0, 0
    for w in windows:
        for n in range(1, w.n_agents + 1):
            res = predict_window(model, tok, w, n, cfg)
            for s, (path, fb, att) in enumerate(zip(res.paths, res.fallback, res.attempts)):
                records.append(PredictionRecord.for_window(w, n, s, path, fb))
                first_ok += att == 1 and not fb
                total += 1
    return records, first_ok / max(total, 1)


def summary(report, records, parse_rate=None, **extra) -> dict:
    out = {"ade": report.avg_ade, "fde": report.avg_fde, "fallback_rate": report.fallback_rate, "n_predictions": len(records)}
    if parse_rate is not None:
        out["parse_rate"] = parse_rate
    return out | extra


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", default="data/raw")
    ap.add_argument("--synthetic", action="store_true", help="generate and use synthetic scenes instead of --data")
    ap.add_argument("--held-out", default="eth", choices=ETH_UCY_SCENES)
    ap.add_argument("--hours", type=float, default=2.0)
    ap.add_argument("--out", default="results/desk_scale")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--train-stride", type=int, default=1)
    ap.add_argument("--max-agents", type=int, default=3, help="nearest agents kept in each training context")
    ap.add_argument("--max-test-windows", type=int, default=None, help="evenly spaced subset of held-out windows")
    ap.add_argument("--bpe-budget", type=int, default=1224)
    ap.add_argument("--d-model", type=int, default=128)
    ap.add_argument("--layers", type=int, default=3)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--lr", type=float, default=5e-4)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    log = logging.getLogger("desk_scale")
    torch.manual_seed(args.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    root = write_benchmark(out / "synthetic_raw", seed=args.seed) if args.synthetic else Path(args.data)
    split = leave_one_out(ETH_UCY_SCENES, args.held_out)
    train_w = [w for s in split.train_scenes for w in load_scene(root, s, stride=args.train_stride)]
    test_w = load_scene(root, split.held_out_scene)
    if args.max_test_windows and len(test_w) > args.max_test_windows:
        test_w = [test_w[i] for i in np.linspace(0, len(test_w) - 1, args.max_test_windows).round().astype(int)]
    bundles = [b for w in train_w for b in window_bundles(w, max_agents=args.max_agents)]
    log.info("%d train windows, %d bundles, %d test windows", len(train_w), len(bundles), len(test_w))

    tok = train_tokenizer([b.source_text for b in bundles] + [b.answer for b in bundles], "bpe", args.bpe_budget)
    tok.save(out / "tokenizer.vocab")
    src_len = max(len(encode_source(tok, b)) for b in bundles)
    tgt_len = max(len(encode_target(tok, b.answer)) for b in bundles)
    mcfg = ModelConfig(
        len(tok), d_model=args.d_model, n_heads=4, n_enc_layers=args.layers, n_dec_layers=args.layers,
        ffn_dim=4 * args.d_model, max_src_len=src_len, max_tgt_len=tgt_len, dropout=0.1,
    )
    tcfg = TrainConfig(
        batch_size=args.batch_size, learning_rate=args.lr, epochs=10_000, seed=args.seed,
        warmup_steps=200, max_seconds=args.hours * 3600, log_every=100,
    )
    t0 = time.monotonic()
    ckpt = train(Seq2SeqTransformer(mcfg), bundles, tok, tcfg, out_dir=out)
    train_seconds = time.monotonic() - t0
    model = ckpt.model.eval()
    log.info("trained %d steps in %.0fs, final loss %.4f", ckpt.step, train_seconds, ckpt.losses[-1])

    stop_recs = run_baseline(test_w, "stop")
    stop = evaluate(stop_recs, test_w)

    det_cfg = DecodeConfig(strategy="beam", d=2, seed=args.seed)
    det_recs, det_parse = predict(model, tok, test_w, det_cfg)
    write_dump(det_recs, out / "predictions_beam.jsonl")
    det = evaluate(det_recs, test_w)
    log.info("beam: ADE %.3f FDE %.3f", det.avg_ade, det.avg_fde)

    sto_cfg = DecodeConfig(strategy="sample", tau=0.7, k=20, seed=args.seed)
    sto_recs, sto_parse = predict(model, tok, test_w, sto_cfg)
    write_dump(sto_recs, out / "predictions_sample.jsonl")
    sto = evaluate(sto_recs, test_w, k=20)
    log.info("sample: minADE %.3f minFDE %.3f parse %.3f", sto.avg_ade, sto.avg_fde, sto_parse)

    report = {
        "dataset": "synthetic" if args.synthetic else "eth_ucy",
        "held_out": split.held_out_scene,
        "train_seconds": train_seconds,
        "steps": ckpt.step,
        "final_loss": ckpt.losses[-1],
        "train_bundles": len(bundles),
        "test_windows": len(test_w),
        "stop": summary(stop, stop_recs),
        "deterministic": summary(det, det_recs, det_parse, strategy="beam", d=2),
        "stochastic": summary(sto, sto_recs, sto_parse, strategy="sample", tau=0.7, k=20),
        "args": vars(args),
    }
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(json.dumps({k: report[k] for k in ("dataset", "held_out", "stop", "deterministic", "stochastic")}, indent=2))


if __name__ == "__main__":
    main()
