"""Command-line pipeline: ingest, prompts, tok-train, tok-stats, train, predict, baseline, zero-shot, eval.

Every subcommand writes into ``--out`` (a directory) and leaves the fully
resolved configuration there as ``config.json``. ``--config`` reads a YAML
or JSON mapping whose keys are option names (``batch_size``, ``decode``,
...); command-line flags win over the file. The ``train`` command also reads
``model:`` and ``train:`` sections into ModelConfig/TrainConfig, and
``zero-shot`` reads a ``zero_shot:`` section into ZeroShotConfig.

Failures print ``{"error": <type>, "message": <text>}`` on stderr and exit
nonzero (2 for usage errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import yaml

from trajqa.dataset import (
    ETH_UCY_SCENES,
    Columns,
    CoordSystem,
    load_captions,
    load_scene,
    load_windows,
    leave_one_out,
    save_windows,
)

log = logging.getLogger("trajqa")

_SECTIONS = ("model", "train", "zero_shot")


def load_config_file(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must hold a mapping")
    return data


def _write_config(out: Path, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _dataclass_from(cls, section: dict, **extra):
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**{**section, **extra})


def _windows_from(args, role: str = "test"):
    """Windows from a JSONL file, or from a raw tree with --scene/--leave-out."""
    src = Path(args.dataset)
    if src.is_file():
        return load_windows(src)
    captions = load_captions(args.captions) if getattr(args, "captions", None) else {}
    if args.leave_out:
        split = leave_one_out(args.scene or ETH_UCY_SCENES, args.leave_out)
        scenes = [split.held_out_scene] if role == "test" else list(split.train_scenes)
    else:
        scenes = args.scene or list(ETH_UCY_SCENES)
    out = []
    for s in scenes:
        out.extend(
            load_scene(src, s, stride=args.stride, columns=args.columns, coord_system=args.coord_system, caption=captions.get(s, ""))
        )
    return out


# ---------------------------------------------------------------- commands


def cmd_ingest(args) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    info = {}
    if args.leave_out:
        train_w = _windows_from(args, "train")
        test_w = _windows_from(args, "test")
        save_windows(train_w, out / "train.jsonl")
        save_windows(test_w, out / "test.jsonl")
        info = {"train_windows": len(train_w), "test_windows": len(test_w)}
    else:
        ws = _windows_from(args)
        save_windows(ws, out / "windows.jsonl")
        info = {"windows": len(ws)}
    print(json.dumps(info))
    return info


def cmd_prompts(args) -> dict:
    from trajqa.aux_labels import AuxThresholds, window_bundles
    from trajqa.prompt_codec import ALL_TASKS, Task, save_bundles

    tasks = [Task(t) for t in args.tasks] if args.tasks else list(ALL_TASKS)
    th = AuxThresholds(meters_per_unit=args.meters_per_unit)
    windows = load_windows(args.windows)
    bundles = []
    for w in windows:
        bundles.extend(window_bundles(w, tasks, th, max_agents=args.max_agents, caption=not args.no_caption))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_bundles(bundles, out / "bundles.jsonl")
    info = {"bundles": len(bundles), "windows": len(windows)}
    print(json.dumps(info))
    return info


def cmd_tok_train(args) -> dict:
    from trajqa.prompt_codec import load_bundles
    from trajqa.tokenizer import stats, train

    bundles = load_bundles(args.prompts)
    inputs = [b.source_text for b in bundles]
    outputs = [b.answer for b in bundles if b.answer is not None]
    tok = train(inputs + outputs, args.algo, args.vocab)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tok.save(out / "tokenizer.vocab")
    st = stats(tok, inputs, outputs).as_dict()
    (out / "tok_stats.json").write_text(json.dumps(st, indent=2) + "\n", encoding="utf-8")
    info = {"n_vocab": len(tok), "fingerprint": tok.fingerprint}
    print(json.dumps(info))
    return info


def cmd_tok_stats(args) -> dict:
    from trajqa.prompt_codec import load_bundles
    from trajqa.tokenizer import Tokenizer, format_stats_table, stats

    bundles = load_bundles(args.prompts)
    inputs = [b.source_text for b in bundles]
    outputs = [b.answer for b in bundles if b.answer is not None]
    rows = [stats(Tokenizer.load(p), inputs, outputs) for p in args.tokenizer]
    table = format_stats_table(rows)
    print(table)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "tok_stats.json").write_text(json.dumps([r.as_dict() for r in rows], indent=2) + "\n", encoding="utf-8")
    (out / "tok_stats.txt").write_text(table + "\n", encoding="utf-8")
    return {"rows": len(rows)}


def cmd_train(args, file_cfg: dict) -> dict:
    import torch

    from trajqa.prompt_codec import load_bundles
    from trajqa.seq2seq import ModelConfig, Seq2SeqTransformer, TrainConfig, encode_source, encode_target, train
    from trajqa.tokenizer import Tokenizer

    tok = Tokenizer.load(args.tokenizer)
    bundles = load_bundles(args.prompts)
    src_len = max(len(encode_source(tok, b)) for b in bundles)
    tgt_len = max(len(encode_target(tok, b.answer)) for b in bundles)
    mcfg = _dataclass_from(
        ModelConfig,
        {"max_src_len": src_len, "max_tgt_len": tgt_len, **file_cfg.get("model", {})},
        vocab_size=len(tok),
    )
    overrides = {k: v for k, v in {"epochs": args.epochs, "max_seconds": args.max_seconds, "batch_size": args.batch_size}.items() if v is not None}
    tcfg = _dataclass_from(TrainConfig, {**file_cfg.get("train", {}), **overrides}, seed=args.seed, multi_task=not args.forecast_only)
    kept = [
        b for b in bundles if len(encode_source(tok, b)) <= mcfg.max_src_len and len(encode_target(tok, b.answer)) <= mcfg.max_tgt_len
    ]
    if len(kept) < len(bundles):
        log.warning("dropped %d bundles longer than the model limits", len(bundles) - len(kept))
    torch.manual_seed(args.seed)
    model = Seq2SeqTransformer(mcfg)
    ckpt = train(model, kept, tok, tcfg, out_dir=args.out)
    info = {
        "model": asdict(mcfg),
        "train": asdict(tcfg),
        "steps": ckpt.step,
        "final_loss": ckpt.losses[-1] if ckpt.losses else None,
        "dropped_bundles": len(bundles) - len(kept),
        "tokenizer_fingerprint": tok.fingerprint,
    }
    print(json.dumps({k: info[k] for k in ("steps", "final_loss", "dropped_bundles")}))
    return info


def _decode_cfg(args):
    from trajqa.decode import DecodeConfig

    extra = {"seed": args.seed}
    if args.retry_budget is not None:
        extra["retry_budget"] = args.retry_budget
    cfg = DecodeConfig.parse(args.decode, **extra)
    if args.k is not None and cfg.stochastic:
        cfg = DecodeConfig(**{**asdict(cfg), "k": args.k})
    return cfg


def cmd_predict(args) -> dict:
    import torch

    from trajqa.decode import predict_windows
    from trajqa.evaluation import write_dump
    from trajqa.seq2seq import Checkpoint
    from trajqa.tokenizer import Tokenizer

    torch.set_num_threads(max(1, args.threads))
    tok = Tokenizer.load(args.tokenizer)
    ckpt = Checkpoint.load(args.model, tokenizer=tok)
    ckpt.model.eval()
    cfg = _decode_cfg(args)
    windows = _windows_from(args)
    records = predict_windows(ckpt.model, tok, windows, cfg, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dump(records, out / "predictions.jsonl")
    rate = sum(r.fallback for r in records) / len(records) if records else 0.0
    info = {"decode": asdict(cfg), "predictions": len(records), "fallback_rate": rate}
    print(json.dumps({"predictions": len(records), "fallback_rate": rate}))
    return info


def cmd_baseline(args) -> dict:
    from trajqa.baselines import KalmanParams, run_baseline
    from trajqa.evaluation import write_dump

    kp = KalmanParams(args.kalman_q, args.kalman_r, args.kalman_p0)
    windows = _windows_from(args)
    records = run_baseline(windows, args.which, kalman=kp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dump(records, out / "predictions.jsonl")
    print(json.dumps({"predictions": len(records)}))
    return {"kalman": asdict(kp), "predictions": len(records)}


def cmd_zero_shot(args, file_cfg: dict) -> dict:
    from trajqa.llm_client import HttpTransport, ZeroShotConfig, echo_linear_transport, run_benchmark

    section = dict(file_cfg.get("zero_shot", {}))
    for key in ("endpoint", "model_name", "max_concurrency", "retry_budget", "k"):
        v = getattr(args, key, None)
        if v is not None:
            section["model" if key == "model_name" else key] = v
    if args.caption:
        section["caption"] = True
    out = Path(args.out)
    section.setdefault("cache_dir", str(out / "cache"))
    cfg = _dataclass_from(ZeroShotConfig, section)
    windows = _windows_from(args)
    if args.offline_echo:
        transport = echo_linear_transport()
    else:
        transport = HttpTransport(cfg.endpoint, os.environ.get(cfg.api_key_env))
    res = run_benchmark(cfg, windows, transport, out / "predictions.jsonl", out / "failures.jsonl")
    info = {"zero_shot": cfg.to_dict(), "requests": len(res.records) + len(res.failures), "failures": len(res.failures), "skipped": res.skipped}
    print(json.dumps({k: info[k] for k in ("requests", "failures", "skipped")} | {"failure_rate": res.failure_rate}))
    return info


def cmd_eval(args) -> dict:
    from trajqa.evaluation import evaluate, read_dump

    preds = read_dump(args.dump)
    windows = _windows_from(args)
    report = evaluate(preds, windows, k=args.k or 1, mode=args.mode, allow_missing=args.allow_missing)
    if args.tok_stats:
        report.tokenizer_stats = json.loads(Path(args.tok_stats).read_text(encoding="utf-8"))
    if args.run_config:
        import hashlib

        report.config_fingerprint = hashlib.sha256(Path(args.run_config).read_bytes()).hexdigest()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    table = report.table()
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return {"avg_ade": report.avg_ade, "avg_fde": report.avg_fde}


# ---------------------------------------------------------------- parser


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_dataset(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", required=True, help="raw data root (one folder per scene) or a windows .jsonl file")
    p.add_argument("--scene", action="append", help="scene to load; repeatable (default: the five ETH/UCY scenes)")
    p.add_argument("--leave-out", help="held-out scene of a leave-one-out split")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--columns", choices=[c.value for c in Columns], default=Columns.FRAME_AGENT_X_Y.value)
    p.add_argument("--coord-system", choices=[c.value for c in CoordSystem], default=CoordSystem.WORLD_METERS.value)
    p.add_argument("--captions", help="scene<TAB>caption file")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="trajqa", description=__doc__.split("\n")[0])
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="YAML or JSON file of option defaults")
        return p

    p = command("ingest", "raw files -> window files")
    _add_dataset(p)

    p = command("prompts", "windows -> prompt bundles for every task")
    p.add_argument("--windows", required=True)
    p.add_argument("--tasks", nargs="+", help="subset of forecast dest dir mimic group col")
    p.add_argument("--max-agents", type=int, default=None, help="keep only this many nearest agents in each context")
    p.add_argument("--no-caption", action="store_true")
    p.add_argument("--meters-per-unit", type=float, default=1.0, help="coordinate scale for the aux-label thresholds")

    p = command("tok-train", "train a tokenizer on a bundle file")
    p.add_argument("--prompts", required=True)
    p.add_argument("--algo", "--tokenizer", dest="algo", choices=["char", "word", "bpe", "unigram"], default="bpe")
    p.add_argument("--vocab", type=int, default=None, help="vocabulary budget (bpe/unigram)")

    p = command("tok-stats", "tokenizer characteristics table")
    p.add_argument("--prompts", required=True)
    p.add_argument("--tokenizer", nargs="+", required=True, help="tokenizer files")

    p = command("train", "supervised seq2seq training")
    p.add_argument("--prompts", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-seconds", type=float)
    p.add_argument("--forecast-only", action="store_true")

    p = command("predict", "decode forecasts with a trained checkpoint")
    _add_dataset(p)
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--decode", default="beam:2", help="greedy | beam:d | sample:tau,k")
    p.add_argument("--k", type=int)
    p.add_argument("--retry-budget", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--threads", type=int, default=1)

    p = command("baseline", "stop / linear / kalman predictions")
    _add_dataset(p)
    p.add_argument("--which", choices=["stop", "linear", "kalman"], required=True)
    p.add_argument("--kalman-q", type=float, default=1e-2)
    p.add_argument("--kalman-r", type=float, default=1e-1)
    p.add_argument("--kalman-p0", type=float, default=1.0)

    p = command("zero-shot", "query a chat-completion service")
    _add_dataset(p)
    p.add_argument("--endpoint")
    p.add_argument("--model-name")
    p.add_argument("--max-concurrency", type=int)
    p.add_argument("--retry-budget", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--caption", action="store_true")
    p.add_argument("--offline-echo", action="store_true", help="answer locally with the linear extrapolation (dry run)")

    p = command("eval", "ADE/FDE report for a prediction dump")
    _add_dataset(p)
    p.add_argument("--dump", required=True)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--mode", choices=["joint", "independent"], default="joint")
    p.add_argument("--allow-missing", action="store_true")
    p.add_argument("--tok-stats", help="tokenizer stats JSON to attach to the report")
    p.add_argument("--run-config", help="config.json of the producing run, fingerprinted into the report")
    return ap


def _apply_file_defaults(parser: argparse.ArgumentParser, argv) -> tuple[argparse.Namespace, dict]:
    """Parse ``argv`` with option defaults taken from ``--config``; flags still win."""
    argv = sys.argv[1:] if argv is None else list(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    config_path = pre.parse_known_args(argv)[0].config
    command = next((a for a in argv if a in COMMANDS), None)
    if not config_path or command is None:
        return parser.parse_args(argv), {}
    file_cfg = load_config_file(config_path)
    flat = {k.replace("-", "_"): v for k, v in file_cfg.items() if k not in _SECTIONS}
    sub = parser._subparsers._group_actions[0].choices[command]
    known = {a.dest for a in sub._actions}
    unknown = set(flat) - known
    if unknown:
        raise ValueError(f"unknown config keys for {command}: {sorted(unknown)}")
    sub.set_defaults(**flat)
    for action in sub._actions:
        if action.dest in flat:
            action.required = False
    return parser.parse_args(argv), file_cfg


COMMANDS = {
    "ingest": cmd_ingest,
    "prompts": cmd_prompts,
    "tok-train": cmd_tok_train,
    "tok-stats": cmd_tok_stats,
    "train": cmd_train,
    "predict": cmd_predict,
    "baseline": cmd_baseline,
    "zero-shot": cmd_zero_shot,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, file_cfg = _apply_file_defaults(parser, argv)
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        fn = COMMANDS[args.command]
        info = fn(args, file_cfg) if args.command in ("train", "zero-shot") else fn(args)
        resolved = {"command": args.command, "options": {k: v for k, v in vars(args).items() if k != "config"}}
        if file_cfg:
            resolved["config_file"] = file_cfg
        resolved["result"] = info
        _write_config(Path(args.out), resolved)
        return 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes a structured error
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1


if __name__ == "__main__":
    sys.exit(main())
