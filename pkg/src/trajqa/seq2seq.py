"""Encoder-decoder transformer trained with token-level cross-entropy on prompt bundles.

Checkpoints are safetensors files: a little-endian u64 header length, a JSON
header listing every tensor (name, dtype, shape, byte offsets, row-major
data), then the raw tensor bytes. The header's ``__metadata__`` has a single
``trajqa`` entry: a key-sorted JSON object with ``format``, ``model_config``,
``train_config``, ``tokenizer_fingerprint``, ``step`` and the optimizer's
param groups. One entry keeps the header byte-stable, since the writer does
not preserve the order of metadata keys. Model weights are
stored under ``model.<name>``; AdamW moments under
``optim.<param index>.<exp_avg|exp_avg_sq|step>``.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import load_file, save_file

from trajqa.prompt_codec import PromptBundle, Task
from trajqa.tokenizer import BOS_ID, EOS_ID, PAD_ID, Tokenizer

log = logging.getLogger(__name__)


class SequenceTooLongError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointMismatchError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_enc_layers: int = 3
    n_dec_layers: int = 3
    ffn_dim: int = 512
    max_src_len: int = 1024
    max_tgt_len: int = 256
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 10
    seed: int = 0
    grad_clip: float = 1.0
    warmup_steps: int = 0
    multi_task: bool = True
    max_seconds: float | None = None
    log_every: int = 10

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


def sinusoidal_table(n_pos: int, d_model: int) -> torch.Tensor:
    pos = torch.arange(n_pos, dtype=torch.float64)[:, None]
    i = torch.arange(0, d_model, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d_model)
    table = torch.zeros(n_pos, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : d_model // 2])
    return table


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)

    def _split(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.d_head).transpose(1, 2)

    def project_kv(self, mem):
        """Split key/value projections of ``mem``, reusable across decoding steps."""
        return self._split(self.k(mem)), self._split(self.v(mem))

    def forward(self, x, mem, mask=None, kv=None):
        """``mask`` broadcasts to (B, H, Tq, Tk); True marks blocked keys.

        ``kv`` replaces the projections of ``mem`` when already computed.
        """
        q = self._split(self.q(x))
        k, v = kv if kv is not None else self.project_kv(mem)
        # softmax(q k^T / sqrt(d_head)) v with blocked keys at -inf, via the fused kernel
        p = self.drop.p if self.training else 0.0
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=None if mask is None else ~mask, dropout_p=p)
        return self.o(out.transpose(1, 2).reshape(x.shape))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, ffn_dim)
        self.fc2 = nn.Linear(ffn_dim, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.drop(F.gelu(self.fc1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, pad_mask):
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, pad_mask))
        return x + self.drop(self.ffn(self.norm2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, y, mem, causal_mask, mem_mask, cross_kv=None, past=None):
        """Returns the layer output and the self-attention (key, value) of every position.

        With ``past`` (keys/values of earlier positions), ``y`` holds only the
        new positions and attends to ``past`` plus itself.
        """
        h = self.norm1(y)
        k, v = self.self_attn.project_kv(h)
        if past is not None:
            k, v = torch.cat([past[0], k], dim=2), torch.cat([past[1], v], dim=2)
        y = y + self.drop(self.self_attn(h, None, causal_mask, (k, v)))
        y = y + self.drop(self.cross_attn(self.norm2(y), mem, mem_mask, cross_kv))
        return y + self.drop(self.ffn(self.norm3(y))), (k, v)


class Seq2SeqTransformer(nn.Module):
    """Pre-norm encoder-decoder with shared token embeddings and a bias-free output head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model, padding_idx=PAD_ID)
        self.register_buffer(
            "pos_table", sinusoidal_table(max(cfg.max_src_len, cfg.max_tgt_len), cfg.d_model).float(), persistent=False
        )
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_enc_layers))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_dec_layers))
        self.enc_norm = nn.LayerNorm(cfg.d_model)
        self.dec_norm = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.drop = nn.Dropout(cfg.dropout)
        self.apply(self._init)

    @staticmethod
    def _init(m):
        if isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, std=m.embedding_dim**-0.5)

    def _embed(self, ids):
        x = self.embed(ids) * math.sqrt(self.cfg.d_model)
        return self.drop(x + self.pos_table[: ids.shape[1]].to(x.dtype))

    def encode(self, src_ids: torch.Tensor):
        if src_ids.shape[1] > self.cfg.max_src_len:
            raise SequenceTooLongError(f"source length {src_ids.shape[1]} exceeds max_src_len={self.cfg.max_src_len}")
        pad = (src_ids == PAD_ID)[:, None, None, :]
        x = self._embed(src_ids)
        for layer in self.encoder:
            x = layer(x, pad)
        return self.enc_norm(x), pad

    def decode(self, mem, mem_mask, tgt_ids: torch.Tensor, cross_kv=None, return_kv: bool = False):
        """Next-token logits for ``tgt_ids``; ``cross_kv`` holds per-layer memory projections."""
        t = tgt_ids.shape[1]
        if t > self.cfg.max_tgt_len:
            raise SequenceTooLongError(f"target length {t} exceeds max_tgt_len={self.cfg.max_tgt_len}")
        causal = torch.triu(torch.ones(t, t, dtype=torch.bool, device=tgt_ids.device), diagonal=1)
        y = self._embed(tgt_ids)
        self_kv = []
        for i, layer in enumerate(self.decoder):
            y, kv = layer(y, mem, causal, mem_mask, cross_kv[i] if cross_kv is not None else None)
            self_kv.append(kv)
        logits = self.head(self.dec_norm(y))
        return (logits, self_kv) if return_kv else logits

    def _decode_next(self, last_ids: torch.Tensor, mem, mem_mask, cross_kv, past):
        """Logits after appending ``last_ids`` (B, 1) to prefixes whose keys/values are ``past``."""
        t = past[0][0].shape[2] + 1
        if t > self.cfg.max_tgt_len:
            raise SequenceTooLongError(f"target length {t} exceeds max_tgt_len={self.cfg.max_tgt_len}")
        y = self.embed(last_ids) * math.sqrt(self.cfg.d_model) + self.pos_table[t - 1 : t].to(mem.dtype)
        self_kv = []
        for layer, ckv, pkv in zip(self.decoder, cross_kv, past):
            y, kv = layer(y, mem, None, mem_mask, ckv, pkv)
            self_kv.append(kv)
        return self.head(self.dec_norm(y))[:, -1], self_kv

    def forward(self, src_ids: torch.Tensor, tgt_ids: torch.Tensor) -> torch.Tensor:
        """Next-token logits, shape (B, T_tgt, vocab)."""
        mem, mem_mask = self.encode(src_ids)
        return self.decode(mem, mem_mask, tgt_ids)

    def step_fn(self, src_ids: Sequence[int], banned: Sequence[int] = (PAD_ID, BOS_ID)) -> Callable:
        """Bind one source sequence; returns prefixes -> next-token logits (numpy, float64).

        Every prefix passed in one call must have the same length and start
        with BOS. ``banned`` ids get -inf logits. Decoder keys/values of the
        prefixes seen in the previous call are kept, so extending them by one
        token costs one position; other prefixes are decoded in full.
        """
        was_training = self.training
        self.eval()
        with torch.no_grad():
            src = torch.tensor([list(src_ids)], dtype=torch.long)
            mem, mem_mask = self.encode(src)
            cross_kv = [layer.cross_attn.project_kv(mem) for layer in self.decoder]
        if was_training:
            self.train()
        banned = list(banned)
        cache: dict[tuple, list] = {}

        def logits(prefixes):
            nonlocal cache
            training = self.training
            if training:
                self.eval()
            keys = [tuple(p) for p in prefixes]
            b = len(keys)
            ckv = [(k.expand(b, -1, -1, -1), v.expand(b, -1, -1, -1)) for k, v in cross_kv]
            mask = mem_mask.expand(b, -1, -1, -1)
            with torch.no_grad():
                parents = [cache.get(k[:-1]) for k in keys]
                if len(keys[0]) > 1 and all(p is not None for p in parents):
                    past = [
                        (torch.stack([p[i][0] for p in parents]), torch.stack([p[i][1] for p in parents]))
                        for i in range(len(self.decoder))
                    ]
                    last = torch.tensor([[k[-1]] for k in keys], dtype=torch.long)
                    out, kv = self._decode_next(last, mem, mask, ckv, past)
                else:
                    tgt = torch.tensor(prefixes, dtype=torch.long)
                    full, kv = self.decode(mem, mask, tgt, ckv, return_kv=True)
                    out = full[:, -1]
                cache = {k: [(lk[j], lv[j]) for lk, lv in kv] for j, k in enumerate(keys)}
                out = out.double().numpy().copy()
            if training:
                self.train()
            if banned:
                out[:, banned] = -np.inf
            return out

        return logits


# ---------------------------------------------------------------- data


def encode_source(tok: Tokenizer, bundle: PromptBundle) -> list[int]:
    return tok.encode(bundle.source_text) + [EOS_ID]


def encode_target(tok: Tokenizer, answer: str) -> list[int]:
    return [BOS_ID] + tok.encode(answer) + [EOS_ID]


def collate(pairs: Sequence[tuple[list[int], list[int]]]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pad a batch; returns (src, decoder input, decoder target)."""
    s_len = max(len(s) for s, _ in pairs)
    t_len = max(len(t) for _, t in pairs) - 1
    src = torch.full((len(pairs), s_len), PAD_ID, dtype=torch.long)
    dec_in = torch.full((len(pairs), t_len), PAD_ID, dtype=torch.long)
    dec_out = torch.full((len(pairs), t_len), PAD_ID, dtype=torch.long)
    for i, (s, t) in enumerate(pairs):
        src[i, : len(s)] = torch.tensor(s)
        dec_in[i, : len(t) - 1] = torch.tensor(t[:-1])
        dec_out[i, : len(t) - 1] = torch.tensor(t[1:])
    return src, dec_in, dec_out


def sequence_loss(model: Seq2SeqTransformer, src, dec_in, dec_out) -> torch.Tensor:
    """Mean token cross-entropy over non-pad target positions."""
    logits = model(src, dec_in)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), dec_out.reshape(-1), ignore_index=PAD_ID)


def task_balanced_order(tasks: Sequence[Task], rng: np.random.Generator) -> list[int]:
    """Indices shuffled within each task, then interleaved round-robin across tasks.

    Every batch therefore draws tasks as evenly as the data allows.
    """
    groups: dict[Task, list[int]] = {}
    for i, t in enumerate(tasks):
        groups.setdefault(Task(t), []).append(i)
    lists = []
    for t in sorted(groups, key=lambda t: t.value):
        idx = np.array(groups[t])
        lists.append(list(idx[rng.permutation(len(idx))]))
    order_of_tasks = rng.permutation(len(lists))
    out = []
    pos = [0] * len(lists)
    while len(out) < len(tasks):
        for j in order_of_tasks:
            if pos[j] < len(lists[j]):
                out.append(int(lists[j][pos[j]]))
                pos[j] += 1
    return out


# ---------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    model: Seq2SeqTransformer
    model_config: ModelConfig
    tokenizer_fingerprint: str
    step: int = 0
    train_config: TrainConfig | None = None
    optimizer_state: dict | None = None
    losses: list[float] = field(default_factory=list)

    def save(self, path) -> None:
        tensors = {f"model.{k}": v.detach().contiguous().cpu() for k, v in self.model.state_dict().items()}
        groups = []
        if self.optimizer_state is not None:
            for idx, st in self.optimizer_state["state"].items():
                for name, val in st.items():
                    tensors[f"optim.{idx}.{name}"] = torch.as_tensor(val).detach().clone().contiguous()
            groups = self.optimizer_state["param_groups"]
        meta = {
            "format": "trajqa-checkpoint-1",
            "model_config": asdict(self.model_config),
            "train_config": asdict(self.train_config) if self.train_config else None,
            "tokenizer_fingerprint": self.tokenizer_fingerprint,
            "step": self.step,
            "param_groups": groups,
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        save_file(tensors, str(path), metadata={"trajqa": json.dumps(meta, sort_keys=True)})

    @classmethod
    def load(cls, path, tokenizer: Tokenizer | None = None) -> "Checkpoint":
        from safetensors import safe_open

        with safe_open(str(path), framework="pt") as fh:
            meta = json.loads((fh.metadata() or {}).get("trajqa", "{}"))
        if meta.get("format") != "trajqa-checkpoint-1":
            raise CheckpointMismatchError(f"{path} is not a trajqa checkpoint")
        tensors = load_file(str(path))
        mcfg = ModelConfig(**meta["model_config"])
        fp = meta["tokenizer_fingerprint"]
        if tokenizer is not None and tokenizer.fingerprint != fp:
            raise CheckpointMismatchError(
                f"tokenizer fingerprint {tokenizer.fingerprint[:12]} does not match checkpoint {fp[:12]}"
            )
        model = Seq2SeqTransformer(mcfg)
        dtype = next(iter(tensors.values())).dtype if tensors else torch.float32
        model.to(dtype)
        model.load_state_dict({k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")})
        state: dict[int, dict] = {}
        for k, v in tensors.items():
            if k.startswith("optim."):
                _, idx, name = k.split(".", 2)
                state.setdefault(int(idx), {})[name] = v
        groups = meta.get("param_groups") or []
        opt_state = {"state": state, "param_groups": groups} if groups else None
        tcfg = TrainConfig(**meta["train_config"]) if meta.get("train_config") else None
        return cls(model, mcfg, fp, int(meta["step"]), tcfg, opt_state)


# ---------------------------------------------------------------- training


def _make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def _lr_at(step: int, cfg: TrainConfig) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    return cfg.learning_rate


def _step_seed(seed: int, step: int) -> int:
    return (seed * 1_000_003 + step) % (2**63 - 1)


def encode_bundles(tok: Tokenizer, bundles: Sequence[PromptBundle]) -> list[tuple[list[int], list[int]]]:
    pairs = []
    for b in bundles:
        if b.answer is None:
            raise ValueError("training bundles need answers")
        pairs.append((encode_source(tok, b), encode_target(tok, b.answer)))
    return pairs


def train(
    model: Seq2SeqTransformer,
    bundles: Sequence[PromptBundle],
    tokenizer: Tokenizer,
    cfg: TrainConfig,
    out_dir=None,
    resume: Checkpoint | None = None,
    max_steps: int | None = None,
) -> Checkpoint:
    """Train with AdamW on teacher-forced cross-entropy.

    Batch order depends only on (seed, epoch) and dropout noise only on
    (seed, step), so resuming from a checkpoint continues the same run.
    Per-step losses go to ``out_dir/loss.jsonl`` and the final checkpoint to
    ``out_dir/checkpoint.safetensors`` when ``out_dir`` is given.
    """
    if not cfg.multi_task:
        bundles = [b for b in bundles if Task(b.task) is Task.FORECAST]
    if not bundles:
        raise ValueError("no training bundles")
    pairs = encode_bundles(tokenizer, bundles)
    tasks = [Task(b.task) for b in bundles]
    n_batches = math.ceil(len(pairs) / cfg.batch_size)

    opt = _make_optimizer(model, cfg)
    step = 0
    if resume is not None:
        step = resume.step
        if resume.optimizer_state is not None:
            opt.load_state_dict(resume.optimizer_state)
    out = Path(out_dir) if out_dir is not None else None
    loss_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        loss_fh = open(out / "loss.jsonl", "a" if resume is not None else "w", encoding="utf-8")

    losses: list[float] = []
    t0 = time.monotonic()
    total_steps = cfg.epochs * n_batches if max_steps is None else min(max_steps, cfg.epochs * n_batches)
    model.train()
    try:
        while step < total_steps:
            epoch, b_idx = divmod(step, n_batches)
            order = task_balanced_order(tasks, np.random.default_rng([cfg.seed, epoch]))
            batch = [pairs[i] for i in order[b_idx * cfg.batch_size : (b_idx + 1) * cfg.batch_size]]
            src, dec_in, dec_out = collate(batch)
            torch.manual_seed(_step_seed(cfg.seed, step))
            for g in opt.param_groups:
                g["lr"] = _lr_at(step, cfg)
            loss = sequence_loss(model, src, dec_in, dec_out)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became {loss.item()} at step {step} (epoch {epoch}); last losses: {losses[-5:]}"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            gnorm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            lv = float(loss.item())
            losses.append(lv)
            if loss_fh is not None:
                loss_fh.write(json.dumps({"step": step, "epoch": epoch, "loss": lv, "grad_norm": float(gnorm)}) + "\n")
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d epoch %d loss %.4f", step, epoch, lv)
            step += 1
            if cfg.max_seconds is not None and time.monotonic() - t0 > cfg.max_seconds:
                log.info("time budget reached after %d steps", step)
                break
    finally:
        if loss_fh is not None:
            loss_fh.close()

    ckpt = Checkpoint(model, model.cfg, tokenizer.fingerprint, step, cfg, opt.state_dict(), losses)
    if out is not None:
        ckpt.save(out / "checkpoint.safetensors")
    return ckpt


def teacher_forced_loss(model: Seq2SeqTransformer, tok: Tokenizer, bundles: Sequence[PromptBundle]) -> float:
    model.eval()
    with torch.no_grad():
        return float(sequence_loss(model, *collate(encode_bundles(tok, bundles))).item())
