"""Shared builders for the test suite."""
from __future__ import annotations

import numpy as np

from trajqa.dataset import CoordSystem, TrajectoryWindow
from trajqa.tokenizer import BOS_ID, EOS_ID


def random_window(rng: np.random.Generator, n_agents: int | None = None, coord_system=CoordSystem.WORLD_METERS, scale: float | None = None):
    """Random walkers with per-agent drift; meters or pixels."""
    n = int(rng.integers(1, 6)) if n_agents is None else n_agents
    pixel = CoordSystem(coord_system) is CoordSystem.PIXEL
    scale = scale if scale is not None else (40.0 if pixel else 1.0)
    start = rng.uniform(-10, 10, size=(n, 1, 2)) * scale
    vel = rng.normal(0, 0.5, size=(n, 1, 2)) * scale
    steps = np.arange(20)[None, :, None]
    noise = rng.normal(0, 0.05, size=(n, 20, 2)) * scale
    return TrajectoryWindow("rand", start + steps * vel + noise, coord_system=coord_system, frame=int(rng.integers(0, 10_000)))


def window_from_tracks(tracks, **kw) -> TrajectoryWindow:
    return TrajectoryWindow(kw.pop("scene_id", "toy"), np.asarray(tracks, dtype=float), **kw)


def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


class TableModel:
    """Language model whose next-token logits are fixed random draws per prefix.

    Logits for a prefix come from a generator seeded by (seed, prefix), so
    the model is a pure function of the prefix. ``bias`` is added to EOS to
    make sequences terminate sooner.
    """

    def __init__(self, vocab: int, seed: int, scale: float = 2.0, eos_bias: float = 0.0, banned=(0, 1, BOS_ID)):
        self.vocab, self.seed, self.scale, self.eos_bias = vocab, seed, scale, eos_bias
        self.banned = [b for b in banned if b < vocab]
        self.calls = 0

    def row(self, prefix) -> np.ndarray:
        rng = np.random.default_rng([self.seed, len(prefix), *prefix])
        out = rng.normal(0, self.scale, self.vocab)
        out[EOS_ID] += self.eos_bias
        out[self.banned] = -np.inf
        return out

    def __call__(self, prefixes):
        self.calls += 1
        return np.array([self.row(p) for p in prefixes])


def sequence_logprob(model, tokens, complete: bool) -> float:
    """Exact score of a sequence by direct evaluation of the model."""
    from trajqa.decode import log_softmax

    prefix = [BOS_ID]
    total = 0.0
    for t in list(tokens) + ([EOS_ID] if complete else []):
        total += float(log_softmax(model([prefix]))[0, t])
        prefix = prefix + [t]
    return total


def _layer_type(name: str) -> str:
    if name.startswith("embed"):
        return "embedding"
    if "norm" in name:
        return "normalization"
    if "attn" in name:
        return "attention"
    if "ffn" in name:
        return "feed_forward"
    return "output"


def gradient_check_errors(seed: int = 7, per_type: int = 24, eps: float = 1e-5, floor: float = 1e-6) -> dict[str, list[float]]:
    """Relative errors between autograd and central differences, grouped by layer type.

    Uses a float64 transformer with two encoder and two decoder layers on a
    padded toy batch. LayerNorm parameters are first moved off their
    identity initialisation so their gradients are generic.

    The error is ``|num - ana| / max(|num|, |ana|, floor)``. Central
    differences carry roundoff of about ``ulp(loss) / eps`` (~5e-11 here), so
    gradients much smaller than ``floor`` (some are exactly zero, e.g. key
    biases, which softmax cancels) are compared on an absolute scale.
    """
    import torch

    from trajqa.seq2seq import ModelConfig, Seq2SeqTransformer, sequence_loss
    from trajqa.tokenizer import PAD_ID

    rng = np.random.default_rng(seed)
    torch.manual_seed(0)
    cfg = ModelConfig(11, d_model=16, n_heads=2, n_enc_layers=2, n_dec_layers=2, ffn_dim=24, max_src_len=32, max_tgt_len=16, dropout=0.0)
    m = Seq2SeqTransformer(cfg).double().eval()
    with torch.no_grad():
        for name, p in m.named_parameters():
            if "norm" in name:
                p.add_(torch.tensor(rng.normal(0, 0.3, p.shape)))
    src = torch.tensor(rng.integers(4, 11, size=(3, 7)))
    src[0, 5:] = PAD_ID
    tgt = torch.tensor(rng.integers(4, 11, size=(3, 6)))
    tgt[:, 0] = BOS_ID
    tgt[1, 4:] = PAD_ID
    dec_in, dec_out = tgt[:, :-1], tgt[:, 1:]

    def loss():
        return sequence_loss(m, src, dec_in, dec_out)

    m.zero_grad()
    loss().backward()
    groups: dict[str, list] = {}
    for name, p in m.named_parameters():
        for flat in range(p.numel()):
            groups.setdefault(_layer_type(name), []).append((p, flat))
    errors: dict[str, list[float]] = {}
    for kind, items in groups.items():
        for i in rng.choice(len(items), size=min(per_type, len(items)), replace=False):
            p, flat = items[i]
            idx = np.unravel_index(flat, p.shape)
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + eps
                up = loss().item()
                p[idx] = orig - eps
                down = loss().item()
                p[idx] = orig
            numeric = (up - down) / (2 * eps)
            analytic = p.grad[idx].item()
            errors.setdefault(kind, []).append(abs(numeric - analytic) / max(abs(numeric), abs(analytic), floor))
    return errors
