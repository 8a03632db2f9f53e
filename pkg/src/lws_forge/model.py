"""Decoder-only transformer whose layers may all have different widths.

Every block is pre-norm: RMSNorm, grouped-query attention with per-head
QK-norm and RoPE, residual add, RMSNorm, SwiGLU FFN, residual add.  Layer
``i`` takes its query-head count and FFN width from ``config.profiles[i]``;
the KV-head count and head size are shared by all layers.  There are no
biases and no dropout.

Weights follow the ``x @ W`` convention, so ``wq`` is ``(d_model, n_heads *
head_dim)`` and ``lm_head`` is ``(d_model, vocab)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .budget import ModelConfig
from .errors import InvalidArgumentError, InvalidInputError, TrainingDivergenceError
from .profiles import LayerProfile

INIT_STD = 0.02
NORM_EPS = 1e-6
ROPE_BASE = 10000.0

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_TENSORS = "weights.f32"


@dataclass
class Batch:
    inputs: torch.Tensor  # (batch, seq) int64
    targets: torch.Tensor  # (batch, seq) int64, inputs shifted left by one

    def __post_init__(self) -> None:
        if self.inputs.shape != self.targets.shape or self.inputs.dim() != 2:
            raise InvalidInputError(
                f"inputs and targets must both be (batch, seq); got {tuple(self.inputs.shape)} "
                f"and {tuple(self.targets.shape)}"
            )

    @property
    def n_tokens(self) -> int:
        return self.targets.numel()


def rms_norm(x: torch.Tensor, weight: torch.Tensor | None = None, eps: float = NORM_EPS) -> torch.Tensor:
    y = x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps)
    return y if weight is None else y * weight


def rope_tables(seq_len: int, head_dim: int, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables of shape (seq_len, head_dim) for the rotate-half layout."""
    if head_dim % 2:
        raise InvalidArgumentError(f"RoPE needs an even head_dim, got {head_dim}")
    inv_freq = 1.0 / ROPE_BASE ** (torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    angles = torch.outer(torch.arange(seq_len, dtype=torch.float64), inv_freq)
    angles = torch.cat((angles, angles), dim=-1)
    return angles.cos().to(dtype), angles.sin().to(dtype)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate ``x`` of shape (..., seq, head_dim) position by position."""
    half = x.shape[-1] // 2
    rotated = torch.cat((-x[..., half:], x[..., :half]), dim=-1)
    return x * cos + rotated * sin


def causal_mask(seq_len: int, device=None) -> torch.Tensor:
    return torch.ones(seq_len, seq_len, dtype=torch.bool, device=device).triu(1)


def grouped_attention(q, k, v, mask, cache=None):
    """Causal attention of (B, H, T, dh) queries over (B, G, T, dh) keys/values.

    Query heads ``g*r .. g*r + r - 1`` (``r = H // G``) share KV head ``g``.
    Scores are normalized in float64 before casting back.
    """
    B, H, T, dh = q.shape
    G = k.shape[1]
    r = H // G
    scores = (q.reshape(B, G, r, T, dh) @ k.unsqueeze(2).transpose(-1, -2)) / math.sqrt(dh)
    scores = scores.masked_fill(mask, float("-inf"))
    probs = torch.softmax(scores, dim=-1, dtype=torch.float64).to(q.dtype)
    if cache is not None:
        cache.setdefault("attn_probs", []).append(probs.detach().reshape(B, H, T, T))
    return (probs @ v.unsqueeze(2)).reshape(B, H, T, dh)


class Block(nn.Module):
    def __init__(self, d_model: int, profile: LayerProfile):
        super().__init__()
        self.profile = profile
        q_dim, kv_dim, ffn = profile.q_dim, profile.kv_dim, profile.ffn_dim
        self.attn_norm = nn.Parameter(torch.ones(d_model))
        self.wq = nn.Parameter(torch.empty(d_model, q_dim))
        self.wk = nn.Parameter(torch.empty(d_model, kv_dim))
        self.wv = nn.Parameter(torch.empty(d_model, kv_dim))
        self.wo = nn.Parameter(torch.empty(q_dim, d_model))
        self.q_norm = nn.Parameter(torch.ones(q_dim))
        self.k_norm = nn.Parameter(torch.ones(kv_dim))
        self.ffn_norm = nn.Parameter(torch.ones(d_model))
        self.w_gate = nn.Parameter(torch.empty(d_model, ffn))
        self.w_up = nn.Parameter(torch.empty(d_model, ffn))
        self.w_down = nn.Parameter(torch.empty(ffn, d_model))

    def attention(self, x, cos, sin, mask, cache=None, fused=True):
        p = self.profile
        B, T, _ = x.shape
        H, G, dh = p.n_heads, p.n_kv_heads, p.head_dim
        h = rms_norm(x, self.attn_norm)
        q = (h @ self.wq).view(B, T, H, dh)
        k = (h @ self.wk).view(B, T, G, dh)
        v = (h @ self.wv).view(B, T, G, dh)
        # QK-norm per head over head_dim, each head with its own weights.
        q = rms_norm(q, self.q_norm.view(H, dh))
        k = rms_norm(k, self.k_norm.view(G, dh))
        q = apply_rope(q.transpose(1, 2), cos, sin)  # (B, H, T, dh)
        k = apply_rope(k.transpose(1, 2), cos, sin)  # (B, G, T, dh)
        v = v.transpose(1, 2)
        if cache is None and fused:
            out = F.scaled_dot_product_attention(q, k, v, is_causal=True, enable_gqa=True)
        else:
            out = grouped_attention(q, k, v, mask, cache)
        return out.transpose(1, 2).reshape(B, T, H * dh) @ self.wo

    def ffn(self, x):
        h = rms_norm(x, self.ffn_norm)
        return (F.silu(h @ self.w_gate) * (h @ self.w_up)) @ self.w_down

    def forward(self, x, cos, sin, mask, cache=None, fused=True):
        x = x + self.attention(x, cos, sin, mask, cache, fused)
        x = x + self.ffn(x)
        if cache is not None:
            cache.setdefault("hidden", []).append(x.detach())
        return x


class Transformer(nn.Module):
    """The weights of one heterogeneous decoder-only model."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d, V = config.d_model, config.vocab_size
        self.embedding = nn.Parameter(torch.empty(V, d))
        self.layers = nn.ModuleList(Block(d, p) for p in config.profiles)
        self.final_norm = nn.Parameter(torch.ones(d))
        self.lm_head = None if config.tie_embeddings else nn.Parameter(torch.empty(d, V))
        # The fused kernel is used only when no activation cache is requested.
        self.fused_attention = True

    @property
    def dtype(self) -> torch.dtype:
        return self.embedding.dtype

    def check_tokens(self, tokens: torch.Tensor) -> None:
        if tokens.dtype not in (torch.int64, torch.int32, torch.int16, torch.uint8):
            raise InvalidInputError(f"token ids must be integers, got {tokens.dtype}")
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.config.vocab_size):
            raise InvalidInputError(
                f"token ids must lie in [0, {self.config.vocab_size}), "
                f"got range [{int(tokens.min())}, {int(tokens.max())}]"
            )
        if tokens.shape[-1] > self.config.max_seq_len:
            raise InvalidInputError(
                f"sequence length {tokens.shape[-1]} exceeds max_seq_len {self.config.max_seq_len}"
            )

    def forward(self, tokens: torch.Tensor, cache: dict | None = None) -> torch.Tensor:
        self.check_tokens(tokens)
        tokens = tokens.long()
        T = tokens.shape[-1]
        cos, sin = rope_tables(T, self.config.head_dim, self.dtype)
        mask = causal_mask(T)
        x = self.embedding[tokens]
        for layer in self.layers:
            x = layer(x, cos, sin, mask, cache, self.fused_attention)
        x = rms_norm(x, self.final_norm)
        head = self.embedding.T if self.lm_head is None else self.lm_head
        return x @ head


def init_model(config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> Transformer:
    """Fresh weights: truncated normal (std 0.02, cut at 3 std) for matrices, ones for norms."""
    model = Transformer(config)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, p in model.named_parameters():
            if p.dim() >= 2:
                nn.init.trunc_normal_(p, std=INIT_STD, a=-3 * INIT_STD, b=3 * INIT_STD, generator=gen)
            else:
                p.fill_(1.0)
    return model.to(dtype)


def forward(model: Transformer, tokens: torch.Tensor) -> tuple[torch.Tensor, dict]:
    """Logits of shape (batch, seq, vocab) plus per-layer activations.

    The cache holds ``attn_probs`` (one (batch, heads, seq, seq) tensor per
    layer) and ``hidden`` (the residual stream after every block).
    """
    cache: dict = {}
    logits = model(tokens, cache=cache)
    return logits, cache


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1).long())


def batch_loss(model: Transformer, batch: Batch) -> torch.Tensor:
    model.check_tokens(batch.targets)
    return cross_entropy(model(batch.inputs), batch.targets)


def loss_and_grads(model: Transformer, batch: Batch) -> tuple[float, dict[str, torch.Tensor]]:
    """Mean next-token cross-entropy and its gradient for every named weight."""
    model.zero_grad(set_to_none=True)
    loss = batch_loss(model, batch)
    loss.backward()
    grads = {
        name: (p.grad if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }
    return loss.item(), grads


def sample_weight_indices(model: Transformer, n: int, seed: int = 0) -> list[tuple[str, int]]:
    """``n`` (parameter name, flat index) pairs drawn uniformly over all scalar weights."""
    names = [name for name, _ in model.named_parameters()]
    sizes = np.array([p.numel() for _, p in model.named_parameters()])
    offsets = np.concatenate(([0], np.cumsum(sizes)))
    rng = np.random.default_rng(seed)
    flat = rng.choice(int(offsets[-1]), size=n, replace=False)
    out = []
    for f in sorted(flat.tolist()):
        k = int(np.searchsorted(offsets, f, side="right")) - 1
        out.append((names[k], int(f - offsets[k])))
    return out


def finite_diff_check(
    model: Transformer,
    batch: Batch,
    sample_indices: Sequence[tuple[str, int]],
    epsilon: float = 1e-4,
) -> float:
    """Largest relative gap between backprop and central-difference gradients.

    Runs in double precision only; the relative error of one sample is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if model.dtype != torch.float64:
        raise InvalidArgumentError("finite_diff_check needs a float64 model")
    if not 1e-6 <= epsilon <= 1e-3:
        raise InvalidArgumentError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    _, grads = loss_and_grads(model, batch)
    params = dict(model.named_parameters())
    worst = 0.0
    with torch.no_grad():
        for name, idx in sample_indices:
            flat = params[name].view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + epsilon
            up = batch_loss(model, batch).item()
            flat[idx] = orig - epsilon
            down = batch_loss(model, batch).item()
            flat[idx] = orig
            numeric = (up - down) / (2 * epsilon)
            analytic = grads[name].reshape(-1)[idx].item()
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# -- optimizer ---------------------------------------------------------------


@dataclass
class OptState:
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


def init_opt_state(model: Transformer) -> OptState:
    state = OptState()
    for name, p in model.named_parameters():
        state.exp_avg[name] = torch.zeros_like(p)
        state.exp_avg_sq[name] = torch.zeros_like(p)
    return state


def decays(name: str, p: torch.Tensor) -> bool:
    """Weight decay applies to projection matrices only, not norms or the embedding."""
    return p.dim() >= 2 and name != "embedding"


def adamw_step(
    model: Transformer,
    grads: dict[str, torch.Tensor],
    state: OptState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.95,
    eps: float = 1e-8,
    weight_decay: float = 0.1,
) -> tuple[Transformer, OptState]:
    """One AdamW update, in place on ``model`` and ``state`` (both are returned)."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise TrainingDivergenceError(f"non-finite gradient in {name} at step {state.step + 1}")
    state.step += 1
    t = state.step
    bc1 = 1 - beta1**t
    bc2 = 1 - beta2**t
    with torch.no_grad():
        for name, p in model.named_parameters():
            g = grads[name]
            m = state.exp_avg[name].mul_(beta1).add_(g, alpha=1 - beta1)
            v = state.exp_avg_sq[name].mul_(beta2).addcmul_(g, g, value=1 - beta2)
            if weight_decay and decays(name, p):
                p.mul_(1 - lr * weight_decay)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return model, state


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(model: Transformer, directory: str | Path, step: int, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus one little-endian float32 blob holding every tensor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index, offset = [], 0
    with open(directory / CHECKPOINT_TENSORS, "wb") as fh:
        for name, p in model.named_parameters():
            arr = p.detach().cpu().numpy().astype("<f4", copy=False)
            fh.write(np.ascontiguousarray(arr).tobytes())
            index.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    manifest = {
        "format": "lws-forge-checkpoint/1",
        "dtype": "float32-le",
        "step": step,
        "config": model.config.to_dict(),
        "tensors": index,
        "data_file": CHECKPOINT_TENSORS,
        "total_bytes": offset,
    }
    if extra:
        manifest["extra"] = extra
    (directory / CHECKPOINT_MANIFEST).write_text(json.dumps(manifest, indent=2))
    return directory


def load_checkpoint(directory: str | Path, dtype: torch.dtype = torch.float32) -> tuple[Transformer, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / CHECKPOINT_MANIFEST).read_text())
    config = ModelConfig.from_dict(manifest["config"])
    model = Transformer(config)
    blob = np.fromfile(directory / manifest["data_file"], dtype="<f4")
    params = dict(model.named_parameters())
    if set(params) != {t["name"] for t in manifest["tensors"]}:
        raise InvalidArgumentError(f"checkpoint tensors do not match the model in {directory}")
    with torch.no_grad():
        for t in manifest["tensors"]:
            start = t["offset"] // 4
            count = int(np.prod(t["shape"])) if t["shape"] else 1
            arr = blob[start : start + count].reshape(t["shape"])
            params[t["name"]].copy_(torch.from_numpy(arr.astype(np.float32)))
    return model.to(dtype), manifest


def n_params(model: Transformer) -> int:
    return sum(p.numel() for p in model.parameters())


