"""Parameter accounting and budget equalization for layer-wise scaled models."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

from .errors import InfeasibleBudgetError, InvalidArgumentError
from .profiles import LayerProfile, ScalingSpec, build_layer_profiles

SCALE_RANGE = (0.05, 20.0)
MAX_BISECT_ITERS = 64

CSV_COLUMNS = ("name", "n_layers", "fnn_scalars", "qkv_scalars", "framing", "params_m", "non_embed_m")


@dataclass(frozen=True)
class Skeleton:
    """Everything in a :class:`ModelConfig` except the per-layer profiles."""

    d_model: int
    vocab_size: int
    max_seq_len: int
    head_dim: int
    n_kv_heads: int
    tie_embeddings: bool = False
    ffn_alignment: int = 1

    def __post_init__(self) -> None:
        for name in ("d_model", "vocab_size", "max_seq_len", "head_dim", "n_kv_heads", "ffn_alignment"):
            if int(getattr(self, name)) < 1:
                raise InvalidArgumentError(f"{name} must be a positive integer")
        if self.d_model % self.head_dim:
            raise InvalidArgumentError(
                f"d_model={self.d_model} is not divisible by head_dim={self.head_dim}"
            )

    def resolve(self, spec: ScalingSpec) -> "ModelConfig":
        profiles = build_layer_profiles(
            spec, self.d_model, self.head_dim, self.n_kv_heads, self.ffn_alignment
        )
        return ModelConfig(
            d_model=self.d_model,
            vocab_size=self.vocab_size,
            max_seq_len=self.max_seq_len,
            head_dim=self.head_dim,
            n_kv_heads=self.n_kv_heads,
            profiles=tuple(profiles),
            tie_embeddings=self.tie_embeddings,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    vocab_size: int
    max_seq_len: int
    head_dim: int
    n_kv_heads: int
    profiles: tuple[LayerProfile, ...]
    tie_embeddings: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "profiles", tuple(self.profiles))
        if self.d_model < 1 or self.head_dim < 1 or self.d_model % self.head_dim:
            raise InvalidArgumentError(
                f"d_model={self.d_model} must be a positive multiple of head_dim={self.head_dim}"
            )
        if self.vocab_size < 1 or self.max_seq_len < 1:
            raise InvalidArgumentError("vocab_size and max_seq_len must be positive")
        if not self.profiles:
            raise InvalidArgumentError("a model needs at least one layer profile")
        for p in self.profiles:
            if p.head_dim != self.head_dim or p.n_kv_heads != self.n_kv_heads:
                raise InvalidArgumentError(
                    f"layer {p.layer_index} disagrees with the model's head_dim/n_kv_heads"
                )

    @property
    def n_layers(self) -> int:
        return len(self.profiles)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["profiles"] = [p.to_dict() for p in self.profiles]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["profiles"] = tuple(LayerProfile.from_dict(p) for p in d["profiles"])
        return cls(**d)


@dataclass(frozen=True)
class ParamBreakdown:
    embedding: int
    lm_head: int
    per_layer_attention: tuple[int, ...]
    per_layer_ffn: tuple[int, ...]
    norms: int
    total: int = field(init=False)
    non_embedding: int = field(init=False)

    def __post_init__(self) -> None:
        non_embed = self.lm_head + self.norms + sum(self.per_layer_attention) + sum(self.per_layer_ffn)
        object.__setattr__(self, "non_embedding", non_embed)
        object.__setattr__(self, "total", self.embedding + non_embed)


def attention_params(d_model: int, p: LayerProfile) -> int:
    # Q, K, V, output projection, then per-head QK-norm weights.  No biases.
    return (
        d_model * p.q_dim
        + 2 * d_model * p.kv_dim
        + p.q_dim * d_model
        + p.q_dim
        + p.kv_dim
    )


def ffn_params(d_model: int, p: LayerProfile) -> int:
    # SwiGLU: gate and up projections, then down projection.
    return 3 * d_model * p.ffn_dim


def count_params(config: ModelConfig) -> ParamBreakdown:
    d = config.d_model
    embed = config.vocab_size * d
    return ParamBreakdown(
        embedding=embed,
        lm_head=0 if config.tie_embeddings else embed,
        per_layer_attention=tuple(attention_params(d, p) for p in config.profiles),
        per_layer_ffn=tuple(ffn_params(d, p) for p in config.profiles),
        norms=2 * d * config.n_layers + d,
    )


def equalize_budget(
    spec: ScalingSpec,
    skeleton: Skeleton,
    target_params: int,
    tolerance: float = 0.01,
) -> ScalingSpec:
    """Scale the FFN scalars of ``spec`` until the model hits ``target_params``.

    Attention scalars are left alone: head counts move in steps of
    ``n_kv_heads`` and make a poor bisection knob.  Returns ``spec`` itself
    when it is already within ``tolerance`` (a fraction of the target).
    """
    if not 0 < tolerance <= 0.1:
        raise InvalidArgumentError(f"tolerance must lie in (0, 0.1], got {tolerance}")
    if target_params <= 0:
        raise InvalidArgumentError("target_params must be positive")
    slack = tolerance * target_params

    def total_at(s: float) -> int:
        return count_params(skeleton.resolve(spec.with_ffn_scale(s))).total

    current = count_params(skeleton.resolve(spec)).total
    if abs(current - target_params) <= slack:
        return spec

    lo, hi = SCALE_RANGE
    best_s, best = 1.0, current

    def consider(s: float, n: int) -> None:
        nonlocal best_s, best
        if abs(n - target_params) < abs(best - target_params):
            best_s, best = s, n

    n_lo, n_hi = total_at(lo), total_at(hi)
    consider(lo, n_lo)
    consider(hi, n_hi)
    for s, n in ((lo, n_lo), (hi, n_hi)):
        if abs(n - target_params) <= slack:
            return spec.with_ffn_scale(s)
    if n_lo > target_params or n_hi < target_params:
        raise InfeasibleBudgetError(
            f"target {target_params:,} is outside the reachable range "
            f"[{n_lo:,}, {n_hi:,}] for FFN scale in [{lo}, {hi}]",
            best_count=best,
            best_scale=best_s,
        )
    for _ in range(MAX_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        n = total_at(mid)
        consider(mid, n)
        if abs(n - target_params) <= slack:
            return spec.with_ffn_scale(mid)
        if n < target_params:
            lo = mid
        else:
            hi = mid
    raise InfeasibleBudgetError(
        f"bisection did not reach {target_params:,} within {tolerance:.2%}",
        best_count=best,
        best_scale=best_s,
    )


def _fmt_scalars(vals: Sequence[float]) -> str:
    return "[" + ", ".join(f"{v:g}" for v in vals) + "]"


def emit_spec_table(specs: Sequence[tuple[str, ScalingSpec]], skeleton: Skeleton) -> list[dict]:
    rows = []
    for name, spec in specs:
        b = count_params(skeleton.resolve(spec))
        rows.append(
            {
                "name": name,
                "n_layers": spec.n_layers,
                "fnn_scalars": _fmt_scalars(spec.ffn_scalars),
                "qkv_scalars": _fmt_scalars(spec.qkv_scalars),
                "framing": str(spec.framing).lower(),
                "params_m": f"{b.total / 1e6:.2f}",
                "non_embed_m": f"{b.non_embedding / 1e6:.2f}",
            }
        )
    return rows


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str] = CSV_COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def with_tied(skeleton: Skeleton, tied: bool = True) -> Skeleton:
    return replace(skeleton, tie_embeddings=tied)
