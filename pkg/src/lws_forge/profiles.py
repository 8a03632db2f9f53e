"""Per-layer width schedules for layer-wise scaled transformers.

A :class:`ScalingSpec` names one scaling variant (uniform, vanilla, framed,
reverse, crown) through its FFN and attention scalars.  ``build_layer_profiles``
turns a spec into one :class:`LayerProfile` per layer: the interpolated
scalars are resolved into an integer query-head count and FFN hidden size.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Iterable, Sequence

from .errors import InvalidArgumentError

# Float slack when deciding head-rounding ties on interpolated scalars.
_TIE_EPS = 1e-9


class Kind(str, Enum):
    UNIFORM = "uniform"
    VANILLA = "vanilla"
    FRAMED = "framed"
    REVERSE = "reverse"
    CROWN = "crown"


FRAMED_BY_DEFAULT = frozenset({Kind.FRAMED, Kind.REVERSE, Kind.CROWN})


@dataclass(frozen=True)
class ScalingSpec:
    """A named layer-wise scaling variant.

    ``ffn_scalars`` and ``qkv_scalars`` hold (start, end) or, for crown,
    (start, middle, end).  ``framing`` defaults to the variant's usual
    setting (on for framed/reverse/crown) but can be overridden, e.g. to
    compare an unframed reverse schedule against vanilla.
    """

    kind: Kind
    ffn_scalars: tuple[float, ...]
    qkv_scalars: tuple[float, ...]
    n_layers: int
    framing: bool | None = None

    def __post_init__(self) -> None:
        try:
            kind = Kind(self.kind)
        except ValueError:
            raise InvalidArgumentError(
                f"unknown kind {self.kind!r}; expected one of {[k.value for k in Kind]}"
            ) from None
        object.__setattr__(self, "kind", kind)
        ffn = tuple(float(v) for v in self.ffn_scalars)
        qkv = tuple(float(v) for v in self.qkv_scalars)
        # A uniform spec may be given as a single value per scalar list.
        if kind is Kind.UNIFORM:
            ffn = ffn * 2 if len(ffn) == 1 else ffn
            qkv = qkv * 2 if len(qkv) == 1 else qkv
        object.__setattr__(self, "ffn_scalars", ffn)
        object.__setattr__(self, "qkv_scalars", qkv)
        if self.framing is None:
            object.__setattr__(self, "framing", kind in FRAMED_BY_DEFAULT)
        else:
            object.__setattr__(self, "framing", bool(self.framing))

        want = 3 if kind is Kind.CROWN else 2
        for name, vals in (("ffn_scalars", ffn), ("qkv_scalars", qkv)):
            if len(vals) != want:
                raise InvalidArgumentError(f"{kind.value} spec needs {want} {name}, got {len(vals)}")
            if not all(math.isfinite(v) and v > 0 for v in vals):
                raise InvalidArgumentError(f"{name} must be finite and > 0, got {vals}")
        if kind is Kind.UNIFORM and (ffn[0] != ffn[1] or qkv[0] != qkv[1]):
            raise InvalidArgumentError("uniform spec needs equal start and end scalars")
        if kind is Kind.REVERSE and (ffn[0] < ffn[1] or qkv[0] < qkv[1]):
            raise InvalidArgumentError(
                f"reverse spec needs start >= end for both scalar lists, got ffn={ffn} qkv={qkv}"
            )
        if isinstance(self.n_layers, bool) or int(self.n_layers) != self.n_layers or self.n_layers < 2:
            raise InvalidArgumentError(f"n_layers must be an integer >= 2, got {self.n_layers}")
        object.__setattr__(self, "n_layers", int(self.n_layers))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "ffn_scalars": list(self.ffn_scalars),
            "qkv_scalars": list(self.qkv_scalars),
            "framing": self.framing,
            "n_layers": self.n_layers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScalingSpec":
        missing = {"kind", "ffn_scalars", "qkv_scalars", "n_layers"} - d.keys()
        if missing:
            raise InvalidArgumentError(f"scaling spec missing keys: {sorted(missing)}")
        return cls(
            kind=d["kind"],
            ffn_scalars=tuple(d["ffn_scalars"]),
            qkv_scalars=tuple(d["qkv_scalars"]),
            n_layers=d["n_layers"],
            framing=d.get("framing"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "ScalingSpec":
        return cls.from_dict(json.loads(text))

    def with_ffn_scale(self, s: float) -> "ScalingSpec":
        """Copy with every FFN scalar multiplied by ``s``."""
        return ScalingSpec(
            kind=self.kind,
            ffn_scalars=tuple(v * s for v in self.ffn_scalars),
            qkv_scalars=self.qkv_scalars,
            n_layers=self.n_layers,
            framing=self.framing,
        )


@dataclass(frozen=True)
class LayerProfile:
    layer_index: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    ffn_dim: int
    beta_effective: float = float("nan")
    alpha_effective: float = float("nan")

    def __post_init__(self) -> None:
        if self.n_kv_heads < 1 or self.n_heads < self.n_kv_heads:
            raise InvalidArgumentError(
                f"layer {self.layer_index}: need n_heads >= n_kv_heads >= 1, "
                f"got {self.n_heads}/{self.n_kv_heads}"
            )
        if self.n_heads % self.n_kv_heads:
            raise InvalidArgumentError(
                f"layer {self.layer_index}: n_heads={self.n_heads} not divisible by "
                f"n_kv_heads={self.n_kv_heads}"
            )
        if self.ffn_dim < 1 or self.head_dim < 1:
            raise InvalidArgumentError(f"layer {self.layer_index}: widths must be positive")

    def widths(self) -> tuple[int, int, int, int]:
        """(n_heads, n_kv_heads, head_dim, ffn_dim), ignoring position."""
        return (self.n_heads, self.n_kv_heads, self.head_dim, self.ffn_dim)

    @property
    def q_dim(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LayerProfile":
        return cls(**d)


def interpolate(start: float, end: float, count: int) -> list[float]:
    """Evenly spaced values from ``start`` to ``end`` inclusive."""
    if count < 2:
        raise InvalidArgumentError(f"interpolate needs count >= 2, got {count}")
    span = end - start
    out = [start + span * i / (count - 1) for i in range(count)]
    out[-1] = end
    return out


def interpolate_three_point(start: float, middle: float, end: float, count: int) -> list[float]:
    """Two-segment schedule rising (or falling) from ``start`` to ``middle`` to ``end``.

    With an odd ``count`` the middle layer ``(count - 1) // 2`` holds
    ``middle`` alone.  With an even ``count`` each half gets ``count // 2``
    layers, so both central layers ``count//2 - 1`` and ``count//2`` hold
    ``middle`` and the schedule stays mirror-symmetric.
    """
    if count < 3:
        raise InvalidArgumentError(f"interpolate_three_point needs count >= 3, got {count}")
    half = count // 2
    if count % 2:
        return interpolate(start, middle, half + 1) + interpolate(middle, end, half + 1)[1:]
    return interpolate(start, middle, half) + interpolate(middle, end, half)


def peak_indices(count: int) -> tuple[int, ...]:
    """Layer indices that carry the middle scalar of a crown schedule."""
    m = (count - 1) // 2
    return (m,) if count % 2 else (m, m + 1)


def apply_framing(values: Sequence[float], *scalars: float) -> list[float]:
    """Pin the first and last entries to ``max(scalars)``.

    Called as ``apply_framing(values, start, end)`` for two-point schedules
    and with all three scalars for crown schedules.
    """
    if not values:
        raise InvalidArgumentError("apply_framing needs a nonempty list")
    if not scalars:
        raise InvalidArgumentError("apply_framing needs at least one scalar")
    top = max(scalars)
    out = list(values)
    out[0] = top
    out[-1] = top
    return out


def scalar_schedule(scalars: Sequence[float], n_layers: int, framing: bool) -> list[float]:
    if len(scalars) == 3:
        values = interpolate_three_point(*scalars, n_layers)
    elif len(scalars) == 2:
        values = interpolate(*scalars, n_layers)
    else:
        raise InvalidArgumentError(f"need 2 or 3 scalars, got {len(scalars)}")
    return apply_framing(values, *scalars) if framing else values


def beta_schedule(spec: ScalingSpec) -> list[float]:
    return scalar_schedule(spec.ffn_scalars, spec.n_layers, spec.framing)


def alpha_schedule(spec: ScalingSpec) -> list[float]:
    return scalar_schedule(spec.qkv_scalars, spec.n_layers, spec.framing)


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def quantize_heads(alpha: float, d_model: int, head_dim: int, n_kv_heads: int) -> int:
    """Query-head count nearest ``alpha * d_model / head_dim`` that is a multiple
    of ``n_kv_heads`` (ties round up, never below ``n_kv_heads``)."""
    if head_dim < 1 or d_model % head_dim:
        raise InvalidArgumentError(f"d_model={d_model} is not divisible by head_dim={head_dim}")
    if n_kv_heads < 1:
        raise InvalidArgumentError(f"n_kv_heads must be >= 1, got {n_kv_heads}")
    raw = alpha * d_model / head_dim
    lo = math.floor(raw / n_kv_heads) * n_kv_heads
    hi = lo + n_kv_heads
    heads = hi if (raw - lo) >= (hi - raw) - _TIE_EPS else lo
    return max(heads, n_kv_heads)


def ffn_width(beta: float, d_model: int, alignment: int = 1) -> int:
    """FFN hidden size ``beta * d_model`` rounded to a multiple of ``alignment``."""
    if not beta > 0:
        raise InvalidArgumentError(f"beta must be > 0, got {beta}")
    if alignment < 1:
        raise InvalidArgumentError(f"alignment must be >= 1, got {alignment}")
    raw = _round_half_up(beta * d_model)
    return max(alignment, _round_half_up(raw / alignment) * alignment)


def build_layer_profiles(
    spec: ScalingSpec,
    d_model: int,
    head_dim: int,
    n_kv_heads: int,
    alignment: int = 1,
) -> list[LayerProfile]:
    """Resolve ``spec`` into one concrete :class:`LayerProfile` per layer."""
    if spec.kind is Kind.REVERSE and (
        spec.ffn_scalars[0] < spec.ffn_scalars[-1] or spec.qkv_scalars[0] < spec.qkv_scalars[-1]
    ):
        raise InvalidArgumentError("reverse spec needs descending scalars")
    betas = beta_schedule(spec)
    alphas = alpha_schedule(spec)
    return [
        LayerProfile(
            layer_index=i,
            n_heads=quantize_heads(a, d_model, head_dim, n_kv_heads),
            n_kv_heads=n_kv_heads,
            head_dim=head_dim,
            ffn_dim=ffn_width(b, d_model, alignment),
            beta_effective=b,
            alpha_effective=a,
        )
        for i, (a, b) in enumerate(zip(alphas, betas))
    ]


def profiles_to_json(profiles: Iterable[LayerProfile]) -> str:
    return json.dumps([p.to_dict() for p in profiles], indent=2)


def format_profile_table(profiles: Sequence[LayerProfile]) -> str:
    lines = [f"{'layer':>5} {'alpha':>7} {'heads':>5} {'kv':>3} {'beta':>7} {'ffn_dim':>7}"]
    for p in profiles:
        lines.append(
            f"{p.layer_index:>5} {p.alpha_effective:>7.3f} {p.n_heads:>5} {p.n_kv_heads:>3} "
            f"{p.beta_effective:>7.3f} {p.ffn_dim:>7}"
        )
    return "\n".join(lines)
