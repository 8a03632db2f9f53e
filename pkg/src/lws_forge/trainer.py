"""Training loop, validation perplexity and multi-variant comparisons."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .budget import ModelConfig, Skeleton, count_params
from .data import Corpus, next_batch, unigram_perplexity
from .errors import InsufficientDataError, InvalidArgumentError, InvalidExperimentError, TrainingDivergenceError
from .model import Transformer, adamw_step, cross_entropy, init_model, init_opt_state, loss_and_grads, save_checkpoint
from .profiles import Kind, ScalingSpec
from .svg import line_chart

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("step", "tokens_seen", "train_loss", "val_loss", "val_ppl", "tokens_per_sec", "wall_clock_s")
TRACE_COLUMNS = ("variant", "step", "tokens_seen", "val_loss", "val_ppl")
SUMMARY_COLUMNS = (
    "variant",
    "kind",
    "n_layers",
    "params",
    "non_embed",
    "final_train_loss",
    "final_val_loss",
    "final_val_ppl",
    "best_val_ppl",
    "tokens_per_sec",
)

THREADS_ENV = "LWS_FORGE_THREADS"


def configure_threads() -> int:
    """Cap torch's intra-op threads from ``LWS_FORGE_THREADS`` when set."""
    value = os.environ.get(THREADS_ENV)
    if value:
        torch.set_num_threads(max(1, int(value)))
    return torch.get_num_threads()


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    seq_len: int = 256
    lr: float = 3e-3
    warmup_steps: int | None = None  # None: 2% of steps
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip_norm: float = 1.0
    eval_interval: int = 50
    eval_tokens: int = 16384
    seed: int = 0
    record_timing: bool = True

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise InvalidArgumentError(f"steps must be >= 1, got {self.steps}")
        if not 1 <= self.eval_interval <= self.steps:
            raise InvalidArgumentError(
                f"eval_interval must lie in [1, steps={self.steps}], got {self.eval_interval}"
            )
        for name in ("batch_size", "seq_len", "eval_tokens"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be >= 1")
        for name in ("lr", "beta1", "beta2", "eps", "grad_clip_norm"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be > 0")
        if self.weight_decay < 0 or self.beta1 >= 1 or self.beta2 >= 1:
            raise InvalidArgumentError("need weight_decay >= 0 and betas < 1")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise InvalidArgumentError("warmup_steps must be >= 0")

    @property
    def warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return max(1, round(0.02 * self.steps))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup over the first ``cfg.warmup`` steps, then constant (steps are 1-based)."""
    if step < cfg.warmup:
        return cfg.lr * step / cfg.warmup
    return cfg.lr


def clip_grad_norm(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g.mul_(scale)
    return total


def perplexity(loss: float) -> float:
    return math.exp(loss)


@dataclass
class MetricsRow:
    step: int
    tokens_seen: int
    train_loss: float
    val_loss: float | None = None
    val_ppl: float | None = None
    tokens_per_sec: float = 0.0
    wall_clock_s: float = 0.0


@dataclass
class MetricsLog:
    rows: list[MetricsRow] = field(default_factory=list)

    def append(self, row: MetricsRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise InvalidArgumentError(f"metrics steps must increase: {row.step} after {self.rows[-1].step}")
        if (row.val_loss is None) != (row.val_ppl is None):
            raise InvalidArgumentError("val_loss and val_ppl must be logged together")
        self.rows.append(row)

    def eval_rows(self) -> list[MetricsRow]:
        return [r for r in self.rows if r.val_loss is not None]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in self.rows:
            w.writerow(
                [
                    r.step,
                    r.tokens_seen,
                    repr(r.train_loss),
                    "" if r.val_loss is None else repr(r.val_loss),
                    "" if r.val_ppl is None else repr(r.val_ppl),
                    f"{r.tokens_per_sec:.1f}",
                    f"{r.wall_clock_s:.3f}",
                ]
            )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsLog":
        out = cls()
        for rec in csv.DictReader(io.StringIO(text)):
            out.append(
                MetricsRow(
                    step=int(rec["step"]),
                    tokens_seen=int(rec["tokens_seen"]),
                    train_loss=float(rec["train_loss"]),
                    val_loss=float(rec["val_loss"]) if rec["val_loss"] else None,
                    val_ppl=float(rec["val_ppl"]) if rec["val_ppl"] else None,
                    tokens_per_sec=float(rec["tokens_per_sec"]),
                    wall_clock_s=float(rec["wall_clock_s"]),
                )
            )
        return out

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path


def smoothed_val_loss(metrics: MetricsLog, window_steps: int = 200) -> list[tuple[int, float]]:
    """Trailing mean of validation loss over evaluations in ``(step - window, step]``."""
    evals = [(r.step, r.val_loss) for r in metrics.eval_rows()]
    out = []
    for step, _ in evals:
        vals = [v for s, v in evals if step - window_steps < s <= step]
        out.append((step, sum(vals) / len(vals)))
    return out


@torch.no_grad()
def evaluate_perplexity(
    model: Transformer,
    val_tokens: np.ndarray,
    seq_len: int,
    eval_tokens: int,
    batch_size: int = 16,
) -> tuple[float, float]:
    """Mean cross-entropy over non-overlapping windows of the validation prefix.

    Scores ``(eval_tokens // seq_len) * seq_len`` target tokens, always from
    the start of ``val_tokens`` so repeated calls see identical data.
    """
    n_windows = eval_tokens // seq_len
    if n_windows < 1:
        raise InsufficientDataError(f"eval_tokens={eval_tokens} is shorter than seq_len={seq_len}")
    need = n_windows * seq_len + 1
    if len(val_tokens) < need:
        raise InsufficientDataError(
            f"validation split has {len(val_tokens):,} tokens; evaluating {eval_tokens:,} needs {need:,}"
        )
    flat = torch.from_numpy(np.asarray(val_tokens[:need], dtype=np.int64))
    inputs = flat[:-1].view(n_windows, seq_len)
    targets = flat[1:].view(n_windows, seq_len)
    total = 0.0
    for i in range(0, n_windows, batch_size):
        logits = model(inputs[i : i + batch_size])
        total += float(cross_entropy(logits, targets[i : i + batch_size]).double()) * targets[i : i + batch_size].numel()
    loss = total / targets.numel()
    return loss, perplexity(loss)


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    corpus: Corpus,
    checkpoint_dir: str | Path | None = None,
    progress: Callable[[MetricsRow], None] | None = None,
) -> tuple[Transformer, MetricsLog]:
    """Train one model from scratch; returns the final weights and the metrics log.

    The same ``train_config.seed`` fixes both the initial weights and the
    order of training windows, so variants trained with one seed see
    identical data.
    """
    cfg = train_config
    if model_config.max_seq_len < cfg.seq_len:
        raise InvalidArgumentError(f"seq_len {cfg.seq_len} exceeds the model's max_seq_len {model_config.max_seq_len}")
    if model_config.vocab_size < corpus.vocab_size:
        raise InvalidArgumentError(f"model vocab {model_config.vocab_size} is smaller than the corpus vocab")
    if len(corpus.val) < (cfg.eval_tokens // cfg.seq_len) * cfg.seq_len + 1:
        raise InsufficientDataError("validation split is smaller than eval_tokens")

    model = init_model(model_config, seed=cfg.seed)
    opt = init_opt_state(model)
    rng = np.random.default_rng(cfg.seed)
    metrics = MetricsLog()
    tokens_seen = 0
    start = time.perf_counter()
    train_time = 0.0

    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        batch = next_batch(corpus, cfg.batch_size, cfg.seq_len, rng)
        loss, grads = loss_and_grads(model, batch)
        if not math.isfinite(loss):
            raise TrainingDivergenceError(f"non-finite training loss at step {step}", metrics=metrics)
        clip_grad_norm(grads, cfg.grad_clip_norm)
        try:
            adamw_step(
                model, grads, opt, lr_at(step, cfg), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay
            )
        except TrainingDivergenceError as exc:
            exc.metrics = metrics
            raise
        train_time += time.perf_counter() - t0
        tokens_seen += batch.n_tokens

        row = MetricsRow(step=step, tokens_seen=tokens_seen, train_loss=loss)
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            row.val_loss, row.val_ppl = evaluate_perplexity(model, corpus.val, cfg.seq_len, cfg.eval_tokens)
            if not math.isfinite(row.val_loss):
                metrics.append(row)
                raise TrainingDivergenceError(f"non-finite validation loss at step {step}", metrics=metrics)
        if cfg.record_timing:
            row.tokens_per_sec = tokens_seen / train_time if train_time > 0 else 0.0
            row.wall_clock_s = time.perf_counter() - start
        metrics.append(row)
        if progress is not None:
            progress(row)

    if checkpoint_dir is not None:
        save_checkpoint(model, checkpoint_dir, step=cfg.steps, extra={"train": cfg.to_dict(), "corpus": dict(corpus.meta)})
    return model, metrics


@dataclass
class VariantResult:
    name: str
    spec: ScalingSpec
    config: ModelConfig
    metrics: MetricsLog
    params: int
    non_embed: int


@dataclass
class Comparison:
    results: list[VariantResult]
    unigram_ppl: float

    def trace_rows(self) -> list[dict]:
        return [
            {"variant": r.name, "step": row.step, "tokens_seen": row.tokens_seen,
             "val_loss": repr(row.val_loss), "val_ppl": repr(row.val_ppl)}
            for r in self.results
            for row in r.metrics.eval_rows()
        ]

    def summary_rows(self) -> list[dict]:
        out = []
        for r in self.results:
            evals = r.metrics.eval_rows()
            last = evals[-1]
            out.append(
                {
                    "variant": r.name,
                    "kind": r.spec.kind.value,
                    "n_layers": r.spec.n_layers,
                    "params": r.params,
                    "non_embed": r.non_embed,
                    "final_train_loss": repr(r.metrics.rows[-1].train_loss),
                    "final_val_loss": repr(last.val_loss),
                    "final_val_ppl": repr(last.val_ppl),
                    "best_val_ppl": repr(min(e.val_ppl for e in evals)),
                    "tokens_per_sec": f"{r.metrics.rows[-1].tokens_per_sec:.1f}",
                }
            )
        return out

    def to_csv(self) -> str:
        """Per-evaluation trace rows, then one ``step=final`` row per variant."""
        rows = self.trace_rows()
        for r in self.results:
            last = r.metrics.eval_rows()[-1]
            rows.append({"variant": r.name, "step": "final", "tokens_seen": last.tokens_seen,
                         "val_loss": repr(last.val_loss), "val_ppl": repr(last.val_ppl)})
        return _csv(rows, TRACE_COLUMNS)

    def summary_csv(self) -> str:
        return _csv(self.summary_rows(), SUMMARY_COLUMNS)

    def report(self) -> str:
        """Plain-text summary, including how each LWS variant fares against the uniform baseline."""
        lines = [f"unigram byte-model validation PPL: {self.unigram_ppl:.4f}", ""]
        lines.append(f"{'variant':<22} {'params':>10} {'val_loss':>9} {'val_ppl':>9}")
        for r in self.results:
            last = r.metrics.eval_rows()[-1]
            lines.append(f"{r.name:<22} {r.params:>10,} {last.val_loss:>9.4f} {last.val_ppl:>9.4f}")
        baselines = [r for r in self.results if r.spec.kind is Kind.UNIFORM]
        if baselines:
            base = baselines[0]
            base_ppl = base.metrics.eval_rows()[-1].val_ppl
            lines.append("")
            lines.append(f"LWS variants vs {base.name} (informational, not a pass/fail gate):")
            for r in self.results:
                if r is base or r.spec.kind is Kind.UNIFORM:
                    continue
                ppl = r.metrics.eval_rows()[-1].val_ppl
                verdict = "<= baseline" if ppl <= base_ppl else "> baseline"
                lines.append(f"  {r.name:<20} {ppl:.4f} {verdict} ({(ppl / base_ppl - 1) * 100:+.2f}%)")
        return "\n".join(lines) + "\n"

    def svg(self) -> str:
        series = {
            r.name: [(row.tokens_seen, row.val_ppl) for row in r.metrics.eval_rows()] for r in self.results
        }
        return line_chart(series, title="Validation perplexity", xlabel="tokens seen", ylabel="val PPL")


def check_budgets(totals: Sequence[int], tolerance: float = 0.01) -> None:
    lo, hi = min(totals), max(totals)
    if hi > lo * (1 + tolerance):
        raise InvalidExperimentError(
            f"variant budgets differ by {(hi / lo - 1):.2%} (> {tolerance:.0%}): {list(totals)}"
        )


def compare_variants(
    variants: Sequence[tuple[str, ScalingSpec]],
    skeleton: Skeleton,
    train_config: TrainConfig,
    corpus: Corpus,
    out_dir: str | Path | None = None,
    budget_tolerance: float = 0.01,
    progress: Callable[[str, MetricsRow], None] | None = None,
) -> Comparison:
    """Train every variant with the same seed and data order, after checking budgets."""
    if not variants:
        raise InvalidArgumentError("compare_variants needs at least one variant")
    configs = [skeleton.resolve(spec) for _, spec in variants]
    counts = [count_params(c) for c in configs]
    check_budgets([c.total for c in counts], budget_tolerance)

    results = []
    for (name, spec), config, count in zip(variants, configs, counts):
        log.info("training %s (%s params)", name, f"{count.total:,}")
        ckpt = None
        if out_dir is not None:
            ckpt = Path(out_dir) / "checkpoints" / _slug(name)
        cb = (lambda row, n=name: progress(n, row)) if progress else None
        _, metrics = train(config, train_config, corpus, checkpoint_dir=ckpt, progress=cb)
        results.append(VariantResult(name, spec, config, metrics, count.total, count.non_embedding))
    return Comparison(results=results, unigram_ppl=unigram_perplexity(corpus))


def _csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "-" for c in name.lower()).strip("-")
