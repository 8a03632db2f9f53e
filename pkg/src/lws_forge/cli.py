"""``lws-forge`` command line: plan, count, train, eval and compare.

Exit codes: 0 on success, 1 on runtime failure (divergence, infeasible
budget), 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .budget import Skeleton, count_params, emit_spec_table, rows_to_csv, with_tied
from .config import (
    load_config,
    load_preset,
    preset_names,
    reported_counts,
    skeleton_of,
    train_config_of,
    variants_of,
)
from .data import build_corpus, read_files
from .errors import (
    InfeasibleBudgetError,
    InsufficientDataError,
    InvalidArgumentError,
    InvalidExperimentError,
    TrainingDivergenceError,
)
from .model import load_checkpoint
from .profiles import Kind, ScalingSpec, build_layer_profiles, format_profile_table, profiles_to_json
from .svg import line_chart
from .trainer import Comparison, MetricsLog, compare_variants, configure_threads, evaluate_perplexity, train

log = logging.getLogger("lws_forge")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def scalar_list(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not 1 <= len(vals) <= 3:
        raise argparse.ArgumentTypeError(f"expected 1 to 3 scalars, got {len(vals)}")
    return vals


def _add_source(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--preset", help="bundled preset name (see `lws-forge presets`)")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", action="append", default=[], help="corpus file; repeat to concatenate in order")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--svg", dest="svg", action="store_true", default=True)
    p.add_argument("--no-svg", dest="svg", action="store_false")
    p.add_argument("--repeat", type=int, default=1, help="run N times with seeds seed..seed+N-1")
    p.add_argument(
        "--no-timing",
        action="store_true",
        help="write 0 in the tokens_per_sec/wall_clock_s columns so reruns give byte-identical CSVs",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lws-forge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="print per-layer head counts and FFN widths")
    _add_source(p)
    p.add_argument("--variant", choices=[k.value for k in Kind])
    p.add_argument("--ffn", type=scalar_list, help="FFN scalars, e.g. 1.0,4.0")
    p.add_argument("--qkv", type=scalar_list, help="attention scalars, e.g. 0.5,1.0")
    p.add_argument("--layers", type=int)
    p.add_argument("--framing", dest="framing", action="store_true", default=None)
    p.add_argument("--no-framing", dest="framing", action="store_false")
    p.add_argument("--d-model", type=int, default=768)
    p.add_argument("--head-dim", type=int, default=64)
    p.add_argument("--kv-heads", type=int, default=4)
    p.add_argument("--ffn-align", type=int, default=1)
    p.add_argument("--json", action="store_true", help="print profile JSON instead of the table")
    p.add_argument("--out", help="directory for profiles.json")

    p = sub.add_parser("count", help="parameter counts as CSV")
    _add_source(p)
    p.add_argument("--tied", action="store_true", help="tie the LM head to the input embedding")
    p.add_argument("--compare-reported", action="store_true", help="add published counts and deviations")
    p.add_argument("--out", help="directory for count.csv")

    p = sub.add_parser("train", help="train one variant")
    _add_source(p)
    _add_run_flags(p)

    p = sub.add_parser("eval", help="validation perplexity of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", action="append", default=[])
    p.add_argument("--val-fraction", type=float, help="defaults to the split the checkpoint was trained with")
    p.add_argument("--seq-len", type=int)
    p.add_argument("--eval-tokens", type=int, default=16384)
    p.add_argument("--out", help="directory for eval.json")

    p = sub.add_parser("compare", help="train several variants on one budget and compare")
    _add_source(p)
    _add_run_flags(p)
    p.add_argument("--parallel", type=int, default=1, metavar="N", help="train up to N variants at once")

    sub.add_parser("presets", help="list bundled presets")
    return parser


# -- helpers -----------------------------------------------------------------


def _doc_from(args) -> dict:
    if args.config and args.preset:
        raise UsageError("give either --config or --preset, not both")
    if args.config:
        return load_config(args.config)
    if args.preset:
        return load_preset(args.preset)
    raise UsageError("need --config or --preset")


def _corpus(paths: list[str], val_fraction: float, seed: int, seq_len: int):
    if not paths:
        raise UsageError("need at least one --corpus file")
    missing = [p for p in paths if not Path(p).is_file()]
    if missing:
        raise UsageError(f"corpus file not found: {', '.join(missing)}")
    raw = read_files(paths)
    return build_corpus(raw, val_fraction=val_fraction, seed=seed, seq_len=seq_len, source=",".join(paths))


def _write_manifest(out: Path, command: str, argv: list[str], started: str, outputs: list[Path], **extra) -> Path:
    manifest = {
        "command": command,
        "argv": argv,
        "version": __version__,
        "started": started,
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
        "outputs": sorted(str(p.relative_to(out)) for p in outputs),
        **extra,
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str))
    return path


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat()


def _seeds(args, tc) -> list[int]:
    if args.repeat < 1:
        raise UsageError("--repeat must be >= 1")
    return [tc.seed + i for i in range(args.repeat)]


# -- commands ----------------------------------------------------------------


def cmd_plan(args) -> int:
    if args.config or args.preset:
        doc = _doc_from(args)
        sk = skeleton_of(doc)
        variants = variants_of(doc)
    else:
        if not (args.variant and args.ffn and args.qkv and args.layers):
            raise UsageError("plan needs --config, --preset, or all of --variant/--ffn/--qkv/--layers")
        spec = ScalingSpec(args.variant, args.ffn, args.qkv, args.layers, args.framing)
        sk = Skeleton(
            d_model=args.d_model,
            vocab_size=1,
            max_seq_len=1,
            head_dim=args.head_dim,
            n_kv_heads=args.kv_heads,
            ffn_alignment=args.ffn_align,
        )
        variants = [(args.variant, spec)]

    payload = []
    for name, spec in variants:
        profiles = build_layer_profiles(spec, sk.d_model, sk.head_dim, sk.n_kv_heads, sk.ffn_alignment)
        payload.append({"name": name, "spec": spec.to_dict(), "profiles": json.loads(profiles_to_json(profiles))})
        if not args.json:
            flag = "framed" if spec.framing else "unframed"
            print(f"# {name}: {spec.kind.value}, {spec.n_layers} layers, {flag}")
            print(format_profile_table(profiles))
            print()
    if args.json:
        text = json.dumps(payload[0]["profiles"] if len(payload) == 1 else payload, indent=2)
        print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "profiles.json").write_text(json.dumps(payload, indent=2))
    return EXIT_OK


def cmd_count(args) -> int:
    doc = _doc_from(args)
    sk = skeleton_of(doc)
    if args.tied:
        sk = with_tied(sk)
    variants = variants_of(doc)
    rows = emit_spec_table(variants, sk)
    columns = list(rows[0]) if rows else None
    if args.compare_reported:
        reported = reported_counts(doc)
        for row in rows:
            rep = reported.get(row["name"])
            if rep:
                row["reported_params_m"] = rep["params_m"]
                row["reported_non_embed_m"] = rep["non_embed_m"]
                row["params_dev_pct"] = f"{(float(row['params_m']) / rep['params_m'] - 1) * 100:+.2f}"
                row["non_embed_dev_pct"] = f"{(float(row['non_embed_m']) / rep['non_embed_m'] - 1) * 100:+.2f}"
        extra = ["reported_params_m", "reported_non_embed_m", "params_dev_pct", "non_embed_dev_pct"]
        columns = [*columns, *extra] if columns else None
        for row in rows:
            for c in extra:
                row.setdefault(c, "")
    text = rows_to_csv(rows, columns) if columns else rows_to_csv(rows)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "count.csv").write_text(text)
    return EXIT_OK


def _train_outputs(out: Path, metrics: MetricsLog, svg: bool, title: str) -> list[Path]:
    paths = [metrics.write(out / "metrics.csv")]
    if svg:
        series = {title: [(r.tokens_seen, r.val_ppl) for r in metrics.eval_rows()]}
        path = out / "metrics.svg"
        path.write_text(line_chart(series, title="Validation perplexity", xlabel="tokens seen", ylabel="val PPL"))
        paths.append(path)
    return paths


def cmd_train(args, argv) -> int:
    started = _now()
    doc = _doc_from(args)
    sk = skeleton_of(doc)
    variants = variants_of(doc)
    if len(variants) != 1:
        raise UsageError(f"train needs exactly one variant, config has {len(variants)}; use compare")
    name, spec = variants[0]
    tc = train_config_of(doc, steps=args.steps, eval_interval=args.eval_interval, seed=args.seed)
    if args.no_timing:
        tc = train_config_of({"train": {**tc.to_dict(), "record_timing": False}})
    val_fraction = doc.get("corpus", {}).get("val_fraction", 0.01)
    out_root = Path(args.out)
    for seed in _seeds(args, tc):
        run_tc = train_config_of({"train": {**tc.to_dict(), "seed": seed}})
        out = out_root if args.repeat == 1 else out_root / f"seed-{seed}"
        out.mkdir(parents=True, exist_ok=True)
        corpus = _corpus(args.corpus, val_fraction, seed, run_tc.seq_len)
        config = sk.resolve(spec)
        _, metrics = train(config, run_tc, corpus, checkpoint_dir=out / "checkpoint",
                           progress=_progress_logger(name))
        outputs = _train_outputs(out, metrics, args.svg, name)
        outputs.append(out / "checkpoint")
        _write_manifest(
            out, "train", argv, started, outputs,
            seed=seed, corpus_hash=corpus.meta["content_hash"], corpus=corpus.meta,
            configs={"name": name, "scaling": spec.to_dict(), "model": sk.to_dict(), "train": run_tc.to_dict()},
        )
        last = metrics.eval_rows()[-1]
        print(f"{name}: seed {seed} val_loss {last.val_loss:.4f} val_ppl {last.val_ppl:.4f} -> {out}")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    started = _now()
    ckpt = Path(args.checkpoint)
    if not (ckpt / "manifest.json").is_file():
        raise UsageError(f"not a checkpoint directory: {ckpt}")
    model, manifest = load_checkpoint(ckpt)
    seq_len = args.seq_len or manifest.get("extra", {}).get("train", {}).get("seq_len") or model.config.max_seq_len
    extra = manifest.get("extra", {})
    val_fraction = args.val_fraction or extra.get("corpus", {}).get("val_fraction", 0.01)
    corpus = _corpus(args.corpus, val_fraction, 0, seq_len)
    loss, ppl = evaluate_perplexity(model, corpus.val, seq_len, args.eval_tokens)
    result = {"checkpoint": str(ckpt), "step": manifest["step"], "val_loss": loss, "val_ppl": ppl,
              "seq_len": seq_len, "eval_tokens": args.eval_tokens}
    print(json.dumps(result, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "eval.json"
        path.write_text(json.dumps(result, indent=2))
        _write_manifest(out, "eval", argv, started, [path], corpus_hash=corpus.meta["content_hash"])
    return EXIT_OK


def cmd_compare(args, argv) -> int:
    started = _now()
    doc = _doc_from(args)
    sk = skeleton_of(doc)
    variants = variants_of(doc)
    tc = train_config_of(doc, steps=args.steps, eval_interval=args.eval_interval, seed=args.seed)
    if args.no_timing:
        tc = train_config_of({"train": {**tc.to_dict(), "record_timing": False}})
    val_fraction = doc.get("corpus", {}).get("val_fraction", 0.01)
    out_root = Path(args.out)
    for seed in _seeds(args, tc):
        run_tc = train_config_of({"train": {**tc.to_dict(), "seed": seed}})
        out = out_root if args.repeat == 1 else out_root / f"seed-{seed}"
        out.mkdir(parents=True, exist_ok=True)
        corpus = _corpus(args.corpus, val_fraction, seed, run_tc.seq_len)
        comparison = run_comparison(variants, sk, run_tc, corpus, out, args.parallel)
        outputs = []
        for fname, text in (
            ("compare.csv", comparison.to_csv()),
            ("compare_summary.csv", comparison.summary_csv()),
            ("report.txt", comparison.report()),
        ):
            (out / fname).write_text(text)
            outputs.append(out / fname)
        if args.svg:
            (out / "compare.svg").write_text(comparison.svg())
            outputs.append(out / "compare.svg")
        for r in comparison.results:
            run_dir = out / "runs" / _slug(r.name)
            run_dir.mkdir(parents=True, exist_ok=True)
            outputs.append(r.metrics.write(run_dir / "metrics.csv"))
        outputs.append(out / "checkpoints")
        _write_manifest(
            out, "compare", argv, started, outputs,
            seed=seed, corpus_hash=corpus.meta["content_hash"], corpus=corpus.meta,
            configs={"model": sk.to_dict(), "train": run_tc.to_dict(),
                     "variants": [{"name": n, "scaling": s.to_dict()} for n, s in variants]},
        )
        sys.stdout.write(comparison.report())
    return EXIT_OK


def run_comparison(variants, sk, tc, corpus, out: Path, parallel: int = 1) -> Comparison:
    if parallel <= 1:
        return compare_variants(variants, sk, tc, corpus, out_dir=out, progress=_progress_logger())
    # Independent runs in separate processes; each is deterministic on its own.
    from .trainer import VariantResult, check_budgets, unigram_perplexity

    configs = [sk.resolve(spec) for _, spec in variants]
    counts = [count_params(c) for c in configs]
    check_budgets([c.total for c in counts])
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        futures = [
            pool.submit(train, cfg, tc, corpus, out / "checkpoints" / _slug(name))
            for (name, _), cfg in zip(variants, configs)
        ]
        metrics = [f.result()[1] for f in futures]
    results = [
        VariantResult(name, spec, cfg, m, c.total, c.non_embedding)
        for (name, spec), cfg, m, c in zip(variants, configs, metrics, counts)
    ]
    return Comparison(results=results, unigram_ppl=unigram_perplexity(corpus))


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "-" for c in name.lower()).strip("-")


def _progress_logger(fixed_name: str | None = None):
    def report(*args):
        name, row = (fixed_name, args[0]) if fixed_name else args
        if row.val_loss is not None:
            log.info("%s step %d val_loss %.4f val_ppl %.4f", name, row.step, row.val_loss, row.val_ppl)

    return report


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    configure_threads()
    try:
        if args.command == "plan":
            return cmd_plan(args)
        if args.command == "count":
            return cmd_count(args)
        if args.command == "train":
            return cmd_train(args, argv)
        if args.command == "eval":
            return cmd_eval(args, argv)
        if args.command == "compare":
            return cmd_compare(args, argv)
        if args.command == "presets":
            print("\n".join(preset_names()))
            return EXIT_OK
    except (UsageError, InvalidArgumentError, InvalidExperimentError, InsufficientDataError, FileNotFoundError) as exc:
        print(f"lws-forge {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergenceError, InfeasibleBudgetError) as exc:
        print(f"lws-forge {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    parser.error(f"unknown command {args.command}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
