"""Command-line entry point.

Every command writes a RunManifest next to its primary output so reruns can
be compared by hash. Exit codes: 0 success, 1 runtime failure, 2
configuration or format error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

import numpy as np

from .common import ConfigError, FormatError, ManifestTimer, sha256_file
from .datagen import (
    GenConfig,
    Merchant,
    NoiseConfig,
    Rule,
    Transaction,
    generate_bundle,
    load_bundle,
    save_bundle,
)
from .evaluation import (
    EmbeddingResolver,
    GenerativeResolver,
    build_string_index,
    build_vector_index,
    evaluate,
    latency_bench,
    vector_index_from_merchants,
)
from .models import ModelConfig, build_model
from .pipeline import (
    EsdConfig,
    FilterConfig,
    Pipeline,
    export_review,
    save_decisions,
)
from .retrieval import StringIndex
from .sweep import SweepConfig, run_sweep
from .tokenizers import ALGORITHMS, load_tokenizer, train_tokenizer
from .training import (
    TrainConfig,
    build_contrastive_triples,
    model_from_checkpoint,
    save_checkpoint,
    train_contrastive,
    train_generative,
)

NOISE_PROFILES = {
    "quiet": NoiseConfig(
        aggregator_prob=0.0, abbrev_prob=0.0, suffix_prob=0.0,
        shuffle_prob=0.0, typo_rate=0.0, zip_mismatch_prob=0.0,
    ),
    "default": NoiseConfig(),
    "high": NoiseConfig(
        aggregator_prob=0.45, abbrev_prob=0.4, suffix_prob=0.4,
        shuffle_prob=0.2, typo_rate=0.05, zip_mismatch_prob=0.2,
    ),
}

ARCH_ALIASES = {
    "encoder": "encoder_only",
    "decoder": "decoder_only",
    "encdec": "encoder_decoder",
    "encoder_only": "encoder_only",
    "decoder_only": "decoder_only",
    "encoder_decoder": "encoder_decoder",
}

MIN_MERCHANTS = 10


def _read_jsonl(path: Path, cls):
    rows = []
    with open(path) as f:
        for line in f:
            if line.strip():
                rows.append(cls(**json.loads(line)))
    return rows


def _read_merchants(path: str | Path) -> list[Merchant]:
    p = Path(path)
    if p.is_dir():
        p = p / "merchants.jsonl"
    if not p.exists():
        raise ConfigError(f"catalog file not found: {p}")
    return _read_jsonl(p, Merchant)


def _read_txns(path: str | Path) -> list[Transaction]:
    rows = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            doc = json.loads(line)
            doc.setdefault("gold_merchant_id", -1)
            rows.append(Transaction(**doc))
    return rows


def _load_model(ckpt: str, tokenizer_path: str):
    tok = load_tokenizer(tokenizer_path)
    return model_from_checkpoint(ckpt, tok), tok


def _build_resolver(route: str, model, tok, merchants, max_steps: int):
    if route == "string":
        if model.config.arch == "encoder_only":
            raise ConfigError("string route needs a generative checkpoint")
        index = StringIndex(
            [m.merchant_id for m in merchants],
            [m.name for m in merchants],
            [m.zipcode for m in merchants],
        )
        return GenerativeResolver(model, tok, index, max_steps=max_steps)
    if route == "vector":
        if model.config.arch != "encoder_only":
            raise ConfigError("vector route needs an encoder checkpoint")
        return EmbeddingResolver(
            model, tok, vector_index_from_merchants(merchants, model, tok)
        )
    raise ConfigError(f"unknown route {route!r}")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.merchants < MIN_MERCHANTS:
        raise ConfigError(f"--merchants must be >= {MIN_MERCHANTS}")
    n_train = args.merchants * args.per_merchant
    n_test = args.test if args.test is not None else max(40, n_train // 5)
    cfg = GenConfig(
        n_merchants=args.merchants,
        n_train=n_train,
        n_test=n_test,
        seed=args.seed,
        noise=NOISE_PROFILES[args.noise],
    )
    timer = ManifestTimer("gen-data", args.seed, dataclasses.asdict(cfg))
    bundle = generate_bundle(cfg)
    out = Path(args.out)
    save_bundle(bundle, out)
    for name in sorted(p.name for p in out.iterdir() if p.is_file()):
        timer.add_output(out / name)
    timer.finish(out / "manifest.json")
    print(
        f"wrote bundle: {cfg.n_merchants} merchants, {cfg.n_train} train, "
        f"{cfg.n_test} test -> {out}"
    )
    return 0


def cmd_train_tokenizer(args) -> int:
    timer = ManifestTimer(
        "train-tokenizer", None,
        {"algo": args.algo, "vocab": args.vocab, "corpus": args.corpus},
    )
    corpus_path = Path(args.corpus)
    if not corpus_path.exists():
        raise ConfigError(f"corpus file not found: {corpus_path}")
    timer.add_input(corpus_path)
    lines = corpus_path.read_text().splitlines()
    tok = train_tokenizer(args.algo, lines, args.vocab)
    tok.save(args.out)
    timer.add_output(args.out)
    timer.finish(str(args.out) + ".manifest.json")
    print(f"{args.algo} |vocab|={tok.vocab_size} fingerprint={tok.fingerprint()[:12]}")
    return 0


def cmd_train(args) -> int:
    arch = ARCH_ALIASES.get(args.arch)
    if arch is None:
        raise ConfigError(f"unknown architecture {args.arch!r}")
    tok = load_tokenizer(args.tokenizer)
    bundle = load_bundle(args.data)
    model_cfg = ModelConfig(
        arch=arch,
        vocab_size=tok.vocab_size,
        embed_dim=args.embed_dim,
        num_layers=args.layers,
        ffn_mult=args.ffn_mult,
        max_len=args.max_len,
    )
    train_cfg = TrainConfig(
        iterations=args.iters,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
    )
    timer = ManifestTimer(
        "train", args.seed,
        {"model": dataclasses.asdict(model_cfg),
         "train": dataclasses.asdict(train_cfg)},
    )
    timer.add_input(args.tokenizer)
    timer.add_input(Path(args.data) / "bundle.json")
    model = build_model(model_cfg)
    by_id = {m.merchant_id: m for m in bundle.merchants}
    if arch == "encoder_only":
        anchors = [t.raw_text for t in bundle.train]
        golds = [by_id[t.gold_merchant_id].name for t in bundle.train]
        catalog = [m.name for m in bundle.seen_merchants]
        triples, dropped = build_contrastive_triples(
            anchors, golds, catalog, np.random.default_rng(args.seed)
        )
        if dropped:
            print(f"dropped {dropped} pairs without usable negatives", file=sys.stderr)
        result = train_contrastive(model, tok, triples, train_cfg, log_path=args.log)
    else:
        pairs = [
            (f"{t.raw_text} zip {t.zipcode}", by_id[t.gold_merchant_id].name)
            for t in bundle.train
        ]
        result = train_generative(model, tok, pairs, train_cfg, log_path=args.log)
    meta = {
        "iterations": result.iterations,
        "seed": args.seed,
        "final_loss": None if math.isnan(result.final_loss) else result.final_loss,
    }
    save_checkpoint(args.out, model, tok.fingerprint(), meta)
    timer.add_output(args.out)
    if args.log:
        timer.add_output(args.log)
    timer.finish(str(args.out) + ".manifest.json")
    loss_txt = "n/a" if meta["final_loss"] is None else f"{meta['final_loss']:.4f}"
    print(f"{arch}: {model.num_params():,} params, final loss {loss_txt} -> {args.out}")
    return 0


def cmd_index(args) -> int:
    merchants = _read_merchants(args.catalog)
    timer = ManifestTimer(
        "index", None, {"route": args.route, "catalog": args.catalog}
    )
    if args.route == "string":
        index = StringIndex(
            [m.merchant_id for m in merchants],
            [m.name for m in merchants],
            [m.zipcode for m in merchants],
        )
    elif args.route == "vector":
        if not args.ckpt or not args.tokenizer:
            raise ConfigError("vector route needs --ckpt and --tokenizer")
        model, tok = _load_model(args.ckpt, args.tokenizer)
        if model.config.arch != "encoder_only":
            raise ConfigError("vector route needs an encoder checkpoint")
        timer.add_input(args.ckpt)
        timer.add_input(args.tokenizer)
        index = vector_index_from_merchants(merchants, model, tok)
    else:
        raise ConfigError(f"unknown route {args.route!r}")
    index.save(args.out)
    timer.add_output(args.out)
    timer.finish(str(args.out) + ".manifest.json")
    print(f"{args.route} index over {len(merchants)} merchants -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    bundle = load_bundle(args.data)
    model, tok = _load_model(args.ckpt, args.tokenizer)
    timer = ManifestTimer(
        "evaluate", None,
        {"route": args.route, "ckpt": args.ckpt, "data": args.data,
         "limit": args.limit},
    )
    timer.add_input(args.ckpt)
    timer.add_input(Path(args.data) / "bundle.json")
    resolver = _build_resolver(args.route, model, tok, bundle.merchants,
                               args.max_steps)
    report = evaluate(
        resolver,
        bundle,
        limit_per_split=args.limit,
        model_hash=sha256_file(args.ckpt),
        bundle_hash=sha256_file(Path(args.data) / "bundle.json"),
    )
    Path(args.report).write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
    )
    timer.add_output(args.report)
    timer.finish(str(args.report) + ".manifest.json")
    print(
        f"weighted accuracy {report.weighted_accuracy:.4f} "
        f"(p95 {report.latency_ms['p95']:.1f} ms/txn) -> {args.report}"
    )
    return 0


def cmd_bench(args) -> int:
    bundle = load_bundle(args.data)
    model, tok = _load_model(args.ckpt, args.tokenizer)
    resolver = _build_resolver(args.route, model, tok, bundle.merchants,
                               args.max_steps)
    txns = [t for split in bundle.tests.values() for t in split]
    timer = ManifestTimer(
        "bench", None,
        {"route": args.route, "warmup": args.warmup, "iterations": args.iterations},
    )
    timer.add_input(args.ckpt)
    pct = latency_bench(resolver, txns, warmup=args.warmup,
                        iterations=args.iterations)
    print(json.dumps(pct, sort_keys=True))
    if args.report:
        Path(args.report).write_text(json.dumps(pct, sort_keys=True, indent=2) + "\n")
        timer.add_output(args.report)
        timer.finish(str(args.report) + ".manifest.json")
    else:
        timer.finish(str(args.ckpt) + ".bench.manifest.json")
    return 0


def cmd_sweep(args) -> int:
    grid_path = Path(args.grid)
    if not grid_path.exists():
        raise ConfigError(f"grid file not found: {grid_path}")
    doc = json.loads(grid_path.read_text())
    for axis in ("tokenizers", "vocab_sizes", "embed_dims", "num_layers"):
        if axis in doc:
            doc[axis] = tuple(doc[axis])
    try:
        cfg = SweepConfig(**doc)
    except TypeError as exc:
        raise ConfigError(f"bad grid spec: {exc}")
    bundle = load_bundle(args.data)
    timer = ManifestTimer("sweep", cfg.seed, dataclasses.asdict(cfg))
    timer.add_input(grid_path)
    timer.add_input(Path(args.data) / "bundle.json")
    summary = run_sweep(bundle, cfg, args.out)
    out = Path(args.out)
    timer.add_output(out / "sweep.json")
    timer.add_output(out / "sweep.csv")
    timer.finish(out / "manifest.json")
    done = sum(1 for c in summary["cells"] if "error" not in c)
    print(f"{done}/{len(summary['cells'])} cells complete -> {out}")
    return 0


def cmd_pipeline(args) -> int:
    config_path = Path(args.config)
    if not config_path.exists():
        raise ConfigError(f"pipeline config not found: {config_path}")
    doc = json.loads(config_path.read_text())
    rules = [Rule(**r) for r in json.loads(Path(doc["rules"]).read_text())]
    merchants = _read_merchants(doc["catalog"])
    resolver = None
    if doc.get("checkpoint"):
        if not doc.get("tokenizer"):
            raise ConfigError("pipeline config with a checkpoint needs a tokenizer")
        model, tok = _load_model(doc["checkpoint"], doc["tokenizer"])
        index = StringIndex(
            [m.merchant_id for m in merchants],
            [m.name for m in merchants],
            [m.zipcode for m in merchants],
        )
        resolver = GenerativeResolver(model, tok, index,
                                      max_steps=doc.get("max_steps", 24))
    pipe = Pipeline(
        rules,
        merchants,
        esd=EsdConfig(**doc.get("esd", {})),
        resolver=resolver,
        filters=FilterConfig(**doc.get("filters", {})),
    )
    txns = _read_txns(args.infile)
    timer = ManifestTimer("pipeline", None, doc)
    timer.add_input(config_path)
    timer.add_input(args.infile)
    decisions, stats = pipe.run(txns)
    save_decisions(decisions, args.out)
    timer.add_output(args.out)
    if args.review:
        export_review(decisions, args.review)
        timer.add_output(args.review)
    timer.finish(str(args.out) + ".manifest.json")
    print(
        f"decisions: {stats.counts} coverage={stats.coverage:.3f} -> {args.out}"
    )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="txnmatch",
        description="Transaction-to-merchant resolution: data, tokenizers, "
                    "models, retrieval, evaluation, deployment pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--merchants", type=int, required=True)
    p.add_argument("--per-merchant", type=int, default=10)
    p.add_argument("--test", type=int, default=None,
                   help="test transactions (default: train/5, floor 40)")
    p.add_argument("--noise", choices=sorted(NOISE_PROFILES), default="default")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-tokenizer", help="train a subword tokenizer")
    p.add_argument("--algo", choices=ALGORITHMS, required=True)
    p.add_argument("--vocab", type=int, required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("train", help="train a model on a bundle")
    p.add_argument("--arch", choices=sorted(ARCH_ALIASES), required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--embed-dim", type=int, default=128)
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--ffn-mult", type=float, default=4.0)
    p.add_argument("--max-len", type=int, default=128)
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", default=None, help="NDJSON loss log path")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="build a retrieval index from a catalog")
    p.add_argument("--catalog", required=True,
                   help="merchants.jsonl file or bundle directory")
    p.add_argument("--route", choices=("string", "vector"), required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--tokenizer", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("evaluate", help="score a checkpoint over a bundle")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--route", choices=("string", "vector"), required=True)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=24)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="steady-state latency percentiles")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--route", choices=("string", "vector"), required=True)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--max-steps", type=int, default=24)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="run or resume a grid sweep")
    p.add_argument("--grid", required=True, help="JSON grid spec")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pipeline", help="staged resolution over transactions")
    p.add_argument("--config", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--review", default=None)
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
