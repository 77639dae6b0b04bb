"""Staged-pipeline walkthrough: rules, fuzzy directory, model, review export.

Generates a bundle, trains a small generative model, then routes every
transaction through the staged pipeline twice — once without the model stage
and once with it — to show the coverage the model adds. Writes decisions and
the low-confidence review export next to each other.

Example:
    python3 scripts/run_pipeline_demo.py --out runs/pipeline
"""

import argparse
import time
from pathlib import Path

from txnmatch.datagen import GenConfig, generate_bundle, tokenizer_corpus
from txnmatch.evaluation import GenerativeResolver, build_string_index
from txnmatch.models import ModelConfig, build_model
from txnmatch.pipeline import Pipeline, export_review, save_decisions
from txnmatch.tokenizers import train_bpe
from txnmatch.training import TrainConfig, train_generative


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    ap.add_argument("--merchants", type=int, default=30)
    ap.add_argument("--train", type=int, default=1100)
    ap.add_argument("--test", type=int, default=80)
    ap.add_argument("--iters", type=int, default=1500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/pipeline"))
    args = ap.parse_args()

    t0 = time.perf_counter()
    bundle = generate_bundle(
        GenConfig(n_merchants=args.merchants, n_train=args.train,
                  n_test=args.test, seed=args.seed)
    )
    tok = train_bpe(tokenizer_corpus(bundle), 150)
    by_id = {m.merchant_id: m for m in bundle.merchants}
    pairs = [
        (f"{t.raw_text} zip {t.zipcode}", by_id[t.gold_merchant_id].name)
        for t in bundle.train
    ]
    model = build_model(
        ModelConfig("decoder_only", tok.vocab_size, 32, 2, max_len=96), seed=args.seed
    )
    train_generative(
        model, tok, pairs,
        TrainConfig(iterations=args.iters, batch_size=32, lr=2e-3, seed=args.seed),
    )
    print(f"[{time.perf_counter() - t0:6.1f}s] model trained", flush=True)

    resolver = GenerativeResolver(model, tok, build_string_index(bundle), max_steps=12)
    txns = bundle.train[:220] + [t for s in bundle.tests.values() for t in s]

    base_decisions, base_stats = Pipeline(bundle.rules, bundle.merchants).run(txns)
    full_decisions, full_stats = Pipeline(
        bundle.rules, bundle.merchants, resolver=resolver
    ).run(txns)

    print(f"{'stage':10s} {'without model':>14s} {'with model':>12s}")
    for stage in ("rule", "esd", "model", "unmatched"):
        print(f"{stage:10s} {base_stats.counts[stage]:>14d} "
              f"{full_stats.counts[stage]:>12d}")
    print(f"coverage   {base_stats.coverage:>14.3f} {full_stats.coverage:>12.3f}")

    args.out.mkdir(parents=True, exist_ok=True)
    save_decisions(full_decisions, args.out / "decisions.jsonl")
    n = export_review(full_decisions, args.out / "review.jsonl")
    print(f"{n} decisions exported for review -> {args.out}/review.jsonl")


if __name__ == "__main__":
    main()
