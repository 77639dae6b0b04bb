"""End-to-end route comparison on one synthetic bundle.

Generates a merchant catalog and noisy transactions, trains the generative
(decoder + string retrieval) and embedding (encoder + vector retrieval)
routes under the same iteration budget, and prints per-split accuracy,
weighted accuracy, and latency percentiles for both.

Example:
    python3 scripts/run_end_to_end.py --merchants 500 --train 5000 --test 1200 \
        --iters 1500 --out runs/e2e
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from txnmatch.datagen import GenConfig, generate_bundle, tokenizer_corpus
from txnmatch.evaluation import (
    EmbeddingResolver,
    GenerativeResolver,
    build_string_index,
    build_vector_index,
    evaluate,
)
from txnmatch.models import ModelConfig, build_model
from txnmatch.tokenizers import train_bpe
from txnmatch.training import (
    TrainConfig,
    build_contrastive_triples,
    train_contrastive,
    train_generative,
)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    ap.add_argument("--merchants", type=int, default=500)
    ap.add_argument("--train", type=int, default=5000)
    ap.add_argument("--test", type=int, default=1200)
    ap.add_argument("--vocab", type=int, default=500)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--layers", type=int, default=2)
    ap.add_argument("--iters", type=int, default=1500)
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--lr", type=float, default=2e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=None, help="write reports as JSON here")
    args = ap.parse_args()

    t0 = time.perf_counter()
    bundle = generate_bundle(
        GenConfig(n_merchants=args.merchants, n_train=args.train,
                  n_test=args.test, seed=args.seed)
    )
    tok = train_bpe(tokenizer_corpus(bundle), args.vocab)
    by_id = {m.merchant_id: m for m in bundle.merchants}
    print(f"[{time.perf_counter() - t0:6.1f}s] bundle + tokenizer ready", flush=True)

    pairs = [
        (f"{t.raw_text} zip {t.zipcode}", by_id[t.gold_merchant_id].name)
        for t in bundle.train
    ]
    dec = build_model(
        ModelConfig("decoder_only", tok.vocab_size, args.dim, args.layers, max_len=96),
        seed=args.seed,
    )
    res = train_generative(
        dec, tok, pairs,
        TrainConfig(iterations=args.iters, batch_size=args.batch, lr=args.lr,
                    seed=args.seed),
    )
    print(f"[{time.perf_counter() - t0:6.1f}s] generative route trained "
          f"(final loss {res.final_loss:.4f})", flush=True)
    dec_report = evaluate(
        GenerativeResolver(dec, tok, build_string_index(bundle), max_steps=16), bundle
    )

    enc = build_model(
        ModelConfig("encoder_only", tok.vocab_size, args.dim, args.layers, max_len=96),
        seed=args.seed + 1,
    )
    triples, dropped = build_contrastive_triples(
        [t.raw_text for t in bundle.train],
        [by_id[t.gold_merchant_id].name for t in bundle.train],
        [m.name for m in bundle.seen_merchants],
        np.random.default_rng(args.seed),
    )
    res = train_contrastive(
        enc, tok, triples,
        TrainConfig(iterations=args.iters, batch_size=args.batch, lr=args.lr,
                    seed=args.seed + 1),
    )
    print(f"[{time.perf_counter() - t0:6.1f}s] embedding route trained "
          f"(final loss {res.final_loss:.4f}, {dropped} pairs dropped)", flush=True)
    enc_report = evaluate(
        EmbeddingResolver(enc, tok, build_vector_index(bundle, enc, tok)), bundle
    )

    for label, rep in (("generative+string", dec_report),
                       ("embedding+vector", enc_report)):
        splits = " ".join(f"{k}={v:.3f}" for k, v in rep.split_top1.items())
        print(f"{label:20s} WA={rep.weighted_accuracy:.4f}  {splits}  "
              f"p95={rep.latency_ms['p95']:.1f}ms")

    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        for name, rep in (("generative", dec_report), ("embedding", enc_report)):
            (args.out / f"report_{name}.json").write_text(
                json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n"
            )
        print(f"reports written to {args.out}/")


if __name__ == "__main__":
    main()
