"""Tokenizer/capacity sweep driver.

Runs the resumable sweep grid over tokenizer algorithm, vocabulary size,
embedding dimension, and depth on one synthetic bundle, then prints the
result table sorted by weighted accuracy. Interrupt and rerun with the same
--out to resume: finished cells are never recomputed.

Example:
    python3 scripts/run_capacity_sweep.py --out runs/sweep \
        --tokenizers bpe,wordpiece --vocabs 100,500 --dims 32,64 --layers 2
"""

import argparse
import csv
from pathlib import Path

from txnmatch.datagen import GenConfig, generate_bundle
from txnmatch.sweep import SweepConfig, run_sweep


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(","))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    ap.add_argument("--merchants", type=int, default=200)
    ap.add_argument("--train", type=int, default=1500)
    ap.add_argument("--test", type=int, default=400)
    ap.add_argument("--tokenizers", default="bpe,wordpiece,unigram")
    ap.add_argument("--vocabs", type=_ints, default=(100, 500))
    ap.add_argument("--dims", type=_ints, default=(32, 64))
    ap.add_argument("--layers", type=_ints, default=(2,))
    ap.add_argument("--iters", type=int, default=300)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--eval-limit", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args()

    bundle = generate_bundle(
        GenConfig(n_merchants=args.merchants, n_train=args.train,
                  n_test=args.test, seed=args.seed)
    )
    cfg = SweepConfig(
        tokenizers=tuple(args.tokenizers.split(",")),
        vocab_sizes=args.vocabs,
        embed_dims=args.dims,
        num_layers=args.layers,
        iterations=args.iters,
        batch_size=args.batch,
        eval_limit=args.eval_limit,
        seed=args.seed,
    )
    run_sweep(bundle, cfg, args.out)

    with open(args.out / "sweep.csv") as f:
        rows = list(csv.DictReader(f))
    rows.sort(key=lambda r: -float(r["weighted_accuracy"] or -1.0))
    width = max(len(r["tokenizer"]) for r in rows)
    for r in rows:
        wa = r["weighted_accuracy"]
        print(f"{r['tokenizer']:{width}s} V={r['V']:>6s} D={r['D']:>4s} "
              f"L={r['L']:>2s}  WA={wa if wa else 'failed'}")


if __name__ == "__main__":
    main()
