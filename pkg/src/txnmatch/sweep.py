"""Grid sweep over tokenizer algorithm, vocabulary size, embedding width,
and depth. Each cell trains a tokenizer and a model from scratch on the
bundle, resolves every test split, and records its weighted accuracy.

Cells are keyed by a deterministic slug and written to their own JSON file
as soon as they finish, so an interrupted sweep resumes by skipping every
cell whose file already exists. A cell that raises records the error in its
file and the sweep moves on. The aggregate sweep.json and sweep.csv contain
no wall-clock fields: rerunning the same sweep with the same seed
reproduces them byte for byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

from .common import ConfigError, stable_json
from .datagen import Bundle, tokenizer_corpus
from .evaluation import GenerativeResolver, build_string_index, evaluate
from .models import ARCHES, ModelConfig, build_model
from .tokenizers import ALGORITHMS, train_tokenizer
from .training import TrainConfig, train_generative

CSV_COLUMNS = ("tokenizer", "V", "D", "L", "weighted_accuracy")


@dataclasses.dataclass(frozen=True)
class SweepConfig:
    tokenizers: tuple[str, ...]
    vocab_sizes: tuple[int, ...]
    embed_dims: tuple[int, ...]
    num_layers: tuple[int, ...]
    arch: str = "decoder_only"
    iterations: int = 300
    batch_size: int = 16
    lr: float = 1e-3
    ffn_mult: float = 4.0
    max_len: int = 96
    max_steps: int = 20
    eval_limit: int | None = None
    seed: int = 0

    def __post_init__(self):
        for field, vals in (
            ("tokenizers", self.tokenizers),
            ("vocab_sizes", self.vocab_sizes),
            ("embed_dims", self.embed_dims),
            ("num_layers", self.num_layers),
        ):
            if not vals:
                raise ConfigError(f"sweep {field} must be non-empty")
        unknown = set(self.tokenizers) - set(ALGORITHMS)
        if unknown:
            raise ConfigError(f"unknown tokenizer algorithms: {sorted(unknown)}")
        if self.arch not in ARCHES:
            raise ConfigError(f"unknown architecture {self.arch!r}")

    def cells(self) -> list[tuple[str, int, int, int]]:
        """Grid order is the listing order of each axis, outermost first."""
        return [
            (t, v, d, l)
            for t in self.tokenizers
            for v in self.vocab_sizes
            for d in self.embed_dims
            for l in self.num_layers
        ]


def cell_slug(tokenizer: str, vocab_size: int, embed_dim: int, num_layers: int) -> str:
    return f"{tokenizer}_v{vocab_size}_d{embed_dim}_l{num_layers}"


def _cell_seed(base_seed: int, slug: str) -> int:
    digest = hashlib.sha256(f"{base_seed}:{slug}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def _run_cell(bundle: Bundle, cfg: SweepConfig, tokenizer_algo: str,
              vocab_size: int, embed_dim: int, num_layers: int) -> dict:
    slug = cell_slug(tokenizer_algo, vocab_size, embed_dim, num_layers)
    seed = _cell_seed(cfg.seed, slug)
    tok = train_tokenizer(tokenizer_algo, tokenizer_corpus(bundle), vocab_size)
    model_config = ModelConfig(
        arch=cfg.arch,
        vocab_size=vocab_size,
        embed_dim=embed_dim,
        num_layers=num_layers,
        ffn_mult=cfg.ffn_mult,
        max_len=cfg.max_len,
    )
    model = build_model(model_config)
    by_id = {m.merchant_id: m for m in bundle.merchants}
    pairs = [
        (f"{t.raw_text} zip {t.zipcode}", by_id[t.gold_merchant_id].name)
        for t in bundle.train
    ]
    train_config = TrainConfig(
        iterations=cfg.iterations,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        seed=seed,
    )
    result = train_generative(model, tok, pairs, train_config)
    resolver = GenerativeResolver(model, tok, build_string_index(bundle),
                                  max_steps=cfg.max_steps)
    report = evaluate(resolver, bundle, limit_per_split=cfg.eval_limit)
    return {
        "slug": slug,
        "tokenizer": tokenizer_algo,
        "vocab_size": vocab_size,
        "embed_dim": embed_dim,
        "num_layers": num_layers,
        "seed": seed,
        "model_config": dataclasses.asdict(model_config),
        "train_config": dataclasses.asdict(train_config),
        "parameter_count": model.num_params(),
        "final_loss": result.final_loss,
        "weighted_accuracy": report.weighted_accuracy,
        "split_top1": report.split_top1,
        "split_top5": report.split_top5,
        "precision": report.precision,
        "recall": report.recall,
    }


def _csv_line(cell: dict) -> str:
    wa = cell.get("weighted_accuracy")
    return ",".join([
        cell["tokenizer"],
        str(cell["vocab_size"]),
        str(cell["embed_dim"]),
        str(cell["num_layers"]),
        repr(float(wa)) if wa is not None else "",
    ])


def run_sweep(bundle: Bundle, cfg: SweepConfig, out_dir: str | Path) -> dict:
    """Run (or resume) the grid; returns the aggregate summary dict.

    Writes cells/<slug>.json per cell plus sweep.json and sweep.csv.
    """
    out = Path(out_dir)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    cells = []
    for tokenizer_algo, vocab_size, embed_dim, num_layers in cfg.cells():
        slug = cell_slug(tokenizer_algo, vocab_size, embed_dim, num_layers)
        cell_path = cells_dir / f"{slug}.json"
        if cell_path.exists():
            cells.append(json.loads(cell_path.read_text()))
            continue
        try:
            cell = _run_cell(bundle, cfg, tokenizer_algo, vocab_size,
                             embed_dim, num_layers)
        except Exception as exc:  # cell failures must not kill the sweep
            cell = {
                "slug": slug,
                "tokenizer": tokenizer_algo,
                "vocab_size": vocab_size,
                "embed_dim": embed_dim,
                "num_layers": num_layers,
                "error": f"{type(exc).__name__}: {exc}",
            }
        cell_path.write_text(stable_json(cell) + "\n")
        cells.append(cell)
    summary = {"config": dataclasses.asdict(cfg), "cells": cells}
    (out / "sweep.json").write_text(stable_json(summary) + "\n")
    lines = [",".join(CSV_COLUMNS)] + [_csv_line(c) for c in cells]
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    return summary
