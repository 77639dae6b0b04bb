"""Training loop, losses, negative sampling, and checkpoints.

Optimization is AdamW with decoupled weight decay (1-D parameters — biases
and norm scales — are never decayed), linear warmup to a constant learning
rate, and global-norm gradient clipping. Runs are bit-reproducible under a
fixed seed. A non-finite loss aborts immediately with the iteration number
and a hash of the offending batch.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import time
from pathlib import Path
from typing import Callable

import numpy as np

from .common import ConfigError, FormatError, TrainingDivergedError, sha256_bytes
from . import tensor as T
from .models import ModelConfig, build_model, parameter_count
from .text import char_trigrams, jaccard, token_set
from .tokenizers import Tokenizer

_CKPT_MAGIC = b"TXMCKPT1"
_CKPT_VERSION = 1


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    iterations: int
    batch_size: int = 64
    lr: float = 3e-4
    warmup_iters: int = 100
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    margin: float = 0.5
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (self.lr > 0):
            raise ConfigError("lr must be positive")


# ---------------------------------------------------------------------------
# losses


def contrastive_loss(anchor: T.Tensor, positive: T.Tensor, negative: T.Tensor,
                     margin: float = 0.5) -> T.Tensor:
    """Mean over pairs of (1 − a·p) + max(0, a·n − margin).

    Inputs are (B, D) unit vectors, so the dot products are cosine
    similarities.
    """
    pos_sim = T.tsum(T.mul(anchor, positive), axis=-1)
    neg_sim = T.tsum(T.mul(anchor, negative), axis=-1)
    per_pair = T.add(T.mul(pos_sim, -1.0), T.relu(T.add(neg_sim, -margin)))
    return T.add(T.tmean(per_pair), 1.0)


# ---------------------------------------------------------------------------
# negative sampling


def _name_signature(name: str) -> frozenset[str]:
    toks = token_set(name)
    if len(toks) > 1:
        return toks
    return char_trigrams(name)  # single-token names compare by trigrams


def build_contrastive_triples(
    anchor_texts: list[str],
    gold_names: list[str],
    catalog_names: list[str],
    rng: np.random.Generator,
    low: float = 0.75,
    high: float = 1.0,
) -> tuple[list[tuple[str, str, str]], int]:
    """(anchor, positive, negative) triples with hard negatives.

    The negative for a pair is drawn uniformly from catalog names whose
    signature Jaccard with the positive lies strictly inside (low, high);
    when the band is empty it falls back to the highest-similarity name
    below `high`; pairs with no candidate at all are dropped. Returns the
    triples and the dropped count.
    """
    sigs = {n: _name_signature(n) for n in catalog_names}
    band: dict[str, list[str]] = {}
    fallback: dict[str, str | None] = {}
    for gold in sorted(set(gold_names)):
        gsig = sigs.get(gold, _name_signature(gold))
        in_band: list[str] = []
        best_name, best_j = None, -1.0
        for cand in catalog_names:
            if cand == gold:
                continue
            j = jaccard(gsig, sigs[cand])
            if j >= high:
                continue  # effectively the same name; not a negative
            if j > low:
                in_band.append(cand)
            if j > best_j:
                best_name, best_j = cand, j
        band[gold] = in_band
        fallback[gold] = best_name

    triples: list[tuple[str, str, str]] = []
    dropped = 0
    for anchor, gold in zip(anchor_texts, gold_names):
        candidates = band.get(gold, [])
        if candidates:
            neg = candidates[int(rng.integers(len(candidates)))]
        elif fallback.get(gold) is not None:
            neg = fallback[gold]
        else:
            dropped += 1
            continue
        triples.append((anchor, gold, neg))
    return triples, dropped


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    Decay applies only to parameters with ndim >= 2; the learning rate
    warms up linearly over `warmup_iters` steps and stays constant after.
    """

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01, warmup_iters=100):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup_iters = max(1, warmup_iters)
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def current_lr(self) -> float:
        return self.lr * min(1.0, self.t / self.warmup_iters)

    def step(self) -> None:
        self.t += 1
        lr_t = self.current_lr()
        for (name, p), m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m += (1.0 - self.b1) * (g - m)
            v += (1.0 - self.b2) * (g * g - v)
            mhat = m / (1.0 - self.b1**self.t)
            vhat = v / (1.0 - self.b2**self.t)
            p.data -= lr_t * (mhat / (np.sqrt(vhat) + self.eps))
            if self.weight_decay and p.data.ndim >= 2:
                p.data -= lr_t * self.weight_decay * p.data


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all gradients so the joint L2 norm is at most max_norm."""
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# training loops


@dataclasses.dataclass
class TrainResult:
    iterations: int
    final_loss: float
    loss_curve: list[tuple[int, float, float]]  # (iteration, loss, ma100)
    wall_time_s: float


def _batch_hash(arrs: list[np.ndarray]) -> str:
    h = b"".join(np.ascontiguousarray(a).tobytes() for a in arrs)
    return sha256_bytes(h)[:12]


def _run_loop(
    model,
    cfg: TrainConfig,
    num_examples: int,
    loss_fn: Callable[[np.ndarray], tuple[T.Tensor, list[np.ndarray]]],
    log_path: str | Path | None,
) -> TrainResult:
    if num_examples < 1:
        raise ConfigError("training needs at least one example")
    rng = np.random.default_rng(cfg.seed)
    params = model.params()
    opt = AdamW(
        params,
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        warmup_iters=cfg.warmup_iters,
    )
    window: list[float] = []
    curve: list[tuple[int, float, float]] = []
    log_f = open(log_path, "w") if log_path else None
    t0 = time.perf_counter()
    try:
        for it in range(1, cfg.iterations + 1):
            idx = rng.integers(0, num_examples, size=cfg.batch_size)
            with T.Tape() as tape:
                loss, batch_arrays = loss_fn(idx)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise TrainingDivergedError(it, _batch_hash(batch_arrays))
            tape.backward(loss)
            clip_global_norm(params, cfg.clip_norm)
            opt.step()
            model.zero_grads()
            window.append(loss_val)
            if len(window) > 100:
                window.pop(0)
            if it % cfg.log_every == 0 or it == cfg.iterations:
                ma = sum(window) / len(window)
                curve.append((it, loss_val, ma))
                if log_f:
                    log_f.write(
                        json.dumps(
                            {"iteration": it, "loss": loss_val, "ma100": ma}
                        )
                        + "\n"
                    )
    finally:
        if log_f:
            log_f.close()
    return TrainResult(
        iterations=cfg.iterations,
        final_loss=float(curve[-1][1]) if curve else float("nan"),
        loss_curve=curve,
        wall_time_s=time.perf_counter() - t0,
    )


def train_generative(
    model,
    tokenizer: Tokenizer,
    pairs: list[tuple[str, str]],
    cfg: TrainConfig,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Teacher-forced next-token training on (source text, target name) pairs."""
    enc = [
        (tokenizer.encode(src), tokenizer.encode(tgt)) for src, tgt in pairs
    ]
    enc = [(s, t) for s, t in enc if t]  # a target that tokenizes empty is unusable

    def loss_fn(idx):
        srcs = [enc[i][0] for i in idx]
        tgts = [enc[i][1] for i in idx]
        loss = model.loss(srcs, tgts, bos=tokenizer.bos_id, eos=tokenizer.eos_id)
        return loss, [np.asarray(idx)]

    return _run_loop(model, cfg, len(enc), loss_fn, log_path)


def train_contrastive(
    model,
    tokenizer: Tokenizer,
    triples: list[tuple[str, str, str]],
    cfg: TrainConfig,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Margin-based embedding training on (anchor, positive, negative) texts."""
    enc = [
        (tokenizer.encode(a), tokenizer.encode(p), tokenizer.encode(n))
        for a, p, n in triples
    ]
    enc = [t for t in enc if t[0] and t[1] and t[2]]

    def loss_fn(idx):
        a = model.embed_sequences([enc[i][0] for i in idx])
        p = model.embed_sequences([enc[i][1] for i in idx])
        n = model.embed_sequences([enc[i][2] for i in idx])
        loss = contrastive_loss(a, p, n, margin=cfg.margin)
        return loss, [np.asarray(idx)]

    return _run_loop(model, cfg, len(enc), loss_fn, log_path)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    path: str | Path,
    model,
    tokenizer_fingerprint: str,
    training_meta: dict,
) -> None:
    """Versioned binary: magic, u32 version, JSON header, f32-LE blobs."""
    tensors = []
    blobs = []
    offset = 0
    for name, p in model.params():
        data = np.ascontiguousarray(p.data.astype("<f4"))
        tensors.append(
            {
                "name": name,
                "shape": list(data.shape),
                "offset": offset,
                "nbytes": data.nbytes,
            }
        )
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {
        "config": dataclasses.asdict(model.config),
        "tokenizer_ref": tokenizer_fingerprint,
        "training_meta": training_meta,
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for b in blobs:
            f.write(b)


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray], str, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a model checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", raw[8:16])
    if version != _CKPT_VERSION:
        raise FormatError(
            f"{path}: unsupported checkpoint version {version} (supported: {_CKPT_VERSION})"
        )
    header = json.loads(raw[16 : 16 + header_len].decode())
    config = ModelConfig(**header["config"])
    blob_start = 16 + header_len
    arrays: dict[str, np.ndarray] = {}
    for spec in header["tensors"]:
        start = blob_start + spec["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=spec["nbytes"] // 4, offset=start)
        arrays[spec["name"]] = arr.reshape(spec["shape"]).copy()
    total = sum(a.size for a in arrays.values())
    expect = parameter_count(config)
    if total != expect:
        raise FormatError(
            f"{path}: stored parameters ({total}) do not match the config's "
            f"parameter count ({expect})"
        )
    return config, arrays, header["tokenizer_ref"], header["training_meta"]


def model_from_checkpoint(path: str | Path, tokenizer: Tokenizer):
    """Rebuild the model and refuse a tokenizer whose fingerprint differs."""
    config, arrays, tok_ref, meta = load_checkpoint(path)
    if tokenizer.fingerprint() != tok_ref:
        raise FormatError(
            f"{path}: checkpoint was trained with tokenizer {tok_ref[:12]}…, "
            f"got {tokenizer.fingerprint()[:12]}…"
        )
    if config.vocab_size != tokenizer.vocab_size:
        raise FormatError(
            f"{path}: model vocab {config.vocab_size} != tokenizer vocab "
            f"{tokenizer.vocab_size}"
        )
    model = build_model(config, seed=0)
    model.load_param_arrays(arrays)
    model._training_meta = meta
    return model
