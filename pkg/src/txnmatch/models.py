"""Transformer architectures: encoder-only, decoder-only, encoder-decoder.

All three share pre-LN blocks with a final LayerNorm per stack, fixed
sinusoidal positions, GELU feed-forwards, and separate q/k/v/o projections
(uniform ±1/√fan_in init; embeddings N(0, 0.02)).

Sequence conventions:
  decoder-only packs   src ⊕ [BOS] ⊕ tgt ⊕ [EOS]   into one causal stream;
  encoder-decoder encodes src and decodes [BOS] ⊕ tgt ⊕ [EOS] with
  cross-attention; `num_layers` counts total blocks, split evenly.
  `forward_logits(src, prefix)` returns len(prefix)+1 rows: row i scores
  tgt token i given src and prefix[<i]; the last row scores the
  continuation after the full prefix.

The encoder-only model maps a token sequence to a unit vector by masked
mean-pooling its final hidden states.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .common import ConfigError
from . import tensor as T
from .tensor import Tensor

ARCHES = ("encoder_only", "decoder_only", "encoder_decoder")


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    arch: str
    vocab_size: int
    embed_dim: int
    num_layers: int
    ffn_mult: float = 4.0
    max_len: int = 128
    num_heads: int = 0  # 0 -> max(2, embed_dim // 32)

    def __post_init__(self):
        if self.arch not in ARCHES:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {ARCHES}")
        if self.vocab_size < 5:
            raise ConfigError("vocab_size must cover the four specials plus content")
        heads = self.heads
        if self.embed_dim % heads != 0:
            raise ConfigError(
                f"embed_dim={self.embed_dim} not divisible by {heads} heads"
            )
        if self.embed_dim % 2 != 0:
            raise ConfigError("embed_dim must be even for sinusoidal positions")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.arch == "encoder_decoder" and self.num_layers % 2 != 0:
            raise ConfigError(
                "encoder_decoder splits num_layers evenly; it must be even"
            )
        if self.ffn_dim < 1:
            raise ConfigError("ffn_mult too small: feed-forward width is zero")

    @property
    def heads(self) -> int:
        return self.num_heads or max(2, self.embed_dim // 32)

    @property
    def ffn_dim(self) -> int:
        return int(round(self.ffn_mult * self.embed_dim))


def parameter_count(config: ModelConfig) -> int:
    """Closed-form size of the parameter vector; matches the tensors exactly."""
    d, f, v, l = config.embed_dim, config.ffn_dim, config.vocab_size, config.num_layers
    attn = 4 * d * d + 4 * d
    ffn = 2 * d * f + f + d
    ln = 2 * d
    std_block = attn + ffn + 2 * ln
    cross_block = std_block + attn + ln
    embed = v * d
    head = d * v
    if config.arch == "encoder_only":
        return embed + l * std_block + ln
    if config.arch == "decoder_only":
        return embed + l * std_block + ln + head
    half = l // 2
    return embed + half * std_block + ln + half * cross_block + ln + head


def sinusoidal_positions(max_len: int, dim: int, dtype=np.float32) -> np.ndarray:
    """(max_len, dim) fixed position table: sin on even, cos on odd columns."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.empty((max_len, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table.astype(dtype)


def pad_batch(seqs: list[list[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the batch max; returns (ids (B, T), lengths (B,))."""
    if not seqs:
        raise ValueError("empty batch")
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    t = max(1, int(lengths.max()))
    ids = np.full((len(seqs), t), pad_id, dtype=np.int64)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = s
    return ids, lengths


def _linear_init(rng, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class _Linear:
    def __init__(self, rng, fan_in, fan_out, dtype, name):
        self.w = T.parameter(_linear_init(rng, fan_in, fan_out, dtype), name + ".w")
        self.b = T.parameter(np.zeros(fan_out, dtype=dtype), name + ".b")

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)

    def params(self):
        return [(self.w.name, self.w), (self.b.name, self.b)]


class _LayerNorm:
    def __init__(self, dim, dtype, name):
        self.g = T.parameter(np.ones(dim, dtype=dtype), name + ".g")
        self.b = T.parameter(np.zeros(dim, dtype=dtype), name + ".b")

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.g, self.b)

    def params(self):
        return [(self.g.name, self.g), (self.b.name, self.b)]


class _Attention:
    """Multi-head scaled dot-product attention with an additive mask."""

    def __init__(self, rng, dim, heads, dtype, name):
        self.heads = heads
        self.dh = dim // heads
        self.q = _Linear(rng, dim, dim, dtype, name + ".q")
        self.k = _Linear(rng, dim, dim, dtype, name + ".k")
        self.v = _Linear(rng, dim, dim, dtype, name + ".v")
        self.o = _Linear(rng, dim, dim, dtype, name + ".o")
        self.name = name

    def _split(self, x: Tensor, b: int, t: int) -> Tensor:
        return T.transpose(T.reshape(x, (b, t, self.heads, self.dh)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, kv: Tensor, mask: np.ndarray | None, probe=None) -> Tensor:
        b, tq, d = x.shape
        tk = kv.shape[1]
        q = self._split(self.q(x), b, tq)
        k = self._split(self.k(kv), b, tk)
        v = self._split(self.v(kv), b, tk)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.dh))
        if mask is not None:
            scores = T.add(scores, mask)
        weights = T.softmax(scores)
        if probe is not None:
            probe[self.name] = weights.data.copy()
        ctx = T.transpose(T.matmul(weights, v), (0, 2, 1, 3))
        return self.o(T.reshape(ctx, (b, tq, d)))

    def params(self):
        return self.q.params() + self.k.params() + self.v.params() + self.o.params()


class _Block:
    """Pre-LN transformer block; `cross=True` adds encoder attention."""

    def __init__(self, rng, dim, heads, ffn_dim, dtype, name, cross=False):
        self.ln1 = _LayerNorm(dim, dtype, name + ".ln1")
        self.attn = _Attention(rng, dim, heads, dtype, name + ".attn")
        self.cross = None
        self.lnx = None
        if cross:
            self.lnx = _LayerNorm(dim, dtype, name + ".lnx")
            self.cross = _Attention(rng, dim, heads, dtype, name + ".xattn")
        self.ln2 = _LayerNorm(dim, dtype, name + ".ln2")
        self.fc1 = _Linear(rng, dim, ffn_dim, dtype, name + ".fc1")
        self.fc2 = _Linear(rng, ffn_dim, dim, dtype, name + ".fc2")

    def __call__(self, x, mask, enc=None, enc_mask=None, probe=None):
        h = self.ln1(x)
        x = T.add(x, self.attn(h, h, mask, probe))
        if self.cross is not None:
            x = T.add(x, self.cross(self.lnx(x), enc, enc_mask, probe))
        x = T.add(x, self.fc2(T.gelu(self.fc1(self.ln2(x)))))
        return x

    def params(self):
        out = self.ln1.params() + self.attn.params()
        if self.cross is not None:
            out += self.lnx.params() + self.cross.params()
        return out + self.ln2.params() + self.fc1.params() + self.fc2.params()


class _Base:
    """Embedding table, position table, parameter registry, (de)serialization."""

    def __init__(self, config: ModelConfig, seed: int, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        d = config.embed_dim
        self.embed = T.parameter(
            (self.rng.normal(0.0, 0.02, size=(config.vocab_size, d))).astype(dtype),
            "embed",
        )
        self.pos = sinusoidal_positions(config.max_len, d, dtype)

    def _embed_positions(self, ids: np.ndarray) -> Tensor:
        t = ids.shape[1]
        if t > self.config.max_len:
            raise ValueError(
                f"sequence length {t} exceeds max_len {self.config.max_len}"
            )
        return T.add(T.embedding(self.embed, ids), self.pos[:t])

    def params(self) -> list[tuple[str, Tensor]]:
        raise NotImplementedError

    def num_params(self) -> int:
        return sum(p.data.size for _, p in self.params())

    def zero_grads(self) -> None:
        for _, p in self.params():
            p.zero_grad()

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        mine = dict(self.params())
        missing = set(mine) - set(arrays)
        extra = set(arrays) - set(mine)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in mine.items():
            if arrays[name].shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {arrays[name].shape} vs {p.data.shape}"
                )
            p.data = arrays[name].astype(self.dtype)


class EncoderOnly(_Base):
    """Bidirectional encoder; sequences pool to unit vectors."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        if config.arch != "encoder_only":
            raise ConfigError(f"config arch is {config.arch!r}, not encoder_only")
        super().__init__(config, seed, dtype)
        c = config
        self.blocks = [
            _Block(self.rng, c.embed_dim, c.heads, c.ffn_dim, dtype, f"enc.{i}")
            for i in range(c.num_layers)
        ]
        self.ln_f = _LayerNorm(c.embed_dim, dtype, "enc.ln_f")

    def params(self):
        out = [("embed", self.embed)]
        for blk in self.blocks:
            out += blk.params()
        return out + self.ln_f.params()

    def hidden_states(self, ids: np.ndarray, lengths: np.ndarray, probe=None) -> Tensor:
        x = self._embed_positions(ids)
        mask = T.padding_mask(lengths, ids.shape[1], self.dtype)[:, None, None, :]
        for blk in self.blocks:
            x = blk(x, mask, probe=probe)
        return self.ln_f(x)

    def embed_sequences(self, seqs: list[list[int]], probe=None) -> Tensor:
        """(B, D) unit vectors: masked mean pool over final hidden states."""
        ids, lengths = pad_batch(seqs)
        h = self.hidden_states(ids, lengths, probe)
        keep = (np.arange(ids.shape[1])[None, :] < lengths[:, None]).astype(self.dtype)
        pooled = T.tsum(T.mul(h, keep[:, :, None]), axis=1)
        pooled = T.mul(pooled, (1.0 / np.maximum(lengths, 1))[:, None].astype(self.dtype))
        return T.l2_normalize(pooled)


class _GenerativeBase(_Base):
    """Shared decode-side machinery: LM head, KV-cached greedy decoding."""

    def __init__(self, config, seed, dtype):
        super().__init__(config, seed, dtype)
        d, v = config.embed_dim, config.vocab_size
        self.head = T.parameter(_linear_init(self.rng, d, v, self.dtype), "head")

    def _project(self, h: Tensor) -> Tensor:
        return T.matmul(h, self.head)

    # -- numpy-only incremental attention used by generate() ---------------

    def _np_linear(self, lin: _Linear, x: np.ndarray) -> np.ndarray:
        return x @ lin.w.data + lin.b.data

    def _np_ln(self, ln: _LayerNorm, x: np.ndarray) -> np.ndarray:
        mu = x.mean(-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + 1e-5)
        return xc * inv * ln.g.data + ln.b.data

    def _np_gelu(self, x: np.ndarray) -> np.ndarray:
        c = math.sqrt(2.0 / math.pi)
        # x*x*x matches the taped op bit-for-bit (and dodges slow generic pow)
        return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * (x * x * x))))

    def _np_attend(self, attn: _Attention, q_in: np.ndarray, ks: np.ndarray, vs: np.ndarray):
        # q_in (1, D) against cached ks/vs (t, H, dh) -> (1, D)
        h, dh = attn.heads, attn.dh
        q = self._np_linear(attn.q, q_in).reshape(h, dh)
        scores = np.einsum("hd,thd->ht", q, ks) / math.sqrt(dh)
        w = np.exp(scores - scores.max(-1, keepdims=True))
        w /= w.sum(-1, keepdims=True)
        ctx = np.einsum("ht,thd->hd", w, vs).reshape(1, h * dh)
        return self._np_linear(attn.o, ctx)


def _greedy_from_logits(row: np.ndarray) -> tuple[int, float]:
    """argmax token (ties -> lowest id) and its log-probability."""
    tok = int(np.argmax(row))
    shifted = row - row.max()
    logp = shifted[tok] - math.log(np.exp(shifted).sum())
    return tok, float(logp)


class DecoderOnly(_GenerativeBase):
    """One causal stream over src ⊕ [BOS] ⊕ tgt ⊕ [EOS]."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        if config.arch != "decoder_only":
            raise ConfigError(f"config arch is {config.arch!r}, not decoder_only")
        super().__init__(config, seed, dtype)
        c = config
        self.blocks = [
            _Block(self.rng, c.embed_dim, c.heads, c.ffn_dim, dtype, f"dec.{i}")
            for i in range(c.num_layers)
        ]
        self.ln_f = _LayerNorm(c.embed_dim, dtype, "dec.ln_f")

    def params(self):
        out = [("embed", self.embed)]
        for blk in self.blocks:
            out += blk.params()
        return out + self.ln_f.params() + [("head", self.head)]

    def _causal_forward(self, ids: np.ndarray, probe=None) -> Tensor:
        x = self._embed_positions(ids)
        mask = T.causal_mask(ids.shape[1], self.dtype)
        for blk in self.blocks:
            x = blk(x, mask, probe=probe)
        return self.ln_f(x)

    def forward_logits(self, src: list[int], tgt_prefix: list[int], probe=None) -> np.ndarray:
        """(len(prefix)+1, V): row i scores tgt token i; last row scores the
        continuation after the prefix. Row 0 depends only on src."""
        seq = list(src) + [2] + list(tgt_prefix)  # [BOS]=2
        h = self._causal_forward(np.asarray([seq]), probe)
        logits = self._project(h).data[0]
        return logits[len(src) :]

    def loss(self, srcs: list[list[int]], tgts: list[list[int]], bos=2, eos=3) -> Tensor:
        packed = [list(s) + [bos] + list(t) + [eos] for s, t in zip(srcs, tgts)]
        ids, lengths = pad_batch(packed)
        inputs, labels = ids[:, :-1], ids[:, 1:]
        tm = labels.shape[1]
        pos = np.arange(tm)[None, :]
        start = np.array([len(s) for s in srcs])[:, None]  # first label: tgt[0]
        mask = (pos >= start) & (pos < (lengths - 1)[:, None])
        h = self._causal_forward(inputs)
        logits = T.reshape(self._project(h), (-1, self.config.vocab_size))
        return T.cross_entropy_from_logits(
            logits, labels.reshape(-1), mask.reshape(-1).astype(self.dtype)
        )

    def generate(self, src: list[int], max_steps: int = 24, bos=2, eos=3) -> tuple[list[int], float]:
        """Greedy decode with per-layer KV caches; returns (ids, confidence)
        where confidence = exp(mean log-prob of emitted tokens incl. [EOS])."""
        prefill = list(src) + [bos]
        budget = min(max_steps, self.config.max_len - len(prefill))
        if budget <= 0:
            return [], 0.0
        caches = [([], []) for _ in self.blocks]  # (ks, vs) lists per block
        last_h = None
        for pos_idx, tok in enumerate(prefill):
            last_h = self._step(tok, pos_idx, caches)
        out: list[int] = []
        logps: list[float] = []
        pos_idx = len(prefill)
        while True:
            logits = last_h @ self.head.data
            tok, logp = _greedy_from_logits(logits[0])
            logps.append(logp)
            if tok == eos:
                break
            out.append(tok)
            if len(out) >= budget:
                break
            last_h = self._step(tok, pos_idx, caches)
            pos_idx += 1
        return out, float(math.exp(sum(logps) / len(logps)))

    def _step(self, tok: int, pos_idx: int, caches) -> np.ndarray:
        x = (self.embed.data[tok] + self.pos[pos_idx])[None, :]
        for blk, (ks, vs) in zip(self.blocks, caches):
            h = self._np_ln(blk.ln1, x)
            heads, dh = blk.attn.heads, blk.attn.dh
            ks.append(self._np_linear(blk.attn.k, h).reshape(heads, dh))
            vs.append(self._np_linear(blk.attn.v, h).reshape(heads, dh))
            x = x + self._np_attend(blk.attn, h, np.stack(ks), np.stack(vs))
            h2 = self._np_ln(blk.ln2, x)
            x = x + self._np_linear(blk.fc2, self._np_gelu(self._np_linear(blk.fc1, h2)))
        return self._np_ln(self.ln_f, x)


class EncoderDecoder(_GenerativeBase):
    """Bidirectional encoder over src; causal decoder with cross-attention."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        if config.arch != "encoder_decoder":
            raise ConfigError(f"config arch is {config.arch!r}, not encoder_decoder")
        super().__init__(config, seed, dtype)
        c = config
        half = c.num_layers // 2
        self.enc_blocks = [
            _Block(self.rng, c.embed_dim, c.heads, c.ffn_dim, dtype, f"enc.{i}")
            for i in range(half)
        ]
        self.enc_ln_f = _LayerNorm(c.embed_dim, dtype, "enc.ln_f")
        self.dec_blocks = [
            _Block(self.rng, c.embed_dim, c.heads, c.ffn_dim, dtype, f"dec.{i}", cross=True)
            for i in range(half)
        ]
        self.dec_ln_f = _LayerNorm(c.embed_dim, dtype, "dec.ln_f")

    def params(self):
        out = [("embed", self.embed)]
        for blk in self.enc_blocks:
            out += blk.params()
        out += self.enc_ln_f.params()
        for blk in self.dec_blocks:
            out += blk.params()
        return out + self.dec_ln_f.params() + [("head", self.head)]

    def _encode(self, ids: np.ndarray, lengths: np.ndarray, probe=None) -> tuple[Tensor, np.ndarray]:
        x = self._embed_positions(ids)
        mask = T.padding_mask(lengths, ids.shape[1], self.dtype)[:, None, None, :]
        for blk in self.enc_blocks:
            x = blk(x, mask, probe=probe)
        return self.enc_ln_f(x), mask

    def _decode(self, tgt_ids: np.ndarray, enc: Tensor, enc_mask: np.ndarray, probe=None) -> Tensor:
        x = self._embed_positions(tgt_ids)
        mask = T.causal_mask(tgt_ids.shape[1], self.dtype)
        for blk in self.dec_blocks:
            x = blk(x, mask, enc=enc, enc_mask=enc_mask, probe=probe)
        return self.dec_ln_f(x)

    def forward_logits(self, src: list[int], tgt_prefix: list[int], probe=None) -> np.ndarray:
        src_ids, src_len = pad_batch([list(src)])
        enc, enc_mask = self._encode(src_ids, src_len, probe)
        dec_in = np.asarray([[2] + list(tgt_prefix)])
        h = self._decode(dec_in, enc, enc_mask, probe)
        return self._project(h).data[0]

    def loss(self, srcs: list[list[int]], tgts: list[list[int]], bos=2, eos=3) -> Tensor:
        src_ids, src_lens = pad_batch([list(s) for s in srcs])
        enc, enc_mask = self._encode(src_ids, src_lens)
        dec_in, _ = pad_batch([[bos] + list(t) for t in tgts])
        labels, label_lens = pad_batch([list(t) + [eos] for t in tgts])
        if dec_in.shape[1] != labels.shape[1]:  # ragged pad: equalize
            tmax = max(dec_in.shape[1], labels.shape[1])
            dec_in = np.pad(dec_in, ((0, 0), (0, tmax - dec_in.shape[1])))
            labels = np.pad(labels, ((0, 0), (0, tmax - labels.shape[1])))
        mask = np.arange(labels.shape[1])[None, :] < label_lens[:, None]
        h = self._decode(dec_in, enc, enc_mask)
        logits = T.reshape(self._project(h), (-1, self.config.vocab_size))
        return T.cross_entropy_from_logits(
            logits, labels.reshape(-1), mask.reshape(-1).astype(self.dtype)
        )

    def generate(self, src: list[int], max_steps: int = 24, bos=2, eos=3) -> tuple[list[int], float]:
        src_ids, src_len = pad_batch([list(src)])
        enc, _ = self._encode(src_ids, src_len)
        enc_np = enc.data[0]  # (Ts, D)
        # static cross K/V per decoder block
        cross_kv = []
        for blk in self.dec_blocks:
            h, dh = blk.cross.heads, blk.cross.dh
            ks = self._np_linear(blk.cross.k, enc_np).reshape(-1, h, dh)
            vs = self._np_linear(blk.cross.v, enc_np).reshape(-1, h, dh)
            cross_kv.append((ks, vs))
        budget = min(max_steps, self.config.max_len - 1)
        if budget <= 0:
            return [], 0.0
        caches = [([], []) for _ in self.dec_blocks]
        last_h = self._step(bos, 0, caches, cross_kv)
        out: list[int] = []
        logps: list[float] = []
        pos_idx = 1
        while True:
            logits = last_h @ self.head.data
            tok, logp = _greedy_from_logits(logits[0])
            logps.append(logp)
            if tok == eos:
                break
            out.append(tok)
            if len(out) >= budget:
                break
            last_h = self._step(tok, pos_idx, caches, cross_kv)
            pos_idx += 1
        return out, float(math.exp(sum(logps) / len(logps)))

    def _step(self, tok: int, pos_idx: int, caches, cross_kv) -> np.ndarray:
        x = (self.embed.data[tok] + self.pos[pos_idx])[None, :]
        for blk, (ks, vs), (cks, cvs) in zip(self.dec_blocks, caches, cross_kv):
            h = self._np_ln(blk.ln1, x)
            heads, dh = blk.attn.heads, blk.attn.dh
            ks.append(self._np_linear(blk.attn.k, h).reshape(heads, dh))
            vs.append(self._np_linear(blk.attn.v, h).reshape(heads, dh))
            x = x + self._np_attend(blk.attn, h, np.stack(ks), np.stack(vs))
            hx = self._np_ln(blk.lnx, x)
            x = x + self._np_attend(blk.cross, hx, cks, cvs)
            h2 = self._np_ln(blk.ln2, x)
            x = x + self._np_linear(blk.fc2, self._np_gelu(self._np_linear(blk.fc1, h2)))
        return self._np_ln(self.dec_ln_f, x)


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32):
    cls = {
        "encoder_only": EncoderOnly,
        "decoder_only": DecoderOnly,
        "encoder_decoder": EncoderDecoder,
    }[config.arch]
    return cls(config, seed=seed, dtype=dtype)
