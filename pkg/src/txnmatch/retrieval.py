"""Merchant retrieval: dense vector search and token/trigram string search.

Both indexes share the result contract: hits are (merchant_id, score),
sorted by descending score with ties broken by ascending merchant id, and
an optional zipcode narrows the candidate set before scoring. Scoring uses
`np.einsum` dot products, whose row results are bitwise identical whether a
row is scored alone, inside the full matrix, or inside any filtered subset —
so filter-then-score equals score-then-filter exactly.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .common import ConfigError, FormatError
from .text import char_trigrams, normalize, token_set

_VIDX_MAGIC = b"TXMVIDX1"
_SIDX_MAGIC = b"TXMSIDX1"
_IDX_VERSION = 1


@dataclasses.dataclass(frozen=True)
class SearchHit:
    merchant_id: int
    score: float
    name: str = ""


def _rank_top(scores: np.ndarray, top_k: int):
    """Positions of the top_k scores. Scores are stored in ascending-id row
    order, so a stable descending sort realizes the id tie-break."""
    n = scores.shape[0]
    if n == 0:
        return []
    k = min(top_k, n)
    if n > 64 and k < n // 4:
        kth = np.partition(scores, n - k)[n - k]
        keep = np.flatnonzero(scores >= kth)  # every potential tie survives
    else:
        keep = np.arange(n)
    order = keep[np.argsort(-scores[keep], kind="stable")]
    return order[:k]


class VectorIndex:
    """Dense dot-product retrieval over one embedding row per merchant."""

    def __init__(self, ids, vectors: np.ndarray, zipcodes, names=None):
        ids = np.asarray(ids, dtype=np.int64)
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] != ids.shape[0]:
            raise ConfigError("vectors must be (N, D) with one row per id")
        if ids.shape[0] == 0:
            raise ConfigError("vector index needs at least one merchant")
        if len(set(ids.tolist())) != ids.shape[0]:
            raise ConfigError("merchant ids must be unique")
        order = np.argsort(ids)  # ascending id = stable tie order
        self.ids = ids[order]
        self.vectors = np.ascontiguousarray(vectors[order])
        self.zipcodes = [zipcodes[i] for i in order]
        self.names = [""] * len(ids) if names is None else [names[i] for i in order]
        by_zip: dict[str, list[int]] = {}
        for row, z in enumerate(self.zipcodes):
            by_zip.setdefault(z, []).append(row)
        self._zip_rows = {z: np.asarray(r) for z, r in by_zip.items()}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def search(self, query: np.ndarray, top_k: int = 1, zipcode: str | None = None):
        query = np.asarray(query, dtype=np.float32)
        if query.shape != (self.dim,):
            raise ConfigError(f"query must have shape ({self.dim},)")
        if zipcode:
            rows = self._zip_rows.get(zipcode)
            if rows is None:
                return []
            mat = self.vectors[rows]
        else:
            rows = np.arange(self.vectors.shape[0])
            mat = self.vectors
        scores = np.einsum("ij,j->i", mat, query)
        picked = _rank_top(scores, top_k)
        return [
            SearchHit(int(self.ids[rows[i]]), float(scores[i]), self.names[rows[i]])
            for i in picked
        ]

    def save(self, path: str | Path) -> None:
        header = {
            "ids": self.ids.tolist(),
            "zipcodes": self.zipcodes,
            "names": self.names,
            "shape": list(self.vectors.shape),
        }
        hb = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(_VIDX_MAGIC)
            f.write(struct.pack("<II", _IDX_VERSION, len(hb)))
            f.write(hb)
            f.write(np.ascontiguousarray(self.vectors.astype("<f4")).tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "VectorIndex":
        raw = Path(path).read_bytes()
        if raw[:8] != _VIDX_MAGIC:
            raise FormatError(f"{path}: not a vector index (bad magic)")
        version, hlen = struct.unpack("<II", raw[8:16])
        if version != _IDX_VERSION:
            raise FormatError(f"{path}: unsupported index version {version}")
        header = json.loads(raw[16 : 16 + hlen].decode())
        n, d = header["shape"]
        vecs = np.frombuffer(raw, dtype="<f4", count=n * d, offset=16 + hlen)
        return cls(header["ids"], vecs.reshape(n, d), header["zipcodes"], header["names"])


class StringIndex:
    """Composite lexical retrieval over normalized merchant names.

    score = 0.6 · Jaccard(word sets) + 0.4 · Jaccard(char trigram sets),
    with an exact normalized-name match forced to 1.0. Candidates come from
    token and trigram posting lists; anything sharing neither has score 0
    and is never returned.
    """

    TOKEN_WEIGHT = 0.6
    TRIGRAM_WEIGHT = 0.4

    def __init__(self, ids, names, zipcodes):
        if len(ids) == 0:
            raise ConfigError("string index needs at least one merchant")
        if len(set(ids)) != len(ids):
            raise ConfigError("merchant ids must be unique")
        order = sorted(range(len(ids)), key=lambda i: ids[i])
        self.ids = [int(ids[i]) for i in order]
        self.names = [normalize(names[i]) for i in order]
        self.zipcodes = [zipcodes[i] for i in order]
        self._tokens = [token_set(n) for n in self.names]
        self._trigrams = [char_trigrams(n) for n in self.names]
        self._token_posts: dict[str, list[int]] = {}
        self._trigram_posts: dict[str, list[int]] = {}
        self._exact: dict[str, int] = {}
        self._zip_rows: dict[str, set[int]] = {}
        for row, name in enumerate(self.names):
            for t in self._tokens[row]:
                self._token_posts.setdefault(t, []).append(row)
            for g in self._trigrams[row]:
                self._trigram_posts.setdefault(g, []).append(row)
            self._exact.setdefault(name, row)
            self._zip_rows.setdefault(self.zipcodes[row], set()).add(row)

    def _score_row(self, row: int, q_tokens, q_trigrams, q_norm: str) -> float:
        if self.names[row] == q_norm:
            return 1.0
        tk = self._jac(q_tokens, self._tokens[row])
        tg = self._jac(q_trigrams, self._trigrams[row])
        return self.TOKEN_WEIGHT * tk + self.TRIGRAM_WEIGHT * tg

    @staticmethod
    def _jac(a, b) -> float:
        if not a or not b:
            return 0.0
        inter = len(a & b)
        if inter == 0:
            return 0.0
        return inter / (len(a) + len(b) - inter)

    def search(self, query: str, top_k: int = 1, zipcode: str | None = None):
        q_norm = normalize(query)
        if not q_norm:
            return []
        q_tokens = token_set(q_norm)
        q_trigrams = char_trigrams(q_norm)
        cands: set[int] = set()
        for t in q_tokens:
            cands.update(self._token_posts.get(t, ()))
        for g in q_trigrams:
            cands.update(self._trigram_posts.get(g, ()))
        if zipcode:
            zip_rows = self._zip_rows.get(zipcode)
            if not zip_rows:
                return []
            cands &= zip_rows
        scored = []
        for row in cands:
            s = self._score_row(row, q_tokens, q_trigrams, q_norm)
            if s > 0.0:
                scored.append((-s, self.ids[row], row, s))
        scored.sort()
        return [
            SearchHit(mid, s, self.names[row]) for _, mid, row, s in scored[:top_k]
        ]

    def save(self, path: str | Path) -> None:
        header = {"ids": self.ids, "names": self.names, "zipcodes": self.zipcodes}
        hb = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(_SIDX_MAGIC)
            f.write(struct.pack("<II", _IDX_VERSION, len(hb)))
            f.write(hb)

    @classmethod
    def load(cls, path: str | Path) -> "StringIndex":
        raw = Path(path).read_bytes()
        if raw[:8] != _SIDX_MAGIC:
            raise FormatError(f"{path}: not a string index (bad magic)")
        version, hlen = struct.unpack("<II", raw[8:16])
        if version != _IDX_VERSION:
            raise FormatError(f"{path}: unsupported index version {version}")
        header = json.loads(raw[16 : 16 + hlen].decode())
        return cls(header["ids"], header["names"], header["zipcodes"])


# ---------------------------------------------------------------------------
# brute-force references (used by the equivalence tests and nowhere else)


def brute_force_vector_search(ids, vectors, zipcodes, query, top_k=1, zipcode=None):
    """Score every merchant independently, then filter, sort, and cut."""
    query = np.asarray(query, dtype=np.float32)
    rows = []
    for i in range(len(ids)):
        score = float(np.einsum("j,j->", np.asarray(vectors[i], dtype=np.float32), query))
        rows.append((int(ids[i]), score, zipcodes[i]))
    if zipcode:
        rows = [r for r in rows if r[2] == zipcode]
    rows.sort(key=lambda r: (-r[1], r[0]))
    return [(mid, score) for mid, score, _ in rows[:top_k]]


def brute_force_string_search(ids, names, zipcodes, query, top_k=1, zipcode=None):
    q_norm = normalize(query)
    if not q_norm:
        return []
    q_tokens = token_set(q_norm)
    q_trigrams = char_trigrams(q_norm)
    rows = []
    for i in range(len(ids)):
        name = normalize(names[i])
        if zipcode and zipcodes[i] != zipcode:
            continue
        if name == q_norm:
            score = 1.0
        else:
            score = StringIndex.TOKEN_WEIGHT * StringIndex._jac(
                q_tokens, token_set(name)
            ) + StringIndex.TRIGRAM_WEIGHT * StringIndex._jac(
                q_trigrams, char_trigrams(name)
            )
        if score > 0.0:
            rows.append((int(ids[i]), score))
    rows.sort(key=lambda r: (-r[1], r[0]))
    return rows[:top_k]
