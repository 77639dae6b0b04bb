"""Synthetic POS transaction corpus with known ground truth.

Merchant names come from a bundled word pool; transactions start as the
merchant's clean name and pass through a noise channel modelling real
descriptor damage: payment-aggregator prefixes, per-token abbreviation,
trailing transaction codes, token shuffles, and character typos. A
configured fraction of transactions also carries a zipcode from a reserved
range that no merchant occupies, so zip-filtered retrieval comes back empty
and callers must exercise their fallback.

Every transaction derives its own RNG substream from (seed, index), and all
noise decisions draw their randomness whether or not the noise applies.
Raising one noise probability therefore only grows the set of affected
transactions — degradation is monotone per seed, not just on average.
"""

from __future__ import annotations

import dataclasses
import json
import re
from pathlib import Path

import numpy as np

from .common import ConfigError, sha256_file
from .text import normalize

# ---------------------------------------------------------------------------
# word pools

_RETAIL = [
    "coffee", "cafe", "market", "express", "auto", "parts", "deli", "grill",
    "pizza", "sushi", "burger", "taco", "books", "toys", "garden", "pets",
    "salon", "spa", "fitness", "cycle", "shoes", "denim", "outlet", "depot",
    "bakery", "donuts", "cream", "candy", "wines", "spirits", "smoke", "vape",
    "cleaners", "laundry", "tailor", "florist", "gifts", "cards", "games",
    "music", "records", "guitars", "electric", "plumbing", "roofing", "paint",
    "tile", "carpet", "lumber", "hardware", "rental", "storage", "movers",
    "shipping", "print", "copy", "photo", "optical", "dental", "clinic",
    "pharmacy", "nutrition", "organic", "farms", "butcher", "seafood",
    "noodle", "curry", "kebab", "falafel", "creole", "cantina", "taverna",
    "bistro", "brasserie", "diner", "waffle", "pancake", "biscuit", "grits",
    "smokehouse", "roadhouse", "alehouse", "taproom", "brewing", "roasters",
    "trading", "supply", "surplus", "salvage", "thrift", "vintage", "modern",
    "urban", "rustic", "golden", "silver", "copper", "iron", "stone", "cedar",
    "willow", "maple", "aspen", "birch", "juniper", "laurel", "magnolia",
    "prairie", "canyon", "summit", "ridge", "valley", "harbor", "anchor",
    "compass", "beacon", "lantern", "ember", "hearth", "haven", "villa",
    "plaza", "corner", "junction", "crossing", "commons", "square", "row",
    "brothers", "sisters", "family", "house", "shop", "store", "mart",
    "emporium", "collective", "workshop", "studio", "gallery", "company",
]

_CITIES = [
    "austin", "boise", "camden", "dayton", "elgin", "fresno", "greeley",
    "helena", "irvine", "joplin", "keene", "laredo", "macon", "naples",
    "odessa", "peoria", "quincy", "racine", "salem", "tucson", "utica",
    "vernon", "waco", "xenia", "yuma", "zanesville", "aurora", "bristol",
    "clayton", "dover", "easton", "fairfield", "georgetown", "hudson",
    "jackson", "kingston", "lebanon", "madison", "newport", "oxford",
]

_AGGREGATORS = ["sq *", "py *", "tst* ", "pp *", "ssp*", "cash app *", "zettle *"]

_SUFFIX_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789"
_LETTERS = "abcdefghijklmnopqrstuvwxyz"
_VOWELS = set("aeiou")

# merchants draw zipcodes from [10000, 99999]; mismatched transactions draw
# from [1, 999] ("00xxx") which therefore never contains a merchant
_MISMATCH_ZIP_MAX = 999


@dataclasses.dataclass(frozen=True)
class NoiseConfig:
    aggregator_prob: float = 0.3
    abbrev_prob: float = 0.25
    suffix_prob: float = 0.3
    shuffle_prob: float = 0.1
    typo_rate: float = 0.02
    zip_mismatch_prob: float = 0.1

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{f.name}={v} must lie in [0, 1]")


@dataclasses.dataclass(frozen=True)
class GenConfig:
    n_merchants: int
    n_train: int
    n_test: int
    seed: int = 0
    zs_merchant_fraction: float = 0.1
    rule_fraction: float = 0.25
    noise: NoiseConfig = dataclasses.field(default_factory=NoiseConfig)
    split_weights: tuple[float, float, float, float] = (0.63, 0.085, 0.085, 0.2)

    def __post_init__(self):
        if self.n_merchants < 2:
            raise ConfigError("n_merchants must be >= 2")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("transaction counts must be non-negative")
        if not (0.0 <= self.zs_merchant_fraction < 1.0):
            raise ConfigError("zs_merchant_fraction must lie in [0, 1)")
        if abs(sum(self.split_weights) - 1.0) > 1e-9:
            raise ConfigError("split_weights must sum to 1")


SPLITS = ("rule_based", "esd_rd", "esd_zs", "raw_cleansed")


@dataclasses.dataclass(frozen=True)
class Merchant:
    merchant_id: int
    name: str
    zipcode: str


@dataclasses.dataclass(frozen=True)
class Transaction:
    txn_id: str
    raw_text: str
    zipcode: str
    gold_merchant_id: int


@dataclasses.dataclass(frozen=True)
class Rule:
    pattern: str
    merchant_id: int


@dataclasses.dataclass
class Bundle:
    merchants: list[Merchant]
    train: list[Transaction]
    tests: dict[str, list[Transaction]]
    rules: list[Rule]
    config: GenConfig
    zs_merchant_ids: frozenset[int]

    @property
    def seen_merchants(self) -> list[Merchant]:
        return [m for m in self.merchants if m.merchant_id not in self.zs_merchant_ids]


def apportion(total: int, weights) -> list[int]:
    """Largest-remainder split of `total`; each part is within 1 of exact."""
    quotas = [total * w for w in weights]
    floors = [int(q) for q in quotas]
    short = total - sum(floors)
    remainders = sorted(
        range(len(weights)), key=lambda i: (-(quotas[i] - floors[i]), i)
    )
    for i in remainders[:short]:
        floors[i] += 1
    return floors


# ---------------------------------------------------------------------------
# merchants


def _draw_name(rng: np.random.Generator) -> str:
    pattern = int(rng.integers(4))
    w = lambda: _RETAIL[int(rng.integers(len(_RETAIL)))]
    c = lambda: _CITIES[int(rng.integers(len(_CITIES)))]
    if pattern == 0:
        return f"{w()} {w()}"
    if pattern == 1:
        return f"{c()} {w()}"
    if pattern == 2:
        return f"{w()} {w()} {w()}"
    return f"{c()} {w()} {w()}"


def _make_merchants(cfg: GenConfig, rng: np.random.Generator) -> list[Merchant]:
    n_zips = max(4, cfg.n_merchants // 40)
    zip_pool = sorted({f"{int(z):05d}" for z in rng.integers(10000, 100000, n_zips * 2)})
    names: set[str] = set()
    out: list[Merchant] = []
    while len(out) < cfg.n_merchants:
        name = _draw_name(rng)
        if name in names:
            continue  # the pool is vastly larger than any catalog we draw
        names.add(name)
        zipcode = zip_pool[int(rng.integers(len(zip_pool)))]
        out.append(Merchant(1000 + len(out), name, zipcode))
    return out


# ---------------------------------------------------------------------------
# noise channel


def _abbreviate_token(tok: str, mode: int, keep: int) -> str:
    if mode == 0:  # drop non-leading vowels: "family" -> "fmly"
        body = tok[0] + "".join(ch for ch in tok[1:] if ch not in _VOWELS)
        return body if len(body) > 1 else tok
    return tok[: max(1, keep)]  # truncate: "express" -> "exp"/"expr"


def _apply_typos(text: str, rate: float, child: np.random.Generator) -> str:
    # draws happen for every character whether or not the typo applies,
    # keeping substreams aligned as `rate` varies
    out: list[str] = []
    for ch in text:
        u = child.random()
        kind = int(child.integers(3))
        repl_idx = int(child.integers(len(_LETTERS)))
        if u >= rate or not ch.isalnum():
            out.append(ch)
            continue
        if kind == 0:  # substitute with a different letter
            repl = _LETTERS[repl_idx]
            if repl == ch:
                repl = _LETTERS[(repl_idx + 1) % len(_LETTERS)]
            out.append(repl)
        elif kind == 1:  # delete
            continue
        else:  # duplicate
            out.append(ch)
            out.append(ch)
    return "".join(out)


def _synth_transaction(
    merchant: Merchant,
    txn_index: int,
    cfg: GenConfig,
) -> Transaction:
    noise = cfg.noise
    child = np.random.default_rng([cfg.seed, 1000003, txn_index])
    tokens = merchant.name.split()

    u_abbrev = child.random()
    modes = [int(child.integers(2)) for _ in tokens]
    keeps = [int(child.integers(3, 5)) for _ in tokens]
    if u_abbrev < noise.abbrev_prob:
        tokens = [_abbreviate_token(t, m, k) for t, m, k in zip(tokens, modes, keeps)]

    u_shuffle = child.random()
    perm = child.permutation(len(tokens))
    if u_shuffle < noise.shuffle_prob:
        tokens = [tokens[i] for i in perm]

    u_suffix = child.random()
    suffix_len = int(child.integers(5, 9))
    suffix = "".join(
        _SUFFIX_ALPHABET[int(child.integers(len(_SUFFIX_ALPHABET)))]
        for _ in range(8)
    )[:suffix_len]
    if u_suffix < noise.suffix_prob:
        tokens = tokens + [suffix]

    u_agg = child.random()
    agg = _AGGREGATORS[int(child.integers(len(_AGGREGATORS)))]
    text = " ".join(tokens)
    if u_agg < noise.aggregator_prob:
        text = agg + text

    text = _apply_typos(text, noise.typo_rate, child)

    u_zip = child.random()
    mismatch_zip = f"{1 + int(child.integers(_MISMATCH_ZIP_MAX)):05d}"
    zipcode = mismatch_zip if u_zip < noise.zip_mismatch_prob else merchant.zipcode

    return Transaction(
        txn_id=f"t{txn_index:07d}",
        raw_text=normalize(text),
        zipcode=zipcode,
        gold_merchant_id=merchant.merchant_id,
    )


# ---------------------------------------------------------------------------
# bundle generation


def generate_bundle(cfg: GenConfig) -> Bundle:
    rng = np.random.default_rng(cfg.seed)
    merchants = _make_merchants(cfg, rng)

    n_zs = 0
    if cfg.zs_merchant_fraction > 0:
        n_zs = max(1, int(round(cfg.zs_merchant_fraction * cfg.n_merchants)))
    zs_rows = set(rng.choice(cfg.n_merchants, size=n_zs, replace=False).tolist())
    zs_ids = frozenset(merchants[i].merchant_id for i in zs_rows)
    seen = [m for i, m in enumerate(merchants) if i not in zs_rows]
    zs = [m for i, m in enumerate(merchants) if i in zs_rows]
    if not seen:
        raise ConfigError("zs_merchant_fraction leaves no merchants for training")

    split_counts = dict(zip(SPLITS, apportion(cfg.n_test, cfg.split_weights)))
    if split_counts["esd_zs"] > 0 and not zs:
        raise ConfigError("esd_zs split needs zs_merchant_fraction > 0")

    txn_index = 0

    def draw(pool: list[Merchant], n: int) -> list[Transaction]:
        nonlocal txn_index
        out = []
        for _ in range(n):
            m = pool[int(rng.integers(len(pool)))]
            out.append(_synth_transaction(m, txn_index, cfg))
            txn_index += 1
        return out

    train = draw(seen, cfg.n_train)
    tests = {
        name: draw(zs if name == "esd_zs" else seen, split_counts[name])
        for name in SPLITS
    }

    n_rules = int(round(cfg.rule_fraction * len(seen)))
    rule_rows = sorted(rng.choice(len(seen), size=n_rules, replace=False).tolist())
    rules = [
        Rule("^" + re.escape(seen[i].name), seen[i].merchant_id) for i in rule_rows
    ]

    return Bundle(
        merchants=merchants,
        train=train,
        tests=tests,
        rules=rules,
        config=cfg,
        zs_merchant_ids=zs_ids,
    )


def tokenizer_corpus(bundle: Bundle) -> list[str]:
    """Training-split text the tokenizer may see: source lines (with their
    zipcodes) plus seen-merchant names. Zero-shot names never appear."""
    lines = [f"{t.raw_text} zip {t.zipcode}" for t in bundle.train]
    lines += [m.name for m in bundle.seen_merchants]
    return lines


# ---------------------------------------------------------------------------
# persistence


_BUNDLE_FILES = {
    "merchants": "merchants.jsonl",
    "train": "train.jsonl",
    "rule_based": "test_rule_based.jsonl",
    "esd_rd": "test_esd_rd.jsonl",
    "esd_zs": "test_esd_zs.jsonl",
    "raw_cleansed": "test_raw_cleansed.jsonl",
    "rules": "rules.json",
}


def save_bundle(bundle: Bundle, out_dir: str | Path) -> dict[str, str]:
    """Write the bundle directory; returns {filename: sha256}."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def dump_jsonl(path: Path, rows):
        with open(path, "w") as f:
            for r in rows:
                f.write(json.dumps(dataclasses.asdict(r), sort_keys=True) + "\n")

    dump_jsonl(out / _BUNDLE_FILES["merchants"], bundle.merchants)
    dump_jsonl(out / _BUNDLE_FILES["train"], bundle.train)
    for split in SPLITS:
        dump_jsonl(out / _BUNDLE_FILES[split], bundle.tests[split])
    (out / _BUNDLE_FILES["rules"]).write_text(
        json.dumps([dataclasses.asdict(r) for r in bundle.rules], indent=2) + "\n"
    )
    (out / "tokenizer_corpus.txt").write_text(
        "".join(line + "\n" for line in tokenizer_corpus(bundle))
    )
    meta = {
        "config": dataclasses.asdict(bundle.config),
        "zs_merchant_ids": sorted(bundle.zs_merchant_ids),
        "counts": {
            "merchants": len(bundle.merchants),
            "train": len(bundle.train),
            **{s: len(bundle.tests[s]) for s in SPLITS},
        },
    }
    (out / "bundle.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    hashes = {
        name: sha256_file(out / name)
        for name in [*_BUNDLE_FILES.values(), "tokenizer_corpus.txt", "bundle.json"]
    }
    return hashes


def load_bundle(bundle_dir: str | Path) -> Bundle:
    root = Path(bundle_dir)
    missing = [
        name
        for name in [*_BUNDLE_FILES.values(), "bundle.json"]
        if not (root / name).exists()
    ]
    if missing:
        raise ConfigError(f"bundle at {root} is missing {', '.join(sorted(missing))}")

    def read_jsonl(path: Path, cls):
        return [cls(**json.loads(line)) for line in path.read_text().splitlines()]

    meta = json.loads((root / "bundle.json").read_text())
    noise = NoiseConfig(**meta["config"].pop("noise"))
    meta["config"]["split_weights"] = tuple(meta["config"]["split_weights"])
    cfg = GenConfig(noise=noise, **meta["config"])
    return Bundle(
        merchants=read_jsonl(root / _BUNDLE_FILES["merchants"], Merchant),
        train=read_jsonl(root / _BUNDLE_FILES["train"], Transaction),
        tests={s: read_jsonl(root / _BUNDLE_FILES[s], Transaction) for s in SPLITS},
        rules=[
            Rule(**r) for r in json.loads((root / _BUNDLE_FILES["rules"]).read_text())
        ],
        config=cfg,
        zs_merchant_ids=frozenset(meta["zs_merchant_ids"]),
    )


def exact_matcher_accuracy(bundle: Bundle, split: str | None = None) -> float:
    """Top-1 accuracy of a dict lookup from clean name to merchant id —
    the degradation probe used by the noise-monotonicity checks."""
    by_name = {m.name: m.merchant_id for m in bundle.merchants}
    txns = bundle.train if split is None else bundle.tests[split]
    if not txns:
        return 0.0
    hits = sum(by_name.get(t.raw_text) == t.gold_merchant_id for t in txns)
    return hits / len(txns)
