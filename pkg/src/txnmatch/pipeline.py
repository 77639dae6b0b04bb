"""Staged resolution flow: normalize → regex rules → string-distance
matcher → model fallback → confidence filter, with review export.

Each transaction receives exactly one decision. The model stage emits a
match only when BOTH filters pass — generation confidence ≥ min_confidence
and the string-search score between the generated name and the matched
merchant's name ≥ min_name_similarity; everything else falls through to
Unmatched, carrying the generated name and confidence for later review. A
stage that raises marks the decision degraded and later stages still run.
"""

from __future__ import annotations

import dataclasses
import json
import re
import time
from pathlib import Path

from .common import ConfigError, FormatError
from .datagen import Merchant, Rule, Transaction
from .text import edit_similarity, normalize

STAGES = ("rule", "esd", "model", "unmatched")
_REVIEW_VERSION = 1


@dataclasses.dataclass(frozen=True)
class EsdConfig:
    """Fuzzy pre-model stage: best in-zip candidate by edit similarity."""

    threshold: float = 0.8
    zip_candidate_cap: int = 50

    def __post_init__(self):
        if not (0.0 <= self.threshold <= 1.0):
            raise ConfigError("esd threshold must lie in [0, 1]")
        if self.zip_candidate_cap < 1:
            raise ConfigError("zip_candidate_cap must be >= 1")


@dataclasses.dataclass(frozen=True)
class FilterConfig:
    min_confidence: float = 0.7
    min_name_similarity: float = 0.6

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{f.name}={v} must lie in [0, 1]")


@dataclasses.dataclass
class PipelineDecision:
    txn_id: str
    raw_text: str
    zipcode: str
    stage: str
    merchant_id: int | None = None
    confidence: float | None = None
    name_similarity: float | None = None
    generated_name: str | None = None
    degraded: bool = False
    seq: int = 0
    timings_ms: dict[str, float] = dataclasses.field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class StageStats:
    counts: dict[str, int]
    time_ms: dict[str, float]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def coverage(self) -> float:
        """Fraction of transactions resolved by any stage."""
        if self.total == 0:
            return 0.0
        return 1.0 - self.counts["unmatched"] / self.total


def rule_match(rules: list[tuple[re.Pattern, int]], text: str) -> int | None:
    """First pattern (table order) whose search succeeds wins."""
    for pattern, merchant_id in rules:
        if pattern.search(text):
            return merchant_id
    return None


def esd_match(cfg: EsdConfig, text: str, zipcode: str,
              by_zip: dict[str, list[tuple[int, str]]]) -> tuple[int, float] | None:
    """Best same-zip candidate by normalized edit similarity, if it clears
    the threshold. Candidates are capped per zipcode in ascending-id order;
    ties keep the lowest id."""
    candidates = by_zip.get(zipcode, [])[: cfg.zip_candidate_cap]
    best: tuple[int, float] | None = None
    for merchant_id, name in candidates:
        sim = edit_similarity(text, name)
        if best is None or sim > best[1]:
            best = (merchant_id, sim)
    if best is not None and best[1] >= cfg.threshold:
        return best
    return None


class Pipeline:
    """Immutable stage resources; resolve() is pure per transaction."""

    def __init__(
        self,
        rules: list[Rule],
        catalog: list[Merchant],
        esd: EsdConfig = EsdConfig(),
        resolver=None,
        filters: FilterConfig = FilterConfig(),
    ):
        compiled = []
        for rule in rules:
            try:
                compiled.append((re.compile(rule.pattern), rule.merchant_id))
            except re.error as exc:
                raise ConfigError(f"rule pattern {rule.pattern!r} does not compile: {exc}")
        self.rules = compiled
        self.esd = esd
        self.resolver = resolver  # exposes top_hits(txn, k); None disables the stage
        self.filters = filters
        by_zip: dict[str, list[tuple[int, str]]] = {}
        for m in sorted(catalog, key=lambda m: m.merchant_id):
            by_zip.setdefault(m.zipcode, []).append((m.merchant_id, normalize(m.name)))
        self._by_zip = by_zip

    def resolve(self, txn: Transaction, seq: int = 0) -> PipelineDecision:
        decision = PipelineDecision(
            txn_id=txn.txn_id,
            raw_text=txn.raw_text,
            zipcode=txn.zipcode,
            stage="unmatched",
            seq=seq,
        )
        norm = normalize(txn.raw_text)
        if not norm:
            return decision  # nothing any stage could use

        t0 = time.perf_counter()
        try:
            rule_hit = rule_match(self.rules, norm)
        except Exception:
            rule_hit = None
            decision.degraded = True
        decision.timings_ms["rule"] = (time.perf_counter() - t0) * 1e3
        if rule_hit is not None:
            decision.stage = "rule"
            decision.merchant_id = rule_hit
            return decision

        t0 = time.perf_counter()
        try:
            esd_hit = esd_match(self.esd, norm, txn.zipcode, self._by_zip)
        except Exception:
            esd_hit = None
            decision.degraded = True
        decision.timings_ms["esd"] = (time.perf_counter() - t0) * 1e3
        if esd_hit is not None:
            decision.stage = "esd"
            decision.merchant_id = esd_hit[0]
            decision.name_similarity = esd_hit[1]
            return decision

        if self.resolver is not None:
            t0 = time.perf_counter()
            try:
                hits, name, confidence = self.resolver.top_hits(txn, 1)
            except Exception:
                hits, name, confidence = [], None, None
                decision.degraded = True
            decision.timings_ms["model"] = (time.perf_counter() - t0) * 1e3
            decision.generated_name = name
            decision.confidence = confidence
            if hits:
                decision.name_similarity = hits[0].score
                if (
                    confidence >= self.filters.min_confidence
                    and hits[0].score >= self.filters.min_name_similarity
                ):
                    decision.stage = "model"
                    decision.merchant_id = hits[0].merchant_id
                    return decision
        return decision

    def run(self, txns: list[Transaction]) -> tuple[list[PipelineDecision], StageStats]:
        decisions = [self.resolve(txn, seq=i) for i, txn in enumerate(txns)]
        counts = {stage: 0 for stage in STAGES}
        time_ms = {stage: 0.0 for stage in STAGES[:-1]}
        for d in decisions:
            counts[d.stage] += 1
            for stage, ms in d.timings_ms.items():
                time_ms[stage] += ms
        return decisions, StageStats(counts=counts, time_ms=time_ms)


# ---------------------------------------------------------------------------
# persistence


def save_decisions(decisions: list[PipelineDecision], path: str | Path) -> None:
    with open(path, "w") as f:
        for d in decisions:
            f.write(json.dumps(d.to_dict(), sort_keys=True) + "\n")


def export_review(decisions: list[PipelineDecision], path: str | Path,
                  since_seq: int = 0) -> int:
    """Write unmatched decisions (seq ≥ since_seq) for human review.

    Filtered-out model attempts are unmatched decisions that still carry
    their generated name and confidence. Returns the number of records.
    The first line is always a header record.
    """
    rows = [
        d for d in decisions if d.stage == "unmatched" and d.seq >= since_seq
    ]
    with open(path, "w") as f:
        header = {
            "type": "header",
            "version": _REVIEW_VERSION,
            "count": len(rows),
            "since_seq": since_seq,
        }
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for d in rows:
            record = {"type": "review", **d.to_dict()}
            record.pop("timings_ms")
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return len(rows)


def load_review(path: str | Path) -> tuple[dict, list[Transaction]]:
    """Re-ingest exported review rows as unlabeled transactions
    (gold_merchant_id = -1)."""
    with open(path) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or lines[0].get("type") != "header":
        raise FormatError("review file must start with a header record")
    if lines[0].get("version") != _REVIEW_VERSION:
        raise FormatError("unsupported review file version")
    txns = [
        Transaction(
            txn_id=row["txn_id"],
            raw_text=row["raw_text"],
            zipcode=row["zipcode"],
            gold_merchant_id=-1,
        )
        for row in lines[1:]
    ]
    return lines[0], txns
