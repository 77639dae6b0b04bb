import json

import pytest

from txnmatch.common import ConfigError, FormatError
from txnmatch.datagen import (
    GenConfig,
    Merchant,
    NoiseConfig,
    Rule,
    Transaction,
    generate_bundle,
    tokenizer_corpus,
)
from txnmatch.evaluation import GenerativeResolver, build_string_index
from txnmatch.models import ModelConfig, build_model
from txnmatch.pipeline import (
    EsdConfig,
    FilterConfig,
    Pipeline,
    STAGES,
    StageStats,
    esd_match,
    export_review,
    load_review,
    rule_match,
    save_decisions,
)
from txnmatch.retrieval import SearchHit
from txnmatch.tokenizers import train_bpe
from txnmatch.training import TrainConfig, train_generative

MILD = NoiseConfig(
    aggregator_prob=0.15,
    abbrev_prob=0.1,
    suffix_prob=0.15,
    shuffle_prob=0.0,
    typo_rate=0.01,
    zip_mismatch_prob=0.05,
)


@pytest.fixture(scope="module")
def bundle():
    return generate_bundle(
        GenConfig(n_merchants=20, n_train=140, n_test=60, seed=13, noise=MILD)
    )


@pytest.fixture(scope="module")
def trained_resolver(bundle):
    tok = train_bpe(tokenizer_corpus(bundle), 110)
    model = build_model(
        ModelConfig("decoder_only", tok.vocab_size, embed_dim=32, num_layers=2,
                    max_len=96)
    )
    by_id = {m.merchant_id: m for m in bundle.merchants}
    pairs = [
        (f"{t.raw_text} zip {t.zipcode}", by_id[t.gold_merchant_id].name)
        for t in bundle.train
    ]
    train_generative(model, tok, pairs, TrainConfig(
        iterations=1200, batch_size=16, lr=2e-3, seed=7
    ))
    return GenerativeResolver(model, tok, build_string_index(bundle), max_steps=12)


class StubResolver:
    """Fixed model-stage outcome; counts invocations."""

    def __init__(self, hits=(), name="stub name", confidence=0.9):
        self.hits = list(hits)
        self.name = name
        self.confidence = confidence
        self.calls = 0

    def top_hits(self, txn, k):
        self.calls += 1
        return self.hits[:k], self.name, self.confidence


class BoomResolver:
    def top_hits(self, txn, k):
        raise RuntimeError("model resources unavailable")


def txn(raw, zipcode="11111", txn_id="t0"):
    return Transaction(txn_id=txn_id, raw_text=raw, zipcode=zipcode,
                       gold_merchant_id=-1)


CATALOG = [
    Merchant(merchant_id=10, name="blue bottle coffee", zipcode="11111"),
    Merchant(merchant_id=11, name="river books", zipcode="11111"),
    Merchant(merchant_id=12, name="camden music print", zipcode="22222"),
]


# ---------------------------------------------------------------------------
# configs and single stages


def test_config_validation():
    with pytest.raises(ConfigError):
        EsdConfig(threshold=1.5)
    with pytest.raises(ConfigError):
        EsdConfig(zip_candidate_cap=0)
    with pytest.raises(ConfigError):
        FilterConfig(min_confidence=-0.1)
    with pytest.raises(ConfigError):
        FilterConfig(min_name_similarity=2.0)


def test_bad_rule_pattern_rejected_at_build():
    with pytest.raises(ConfigError, match="compile"):
        Pipeline([Rule("([unclosed", 10)], CATALOG)


def test_rule_match_first_wins():
    import re

    rules = [
        (re.compile("^googl \\*"), 5),
        (re.compile("^googl"), 6),
    ]
    assert rule_match(rules, "googl * adsjl0cz1dn") == 5
    assert rule_match(rules, "googl store") == 6
    assert rule_match([], "anything") is None


def test_rule_stage_short_circuits_model():
    stub = StubResolver(hits=[SearchHit(10, 0.99, "blue bottle coffee")])
    p = Pipeline([Rule("^blue bottle", 10)], CATALOG, resolver=stub)
    d = p.resolve(txn("BLUE BOTTLE COFFEE #12"))
    assert d.stage == "rule" and d.merchant_id == 10
    assert stub.calls == 0


def test_esd_match_exact_name_in_zip():
    by_zip = {"11111": [(10, "blue bottle coffee"), (11, "river books")]}
    hit = esd_match(EsdConfig(threshold=0.9), "blue bottle coffee", "11111", by_zip)
    assert hit == (10, 1.0)
    assert esd_match(EsdConfig(threshold=0.9), "zzzz qqqq", "11111", by_zip) is None
    assert esd_match(EsdConfig(), "blue bottle coffee", "99999", by_zip) is None


def test_esd_candidate_cap_is_ascending_id():
    by_zip = {"11111": [(10, "aaaa aaaa"), (11, "blue bottle coffee")]}
    cfg = EsdConfig(threshold=0.9, zip_candidate_cap=1)
    # the cap admits only the lowest id, which is dissimilar -> no match
    assert esd_match(cfg, "blue bottle coffee", "11111", by_zip) is None
    assert esd_match(
        EsdConfig(threshold=0.9, zip_candidate_cap=2),
        "blue bottle coffee", "11111", by_zip,
    ) == (11, 1.0)


def test_esd_threshold_monotone_match_sets(bundle):
    def esd_ids(threshold):
        p = Pipeline([], bundle.merchants, esd=EsdConfig(threshold=threshold))
        decisions, _ = p.run(bundle.tests["esd_rd"] + bundle.tests["raw_cleansed"])
        return {d.txn_id for d in decisions if d.stage == "esd"}

    loose, tight = esd_ids(0.55), esd_ids(0.9)
    assert tight <= loose


def test_unnormalizable_text_short_circuits():
    p = Pipeline([], CATALOG, resolver=StubResolver())
    d = p.resolve(txn("@#$%^&"))
    assert d.stage == "unmatched" and d.merchant_id is None
    assert d.timings_ms == {}


# ---------------------------------------------------------------------------
# model stage filters


def test_model_stage_requires_both_filters():
    hit = SearchHit(10, 0.9, "blue bottle coffee")
    filters = FilterConfig(min_confidence=0.8, min_name_similarity=0.8)
    matched = Pipeline([], CATALOG, resolver=StubResolver([hit], confidence=0.95),
                       filters=filters).resolve(txn("xxxx yyyy"))
    assert matched.stage == "model" and matched.merchant_id == 10
    assert matched.confidence == 0.95 and matched.name_similarity == 0.9

    low_conf = Pipeline([], CATALOG, resolver=StubResolver([hit], confidence=0.5),
                        filters=filters).resolve(txn("xxxx yyyy"))
    assert low_conf.stage == "unmatched" and low_conf.merchant_id is None
    assert low_conf.generated_name == "stub name"
    assert low_conf.confidence == 0.5  # provenance survives the filter

    low_sim = Pipeline(
        [], CATALOG,
        resolver=StubResolver([SearchHit(10, 0.3, "blue bottle coffee")],
                              confidence=0.95),
        filters=filters,
    ).resolve(txn("xxxx yyyy"))
    assert low_sim.stage == "unmatched"
    assert low_sim.name_similarity == 0.3


def test_model_stage_absent_without_resolver(bundle):
    p = Pipeline(bundle.rules, bundle.merchants)
    decisions, stats = p.run(bundle.tests["raw_cleansed"])
    assert stats.counts["model"] == 0
    assert all(d.stage in ("rule", "esd", "unmatched") for d in decisions)


def test_degraded_stage_still_decides():
    p = Pipeline([], CATALOG, resolver=BoomResolver())
    d = p.resolve(txn("xxxx yyyy"))
    assert d.stage == "unmatched"
    assert d.degraded is True


# ---------------------------------------------------------------------------
# whole-corpus properties


def all_txns(bundle):
    out = []
    for split in bundle.tests.values():
        out.extend(split)
    return out


def test_stage_partition_identity(bundle, trained_resolver):
    p = Pipeline(bundle.rules, bundle.merchants, resolver=trained_resolver)
    txns = all_txns(bundle)
    decisions, stats = p.run(txns)
    assert len(decisions) == len(txns)
    assert sum(stats.counts.values()) == len(txns)
    assert set(stats.counts) == set(STAGES)
    for d in decisions:
        assert d.stage in STAGES
        assert (d.merchant_id is not None) == (d.stage != "unmatched")


def test_decisions_deterministic(bundle, trained_resolver):
    p = Pipeline(bundle.rules, bundle.merchants, resolver=trained_resolver)
    txns = all_txns(bundle)

    def snapshot():
        decisions, _ = p.run(txns)
        rows = []
        for d in decisions:
            row = d.to_dict()
            row.pop("timings_ms")  # wall-clock only
            rows.append(row)
        return rows

    assert snapshot() == snapshot()


def test_filter_monotonicity(bundle, trained_resolver):
    txns = all_txns(bundle)

    def model_matches(min_confidence, min_name_similarity):
        p = Pipeline(
            bundle.rules,
            bundle.merchants,
            resolver=trained_resolver,
            filters=FilterConfig(min_confidence=min_confidence,
                                 min_name_similarity=min_name_similarity),
        )
        decisions, _ = p.run(txns)
        return {d.txn_id for d in decisions if d.stage == "model"}

    base = model_matches(0.0, 0.0)
    assert model_matches(0.6, 0.0) <= base
    assert model_matches(0.95, 0.0) <= model_matches(0.6, 0.0)
    assert model_matches(0.0, 0.6) <= base
    assert model_matches(0.0, 0.95) <= model_matches(0.0, 0.6)


def test_model_stage_strictly_extends_coverage(bundle, trained_resolver):
    txns = all_txns(bundle)
    without_model = Pipeline(bundle.rules, bundle.merchants)
    with_model = Pipeline(bundle.rules, bundle.merchants, resolver=trained_resolver)
    _, stats_off = without_model.run(txns)
    _, stats_on = with_model.run(txns)
    assert stats_off.counts["rule"] + stats_off.counts["esd"] == (
        stats_off.total - stats_off.counts["unmatched"]
    )
    assert stats_on.coverage > stats_off.coverage
    # rule and esd stages are untouched by adding the model stage
    assert stats_on.counts["rule"] == stats_off.counts["rule"]
    assert stats_on.counts["esd"] == stats_off.counts["esd"]


def test_stage_stats_coverage_formula():
    stats = StageStats(
        counts={"rule": 2, "esd": 1, "model": 1, "unmatched": 1},
        time_ms={"rule": 0.0, "esd": 0.0, "model": 0.0},
    )
    assert stats.total == 5
    assert stats.coverage == 0.8


# ---------------------------------------------------------------------------
# persistence


def test_export_review_empty_has_header(tmp_path):
    path = tmp_path / "review.jsonl"
    n = export_review([], path)
    lines = path.read_text().strip().split("\n")
    assert n == 0 and len(lines) == 1
    header = json.loads(lines[0])
    assert header["type"] == "header" and header["count"] == 0


def test_export_review_carries_model_provenance(tmp_path):
    filters = FilterConfig(min_confidence=0.99, min_name_similarity=0.99)
    p = Pipeline([], CATALOG,
                 resolver=StubResolver([SearchHit(10, 0.9, "blue bottle coffee")],
                                       name="blue bottle", confidence=0.8),
                 filters=filters)
    decisions, _ = p.run([txn("some coffee place")])
    path = tmp_path / "review.jsonl"
    assert export_review(decisions, path) == 1
    row = json.loads(path.read_text().strip().split("\n")[1])
    assert row["generated_name"] == "blue bottle"
    assert row["confidence"] == 0.8
    assert "timings_ms" not in row


def test_export_review_round_trip_and_since(bundle, tmp_path):
    p = Pipeline([], bundle.merchants, esd=EsdConfig(threshold=0.99))
    txns = all_txns(bundle)
    decisions, _ = p.run(txns)
    path = tmp_path / "review.jsonl"
    n = export_review(decisions, path)
    header, reloaded = load_review(path)
    assert header["count"] == n == len(reloaded)
    by_id = {t.txn_id: t for t in txns}
    for t in reloaded:
        assert t.gold_merchant_id == -1
        assert t.raw_text == by_id[t.txn_id].raw_text
        assert t.zipcode == by_id[t.txn_id].zipcode

    cutoff = decisions[len(decisions) // 2].seq
    export_review(decisions, path, since_seq=cutoff)
    _, later = load_review(path)
    assert all(by_id[t.txn_id] is not None for t in later)
    assert len(later) <= n


def test_load_review_rejects_headerless(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"type": "review", "txn_id": "x"}\n')
    with pytest.raises(FormatError, match="header"):
        load_review(path)


def test_save_decisions_is_valid_jsonl(bundle, trained_resolver, tmp_path):
    p = Pipeline(bundle.rules, bundle.merchants, resolver=trained_resolver)
    decisions, _ = p.run(bundle.tests["raw_cleansed"][:10])
    path = tmp_path / "decisions.jsonl"
    save_decisions(decisions, path)
    rows = [json.loads(line) for line in path.read_text().strip().split("\n")]
    assert len(rows) == 10
    assert all(r["stage"] in STAGES for r in rows)
