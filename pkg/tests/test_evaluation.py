import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from txnmatch.common import ConfigError
from txnmatch.datagen import (
    GenConfig,
    NoiseConfig,
    SPLITS,
    Transaction,
    generate_bundle,
    tokenizer_corpus,
)
from txnmatch.evaluation import (
    EmbeddingResolver,
    GenerativeResolver,
    WEIGHTS,
    build_string_index,
    build_vector_index,
    evaluate,
    latency_bench,
    latency_percentiles,
    match_precision_recall,
    weighted_accuracy,
)
from txnmatch.models import ModelConfig, build_model
from txnmatch.tokenizers import train_bpe

QUIET = NoiseConfig(
    aggregator_prob=0.0,
    abbrev_prob=0.0,
    suffix_prob=0.0,
    shuffle_prob=0.0,
    typo_rate=0.0,
    zip_mismatch_prob=0.0,
)


@pytest.fixture(scope="module")
def bundle():
    return generate_bundle(
        GenConfig(n_merchants=24, n_train=120, n_test=60, seed=5, noise=QUIET)
    )


@pytest.fixture(scope="module")
def tok(bundle):
    return train_bpe(tokenizer_corpus(bundle), 120)


@pytest.fixture(scope="module")
def decoder(tok):
    return build_model(
        ModelConfig("decoder_only", tok.vocab_size, embed_dim=32, num_layers=2,
                    max_len=96)
    )


@pytest.fixture(scope="module")
def encoder(tok):
    return build_model(
        ModelConfig("encoder_only", tok.vocab_size, embed_dim=32, num_layers=2,
                    max_len=96)
    )


# ---------------------------------------------------------------------------
# weighted accuracy


def test_weighted_accuracy_reference_points():
    # 0.63·0.66 + 0.085·0.95 + 0.085·0.91 + 0.2·0.72, displayed as 0.72
    assert abs(weighted_accuracy(0.66, 0.95, 0.91, 0.72) - 0.7179) < 1e-9
    assert round(weighted_accuracy(0.66, 0.95, 0.91, 0.72), 2) == 0.72
    # exact weighted sum is 0.60045, displayed as 0.60
    assert abs(weighted_accuracy(0.56, 0.87, 0.82, 0.52) - 0.60045) < 1e-9
    assert round(weighted_accuracy(0.56, 0.87, 0.82, 0.52), 2) == 0.60


def test_weights_sum_to_one_exactly():
    assert 0.63 + 0.085 + 0.085 + 0.2 == 1.0
    assert sum(WEIGHTS.values()) == 1.0
    assert tuple(WEIGHTS) == SPLITS
    assert weighted_accuracy(1.0, 1.0, 1.0, 1.0) == 1.0
    assert weighted_accuracy(0.0, 0.0, 0.0, 0.0) == 0.0


unit = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)


@given(unit, unit, unit, unit, st.integers(0, 3),
       st.floats(min_value=1e-6, max_value=0.5, allow_nan=False))
@settings(max_examples=60, deadline=None)
def test_weighted_accuracy_linear_and_monotone(a, b, c, d, pos, delta):
    args = [a, b, c, d]
    if args[pos] + delta > 1.0:
        delta = 1.0 - args[pos]
    bumped = list(args)
    bumped[pos] += delta
    lo = weighted_accuracy(*args)
    hi = weighted_accuracy(*bumped)
    assert hi >= lo  # order-preserving in each argument
    w = WEIGHTS[SPLITS[pos]]
    assert abs((hi - lo) - w * delta) < 1e-12  # linear with the split's weight


def test_weighted_accuracy_rejects_out_of_range():
    with pytest.raises(ConfigError):
        weighted_accuracy(1.2, 0.5, 0.5, 0.5)
    with pytest.raises(ConfigError):
        weighted_accuracy(0.5, 0.5, -0.1, 0.5)


# ---------------------------------------------------------------------------
# precision / recall


def test_match_precision_recall_hand_case():
    outcomes = [(1, 1), (2, 3), (None, 4)]
    p, r, f1 = match_precision_recall(outcomes)
    assert p == 0.5  # 1 correct of 2 emitted
    assert abs(r - 1 / 3) < 1e-12  # 1 correct of 3 total
    assert abs(f1 - 0.4) < 1e-12


def test_match_precision_recall_edge_cases():
    assert match_precision_recall([]) == (0.0, 0.0, 0.0)
    assert match_precision_recall([(None, 1), (None, 2)]) == (0.0, 0.0, 0.0)
    assert match_precision_recall([(7, 7)]) == (1.0, 1.0, 1.0)


# ---------------------------------------------------------------------------
# latency


def test_latency_percentiles_ordering():
    rng = np.random.default_rng(0)
    samples = rng.uniform(0.1, 50.0, size=500).tolist()
    pct = latency_percentiles(samples)
    assert set(pct) == {"p50", "p95", "p99"}
    assert pct["p50"] <= pct["p95"] <= pct["p99"]


def test_latency_percentiles_single_sample():
    pct = latency_percentiles([3.5])
    assert pct["p50"] == pct["p95"] == pct["p99"] == 3.5


def test_latency_bench_contracts(bundle):
    perfect = lambda txn: txn.gold_merchant_id
    txns = bundle.tests["rule_based"]
    with pytest.raises(ConfigError):
        latency_bench(perfect, txns, iterations=50)
    with pytest.raises(ConfigError):
        latency_bench(perfect, [], iterations=100)
    pct = latency_bench(perfect, txns, warmup=5, iterations=100)
    assert pct["p50"] <= pct["p95"] <= pct["p99"]


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_perfect_oracle(bundle):
    report = evaluate(lambda txn: txn.gold_merchant_id, bundle,
                      model_hash="m" * 8, bundle_hash="b" * 8)
    assert report.weighted_accuracy == 1.0
    assert all(v == 1.0 for v in report.split_top1.values())
    assert all(v == 1.0 for v in report.split_top5.values())
    assert report.precision == report.recall == report.f1 == 1.0
    assert set(report.split_top1) == set(SPLITS)
    assert report.model_hash and report.bundle_hash
    assert report.latency_ms["p50"] <= report.latency_ms["p99"]
    sizes = report.split_sizes
    assert sum(sizes.values()) == 60


def test_evaluate_internal_consistency(bundle):
    report = evaluate(lambda txn: txn.gold_merchant_id, bundle)
    assert report.weighted_accuracy == weighted_accuracy(**report.split_top1)


def test_evaluate_abstaining_resolver(bundle):
    report = evaluate(lambda txn: None, bundle)
    assert report.weighted_accuracy == 0.0
    assert report.precision == 0.0 and report.recall == 0.0


def test_evaluate_ranked_resolver_top5(bundle):
    class SecondPlace:
        def rank(self, txn, k):
            return [-1, txn.gold_merchant_id][:k]

    report = evaluate(SecondPlace(), bundle)
    assert report.weighted_accuracy == 0.0
    assert all(v == 0.0 for v in report.split_top1.values())
    assert all(v == 1.0 for v in report.split_top5.values())


def test_evaluate_missing_split_named(bundle):
    import copy

    crippled = copy.copy(bundle)
    crippled.tests = {k: v for k, v in bundle.tests.items() if k != "esd_zs"}
    with pytest.raises(ConfigError, match="esd_zs"):
        evaluate(lambda txn: None, crippled)


def test_evaluate_limit_per_split(bundle):
    report = evaluate(lambda txn: txn.gold_merchant_id, bundle, limit_per_split=3)
    assert all(n == 3 for n in report.split_sizes.values())


# ---------------------------------------------------------------------------
# reference routes


def test_generative_resolver_runs_and_is_deterministic(bundle, tok, decoder):
    resolver = GenerativeResolver(decoder, tok, build_string_index(bundle),
                                  max_steps=8)
    txn = bundle.tests["rule_based"][0]
    name, conf = resolver.generate_name(txn)
    assert 0.0 < conf <= 1.0
    assert resolver.generate_name(txn) == (name, conf)
    ids = resolver.rank(txn, 5)
    assert len(ids) <= 5 and len(set(ids)) == len(ids)
    assert resolver.rank(txn, 5) == ids
    top1 = resolver(txn)
    assert top1 is None or top1 == ids[0]


def test_embedding_resolver_runs(bundle, tok, encoder):
    index = build_vector_index(bundle, encoder, tok)
    resolver = EmbeddingResolver(encoder, tok, index)
    txn = bundle.tests["raw_cleansed"][0]
    ids = resolver.rank(txn, 5)  # zip filter may leave fewer than 5 candidates
    assert 1 <= len(ids) <= 5
    assert resolver(txn) == ids[0]


def test_resolvers_fall_back_when_zip_unknown(bundle, tok, encoder, decoder):
    odd = Transaction(txn_id="t-odd", raw_text=bundle.merchants[0].name,
                      zipcode="00042", gold_merchant_id=-1)
    vec = EmbeddingResolver(encoder, tok, build_vector_index(bundle, encoder, tok))
    gen = GenerativeResolver(decoder, tok, build_string_index(bundle), max_steps=8)
    assert vec(odd) is not None  # reserved zip filters to nothing; retry unfiltered
    assert gen.rank(odd, 3) == gen.rank(odd, 3)


def test_build_vector_index_rows_are_unit_norm(bundle, tok, encoder):
    index = build_vector_index(bundle, encoder, tok)
    norms = np.linalg.norm(index.vectors, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-5)
    assert index.vectors.shape == (len(bundle.merchants), 32)


def test_evaluate_untrained_generative_route_structure(bundle, tok, decoder):
    resolver = GenerativeResolver(decoder, tok, build_string_index(bundle),
                                  max_steps=6)
    report = evaluate(resolver, bundle, limit_per_split=4)
    for split in SPLITS:
        assert report.split_top5[split] >= report.split_top1[split]
    assert 0.0 <= report.weighted_accuracy <= 1.0
    assert math.isfinite(report.latency_ms["p95"])
