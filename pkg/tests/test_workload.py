"""Trace generation, diversity metrics, pre-gate noise, log parsing."""

import math

import numpy as np
import pytest

from moesim import (
    EmbeddingTable,
    LogParseError,
    MB,
    ModelSpec,
    NoiseConfig,
    Sample,
    Seed,
    TokenBatch,
    TraceGenConfig,
    build_embedding_table,
    format_log_line,
    generate_trace,
    mean_pool,
    parse_activation_log,
    pregate_signal,
    token_diversity,
    top_experts,
)

MODEL = ModelSpec(
    num_layers=6,
    experts_per_layer=16,
    top_k=2,
    expert_size_bytes=MB,
    embed_dim=8,
    vocab_size=64,
)


def table_for(model, seed=11):
    return build_embedding_table(model, Seed(seed))


# -- embedding table ---------------------------------------------------------

def test_embedding_table_shape_and_determinism():
    model = ModelSpec(4, 8, 1, MB, 3, 1)
    a = build_embedding_table(model, Seed(5))
    b = build_embedding_table(model, Seed(5))
    assert a.vectors.shape == (1, 3)
    assert (a.vectors == b.vectors).all()


def test_embedding_table_varies_with_seed():
    model = ModelSpec(4, 8, 1, MB, 8, 100)
    a = build_embedding_table(model, Seed(1))
    b = build_embedding_table(model, Seed(2))
    assert (a.vectors != b.vectors).any()


def test_embedding_table_large_shape():
    model = ModelSpec(2, 4, 1, MB, 64, 50_000)
    t = build_embedding_table(model, Seed(0))
    assert t.vectors.shape == (50_000, 64)


def test_embedding_entries_bounded_and_centered():
    t = table_for(ModelSpec(2, 4, 1, MB, 16, 4096))
    assert t.vectors.min() >= -1.0
    assert t.vectors.max() <= 1.0
    assert abs(t.vectors.mean()) < 0.02


# -- diversity and pooling ---------------------------------------------------

def planted_table(rows):
    vectors = np.array(rows, dtype=np.float64)
    return EmbeddingTable(vectors=vectors, seed=Seed(0))


def test_token_diversity_single_token_is_zero():
    model = ModelSpec(2, 4, 1, MB, 2, 4)
    assert token_diversity(TokenBatch.of(model, [1]), table_for(model)) == 0.0


def test_token_diversity_identical_tokens_is_zero():
    model = ModelSpec(2, 4, 1, MB, 2, 4)
    batch = TokenBatch.of(model, [2, 2, 2])
    assert token_diversity(batch, table_for(model)) == 0.0


def test_token_diversity_hand_computed_triangle():
    # pairwise distances 5, 8, 5 sum to 18
    table = planted_table([[0, 0], [3, 4], [0, 8]])
    batch = TokenBatch(token_ids=(0, 1, 2))
    assert abs(token_diversity(batch, table) - 18.0) < 1e-9


def test_token_diversity_is_permutation_symmetric():
    model = ModelSpec(2, 4, 1, MB, 6, 32)
    table = table_for(model)
    a = token_diversity(TokenBatch.of(model, [3, 17, 9, 25]), table)
    b = token_diversity(TokenBatch.of(model, [25, 3, 9, 17]), table)
    assert abs(a - b) < 1e-9


def test_token_diversity_matches_bruteforce_on_duplicated_batch():
    model = ModelSpec(2, 4, 1, MB, 4, 32)
    table = table_for(model)
    ids = [4, 9, 13]
    doubled = TokenBatch.of(model, ids + ids)

    def brute(token_ids):
        total = 0.0
        for i in range(len(token_ids)):
            for j in range(i + 1, len(token_ids)):
                diff = table.vectors[token_ids[i]] - table.vectors[token_ids[j]]
                total += math.sqrt(float((diff * diff).sum()))
        return total

    assert abs(token_diversity(doubled, table) - brute(ids + ids)) < 1e-9


def test_mean_pool_single_token_is_identity():
    model = ModelSpec(2, 4, 1, MB, 5, 16)
    table = table_for(model)
    pooled = mean_pool(TokenBatch.of(model, [7]), table)
    assert (pooled == table.vectors[7]).all()


def test_mean_pool_two_tokens_hand_computed():
    table = planted_table([[1, 1], [3, 3]])
    pooled = mean_pool(TokenBatch(token_ids=(0, 1)), table)
    assert (pooled == np.array([2.0, 2.0])).all()


def test_mean_pool_repeated_token_is_idempotent():
    model = ModelSpec(2, 4, 1, MB, 5, 16)
    table = table_for(model)
    pooled = mean_pool(TokenBatch.of(model, [3, 3]), table)
    assert np.allclose(pooled, table.vectors[3], atol=1e-12)


def test_token_batch_validates_range():
    model = ModelSpec(2, 4, 1, MB, 2, 8)
    with pytest.raises(ValueError):
        TokenBatch.of(model, [8])
    with pytest.raises(ValueError):
        TokenBatch.of(model, [])


# -- trace generation --------------------------------------------------------

def test_generate_trace_is_deterministic():
    table = table_for(MODEL)
    batch = TokenBatch.of(MODEL, [3, 40, 9])
    cfg = TraceGenConfig(persistence=0.7)
    a = generate_trace(MODEL, table, batch, cfg, Seed(9))
    b = generate_trace(MODEL, table, batch, cfg, Seed(9))
    assert a.per_layer_actual == b.per_layer_actual
    for ga, gb in zip(a.per_layer_gate, b.per_layer_gate):
        assert (ga.probs == gb.probs).all()


def test_full_persistence_single_group_replays_layer_zero():
    table = table_for(MODEL)
    batch = TokenBatch.of(MODEL, [5])
    trace = generate_trace(
        MODEL, table, batch, TraceGenConfig(persistence=1.0), Seed(4)
    )
    assert trace.group_sizes == (1,)
    first = trace.per_layer_actual[0]
    assert all(actual == first for actual in trace.per_layer_actual)


def test_zero_diversity_batch_activates_exactly_top_k():
    table = table_for(MODEL)
    batch = TokenBatch.of(MODEL, [5, 5, 5, 5])
    trace = generate_trace(MODEL, table, batch, TraceGenConfig(), Seed(4))
    for actual in trace.per_layer_actual:
        assert len(actual) == MODEL.top_k


def test_actual_sets_are_deduplicated_and_bounded():
    table = table_for(MODEL)
    batch = TokenBatch.of(MODEL, [1, 60, 33, 17])
    trace = generate_trace(MODEL, table, batch, TraceGenConfig(), Seed(8))
    groups = len(trace.group_sizes)
    for actual in trace.per_layer_actual:
        assert len(actual) == len(set(actual))
        assert MODEL.top_k <= len(actual) <= min(
            MODEL.top_k * groups, MODEL.experts_per_layer
        )


def test_actual_experts_carry_gate_mass():
    table = table_for(MODEL)
    batch = TokenBatch.of(MODEL, [1, 60, 33])
    trace = generate_trace(MODEL, table, batch, TraceGenConfig(), Seed(8))
    for gate, actual in zip(trace.per_layer_gate, trace.per_layer_actual):
        assert abs(float(gate.probs.sum()) - 1.0) < 1e-9
        for e in actual:
            assert gate.probs[e] > 0


def test_union_size_grows_with_diversity():
    # higher-diversity batches activate more experts on average; token
    # pairs are chosen so the diversity gap is unambiguous
    model = ModelSpec(4, 16, 2, MB, 8, 64)
    table = table_for(model, seed=2)
    dist = np.linalg.norm(
        table.vectors[:, None, :] - table.vectors[None, :, :], axis=2
    )
    near = divmod(int(np.argmin(dist + np.eye(64) * 1e9)), 64)
    far = divmod(int(np.argmax(dist)), 64)
    lo_batch = TokenBatch.of(model, list(near))
    hi_batch = TokenBatch.of(model, list(far))
    assert token_diversity(lo_batch, table) < token_diversity(hi_batch, table)

    def mean_union(batch):
        sizes = []
        for s in range(400):
            trace = generate_trace(
                model, table, batch, TraceGenConfig(), Seed(10_000 + s)
            )
            sizes.extend(len(a) for a in trace.per_layer_actual)
        return float(np.mean(sizes))

    assert mean_union(hi_batch) >= mean_union(lo_batch)


def test_generate_trace_rejects_bad_persistence():
    table = table_for(MODEL)
    batch = TokenBatch.of(MODEL, [5])
    with pytest.raises(ValueError):
        generate_trace(
            MODEL, table, batch, TraceGenConfig(persistence=1.5), Seed(0)
        )
    with pytest.raises(ValueError):
        generate_trace(
            MODEL, table, batch, TraceGenConfig(persistence=-0.1), Seed(0)
        )


# -- pre-gate signal ---------------------------------------------------------

def test_pregate_noiseless_returns_true_gate():
    table = table_for(MODEL)
    trace = generate_trace(
        MODEL, table, TokenBatch.of(MODEL, [3, 40]), TraceGenConfig(), Seed(6)
    )
    signal = pregate_signal(trace, 1, 2, NoiseConfig(decay_rate=0.0), Seed(1))
    assert np.allclose(signal.probs, trace.per_layer_gate[3].probs, atol=1e-12)


def test_pregate_full_noise_is_uniform():
    table = table_for(MODEL)
    trace = generate_trace(
        MODEL, table, TokenBatch.of(MODEL, [3, 40]), TraceGenConfig(), Seed(6)
    )
    # decay_rate -> inf drives the mixing weight to 1
    signal = pregate_signal(trace, 0, 1, NoiseConfig(decay_rate=1e9), Seed(1))
    assert np.allclose(signal.probs, 1.0 / MODEL.experts_per_layer, atol=1e-9)


def test_pregate_accuracy_decays_with_horizon():
    model = ModelSpec(10, 16, 2, MB, 8, 64)
    table = table_for(model, seed=3)
    noise = NoiseConfig()
    hits = {s: 0.0 for s in range(1, 9)}
    counts = {s: 0 for s in range(1, 9)}
    trials = 200
    for i in range(trials):
        trace = generate_trace(
            model, table, TokenBatch.of(model, [7, 21]),
            TraceGenConfig(persistence=0.8), Seed(500 + i)
        )
        # average over every launch layer so layer identity cancels out
        for s in range(1, 9):
            for frm in range(model.num_layers - s):
                signal = pregate_signal(trace, frm, s, noise, Seed(900 + i))
                picked = top_experts(signal.probs, model.top_k)
                actual = set(trace.per_layer_actual[frm + s])
                hits[s] += len(set(picked) & actual) / len(actual)
                counts[s] += 1
    rates = [hits[s] / counts[s] for s in range(1, 9)]
    # allow small sampling wiggle while requiring the overall decay
    for lo, hi in zip(rates[1:], rates[:-1]):
        assert lo <= hi + 0.03
    assert rates[-1] < rates[0]


def test_pregate_rejects_out_of_range_horizon():
    table = table_for(MODEL)
    trace = generate_trace(
        MODEL, table, TokenBatch.of(MODEL, [3]), TraceGenConfig(), Seed(6)
    )
    with pytest.raises(ValueError):
        pregate_signal(trace, 4, 2, NoiseConfig(), Seed(0))
    with pytest.raises(ValueError):
        pregate_signal(trace, 0, 0, NoiseConfig(), Seed(0))


# -- activation log ----------------------------------------------------------

def test_parse_empty_log():
    assert parse_activation_log([], MODEL) == []


def test_log_line_round_trip():
    sample = Sample(
        token_ids=(5, 9),
        layer_idx=3,
        predicted_experts=(1, 2),
        actual_experts=(2, 7),
        step_size=2,
    )
    line = format_log_line(sample)
    parsed = parse_activation_log([line], MODEL)
    assert parsed == [sample]


def test_parse_reports_line_number_and_field():
    good = format_log_line(
        Sample((1,), 0, (0,), (0,), 1)
    )
    bad = "token_ids=1;layer_idx=0;predicted_experts=zap;actual_experts=0;step_size=1"
    with pytest.raises(LogParseError) as err:
        parse_activation_log([good, bad], MODEL)
    assert "line 2" in str(err.value)
    assert "predicted_experts" in str(err.value)


def test_parse_rejects_out_of_range_expert():
    # expert index M is one past the end
    line = (
        "token_ids=1;layer_idx=0;predicted_experts=0;"
        f"actual_experts={MODEL.experts_per_layer};step_size=1"
    )
    with pytest.raises(LogParseError) as err:
        parse_activation_log([line], MODEL)
    assert "line 1" in str(err.value)
