import numpy as np
import pytest
import scipy.stats

from meaplab.analysis import (
    AttentionSamplePair,
    AttentionStats,
    RetrievalGrid,
    attention_score,
    betainc_reg,
    emit_report,
    multidoc_grid,
    needle_grid,
    parse_grid_csv,
    received_profile,
    score_decay,
    segment_shares,
    summarize_pairs,
    t_against_zero,
    variance_increase,
    welch_t,
)
from meaplab.data import byte_tokens, detokenize_bytes
from meaplab.errors import ContractError, StatsError
from meaplab.model import AttentionRecord

from conftest import (
    random_record,
    ref_attention_score,
    ref_received_profile,
    ref_score_decay,
    ref_segment_shares,
    ref_variance_increase,
    uniform_record,
)

# frozen from scipy.stats.ttest_ind([1,2,3], [2,3,4], equal_var=False)
WELCH_123_234 = (-1.224744871391589, 0.2878641347266908)


# attention score -------------------------------------------------------------


def test_attention_score_uniform_single_position():
    rec = uniform_record(t=8)
    for p in (0, 3, 7):
        assert abs(attention_score(rec, [p]) - 1 / 8) < 1e-12


def test_attention_score_uniform_all_positions():
    rec = uniform_record(t=6)
    assert abs(attention_score(rec, list(range(6))) - 1 / 6) < 1e-12


def test_attention_score_empty_positions_rejected():
    with pytest.raises(ContractError):
        attention_score(uniform_record(), [])
    with pytest.raises(ContractError):
        attention_score(uniform_record(t=4), [9])


def test_attention_score_matches_flat_loops(rng):
    for _ in range(20):
        rec = random_record(rng, t=5)
        positions = sorted(set(rng.integers(0, 5, size=3).tolist()))
        got = attention_score(rec, positions)
        assert abs(got - ref_attention_score(rec, positions)) < 1e-10


def test_received_profile_matches_flat_loops(rng):
    for _ in range(10):
        rec = random_record(rng, t=6)
        assert np.abs(received_profile(rec) - ref_received_profile(rec)).max() < 1e-10


# score decay / variance increase ----------------------------------------------


def test_score_decay_identical_records_is_zero(rng):
    rec = random_record(rng)
    pair = AttentionSamplePair(rec, rec, np.array([1, 2]))
    assert score_decay(pair) == 0.0


def test_score_decay_halved_attention(rng):
    rec = random_record(rng, t=6)
    mask_positions = np.array([2, 4])
    halved = [layer.copy() for layer in rec.weights]
    for layer in halved:
        layer[:, :, mask_positions] *= 0.5
    pair = AttentionSamplePair(rec, AttentionRecord(halved, 6), mask_positions)
    assert abs(score_decay(pair) - 0.5) < 1e-12


def test_score_decay_matches_flat_loops(rng):
    for _ in range(20):
        a, b = random_record(rng, t=5), random_record(rng, t=5)
        positions = np.array(sorted(set(rng.integers(0, 5, size=2).tolist())))
        pair = AttentionSamplePair(a, b, positions)
        assert abs(score_decay(pair) - ref_score_decay(a, b, positions)) < 1e-10


def test_score_decay_invariant_to_position_order(rng):
    a, b = random_record(rng, t=6), random_record(rng, t=6)
    positions = np.array([1, 3, 5])
    pair1 = AttentionSamplePair(a, b, positions)
    pair2 = AttentionSamplePair(a, b, positions[::-1].copy())
    assert score_decay(pair1) == score_decay(pair2)


def test_variance_increase_identical_is_zero(rng):
    rec = random_record(rng)
    pair = AttentionSamplePair(rec, rec, np.array([0]))
    assert variance_increase(pair) == 0.0


def test_variance_increase_matches_flat_loops(rng):
    for _ in range(20):
        a, b = random_record(rng, t=6), random_record(rng, t=6)
        positions = np.array([1, 4])
        pair = AttentionSamplePair(a, b, positions)
        got = variance_increase(pair)
        assert abs(got - ref_variance_increase(a, b, positions)) < 1e-10


def test_variance_increase_needs_two_non_mask():
    rec = uniform_record(t=3)
    pair = AttentionSamplePair(rec, rec, np.array([0, 1]))
    with pytest.raises(ContractError):
        variance_increase(pair)


def test_metric_oracle_equivalence_100_records(rng):
    """Acceptance-grade sweep: all four metrics vs flat loops, 1e-10."""
    for _ in range(100):
        a = random_record(rng, n_layers=2, n_heads=2, t=4)
        b = random_record(rng, n_layers=2, n_heads=2, t=4)
        positions = np.array(sorted(set(rng.integers(0, 4, size=2).tolist())))
        pair = AttentionSamplePair(a, b, positions)
        assert abs(attention_score(a, positions)
                   - ref_attention_score(a, positions)) < 1e-10
        assert abs(score_decay(pair) - ref_score_decay(a, b, positions)) < 1e-10
        if positions.size <= 2:
            assert abs(variance_increase(pair)
                       - ref_variance_increase(a, b, positions)) < 1e-10
        seg = rng.integers(0, 3, size=4)
        got = segment_shares(a, seg, labels=("s0", "s1", "s2"))
        ref = ref_segment_shares(a, seg)
        for sid, val in ref.items():
            assert abs(got[f"s{sid}"] - val) < 1e-10


# segment shares ---------------------------------------------------------------


def test_segment_shares_uniform_half():
    rec = uniform_record(t=8)
    seg = np.array([1] * 4 + [2] * 4)
    shares = segment_shares(rec, seg)
    assert abs(shares["prompt"] - 0.5) < 1e-12
    assert abs(shares["answer"] - 0.5) < 1e-12


def test_segment_shares_sum_to_one(rng):
    for _ in range(10):
        rec = random_record(rng, t=7)
        seg = rng.integers(0, 5, size=7)
        shares = segment_shares(rec, seg)
        assert abs(sum(shares.values()) - 1.0) < 1e-5


def test_segment_shares_uncovered_positions_rejected():
    rec = uniform_record(t=4)
    with pytest.raises(ContractError):
        segment_shares(rec, np.array([0, 1, 9, 0]))


def test_segment_shares_all_rows_mode(rng):
    rec = random_record(rng, t=5)
    seg = np.array([0, 0, 1, 1, 1])
    shares = segment_shares(rec, seg, rows="all")
    assert abs(sum(shares.values()) - 1.0) < 1e-5


def test_segment_shares_qa_layout(rng):
    """The five-segment QA layout used in the published attention figures."""
    labels = ("context-before", "answer", "context-after", "query", "eos")
    rec = random_record(rng, t=12)
    seg = np.array([0, 0, 0, 0, 1, 1, 2, 2, 2, 3, 3, 4])
    shares = segment_shares(rec, seg, labels=labels)
    assert set(shares) == set(labels)
    assert abs(sum(shares.values()) - 1.0) < 1e-5
    ref = ref_segment_shares(rec, seg)
    for sid, val in ref.items():
        assert abs(shares[labels[sid]] - val) < 1e-10


# welch -----------------------------------------------------------------------


def test_welch_identical_samples():
    t, p = welch_t([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert t == 0.0
    assert abs(p - 1.0) < 1e-12


def test_welch_textbook_pair_matches_frozen_oracle():
    t, p = welch_t([1, 2, 3], [2, 3, 4])
    assert abs(t - WELCH_123_234[0]) < 1e-10
    assert abs(p - WELCH_123_234[1]) < 1e-10


def test_welch_matches_scipy_on_random_pairs(rng):
    for _ in range(50):
        a = rng.normal(loc=rng.normal(), scale=1 + rng.random(),
                       size=int(rng.integers(3, 40)))
        b = rng.normal(loc=rng.normal(), scale=1 + rng.random(),
                       size=int(rng.integers(3, 40)))
        t, p = welch_t(a, b)
        ref = scipy.stats.ttest_ind(a, b, equal_var=False)
        assert abs(t - ref.statistic) < 1e-10
        assert abs(p - ref.pvalue) < 1e-10


def test_welch_antisymmetry_exact(rng):
    a = rng.normal(size=9)
    b = rng.normal(size=7) + 0.5
    t_ab, p_ab = welch_t(a, b)
    t_ba, p_ba = welch_t(b, a)
    assert t_ab == -t_ba
    assert p_ab == p_ba


def test_welch_degenerate_variance_rejected():
    with pytest.raises(StatsError):
        welch_t([1.0, 1.0, 1.0], [1.0, 1.0, 1.0])
    with pytest.raises(StatsError):
        welch_t([1.0], [2.0, 3.0])


def test_t_against_zero_matches_scipy(rng):
    for _ in range(25):
        a = rng.normal(loc=0.3, size=int(rng.integers(3, 60)))
        t, p = t_against_zero(a)
        ref = scipy.stats.ttest_1samp(a, 0.0)
        assert abs(t - ref.statistic) < 1e-10
        assert abs(p - ref.pvalue) < 1e-10


def test_betainc_against_scipy(rng):
    import scipy.special
    for _ in range(100):
        a = float(rng.random() * 20 + 0.1)
        b = float(rng.random() * 20 + 0.1)
        x = float(rng.random())
        assert abs(betainc_reg(a, b, x) - scipy.special.betainc(a, b, x)) < 1e-10


def test_summarize_pairs():
    decays = [0.1, 0.2, 0.15, 0.25]
    var_incs = [0.01, 0.03, 0.02, 0.05]
    stats = summarize_pairs(decays, var_incs)
    assert isinstance(stats, AttentionStats)
    assert abs(stats.score_decay - np.mean(decays)) < 1e-15
    ref = scipy.stats.ttest_1samp(decays, 0.0)
    assert abs(stats.decay_t - ref.statistic) < 1e-10


# retrieval grids ---------------------------------------------------------------


def perfect_decoder(prompt, budget):
    """Oracle that parses the prompt grammar and answers the query."""
    text = detokenize_bytes(prompt)
    q = text.rindex(b"?")
    key = text[q + 1:text.index(b"=", q)]
    fact_start = text.index(b"#" + key + b"=")
    v_start = fact_start + len(key) + 2
    value = text[v_start:text.index(b"#", v_start)]
    return byte_tokens(value[:budget])


def broken_decoder(prompt, budget):
    return np.array([], dtype=np.int64)


def test_rigged_always_correct_model_scores_one():
    grid = needle_grid(perfect_decoder, max_context=256, lengths=[64, 96],
                       depths=[0.0, 0.5, 1.0], samples=3, seed=0)
    assert np.array_equal(grid.accuracy(), np.ones((3, 2)))
    assert grid.skipped == 0


def test_rigged_always_wrong_model_scores_zero():
    grid = needle_grid(broken_decoder, max_context=256, lengths=[64],
                       depths=[0.5], samples=4, seed=0)
    assert np.array_equal(grid.accuracy(), np.zeros((1, 1)))


def test_needle_grid_depth_boundaries_work():
    grid = needle_grid(perfect_decoder, max_context=128, lengths=[80],
                       depths=[0.0, 1.0], samples=2, seed=3)
    assert grid.accuracy().shape == (2, 1)


def test_needle_grid_skips_overflow_tasks():
    grid = needle_grid(perfect_decoder, max_context=100, lengths=[64, 512],
                       depths=[0.5], samples=3, seed=0)
    assert grid.skipped == 3
    assert grid.samples[0, 0] == 3 and grid.samples[0, 1] == 0
    with pytest.raises(ContractError):
        grid.accuracy()


def test_multidoc_grid_rigged_and_shape():
    grid = multidoc_grid(perfect_decoder, max_context=256, k=4,
                         positions=[1, 2, 4], samples=3, seed=1)
    assert grid.accuracy().shape == (1, 3)
    assert np.array_equal(grid.accuracy(), np.ones((1, 3)))


def test_multidoc_grid_paper_probe_layout():
    grid = multidoc_grid(perfect_decoder, max_context=4096, k=20,
                         positions=[1, 5, 10, 15, 20], samples=1, seed=1)
    assert grid.col_values == [1, 5, 10, 15, 20]
    assert grid.accuracy().shape == (1, 5)


# reports -----------------------------------------------------------------------


def test_grid_csv_round_trip(tmp_path, rng):
    grid = RetrievalGrid("depth", [0.0, 0.5], "length", [64, 128],
                         successes=np.array([[1, 2], [3, 4]]),
                         samples=np.array([[4, 4], [4, 4]]), skipped=2)
    emit_report(tmp_path, grids={"needle": grid})
    back = parse_grid_csv(tmp_path / "needle.csv", tmp_path / "needle_counts.csv")
    assert back.row_label == "depth" and back.col_label == "length"
    assert back.row_values == [0.0, 0.5]
    assert back.col_values == [64, 128]
    assert np.array_equal(back.successes, grid.successes)
    assert np.array_equal(back.samples, grid.samples)
    assert back.skipped == 2
    assert np.array_equal(back.accuracy(), grid.accuracy())


def test_emit_report_empty_is_summary_only(tmp_path):
    written = emit_report(tmp_path)
    names = {p.name for p in written}
    assert names == {"summary.json", "report.txt"}


def test_emit_report_is_byte_deterministic(tmp_path):
    stats = summarize_pairs([0.1, 0.2, 0.3], [0.01, 0.02, 0.04])
    grid = RetrievalGrid("k", [4], "position", [1, 2],
                         successes=np.array([[1, 2]]),
                         samples=np.array([[2, 2]]))
    d1, d2 = tmp_path / "a", tmp_path / "b"
    emit_report(d1, grids={"g": grid}, attention={"meap": stats})
    emit_report(d2, grids={"g": grid}, attention={"meap": stats})
    for name in ("g.csv", "g_counts.csv", "summary.json", "report.txt"):
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()
