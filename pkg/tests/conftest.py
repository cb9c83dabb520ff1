"""Shared oracles and fixtures.

The reference implementations here are deliberately flat and loop-based so
they stay independent of the library's vectorised code paths.
"""

import numpy as np
import pytest

from meaplab.model import AttentionRecord


def central_difference(f, param, i, j, eps=1e-5):
    """Central finite difference of scalar f() w.r.t. param.data[i, j]."""
    orig = param.data[i, j]
    param.data[i, j] = orig + eps
    plus = f()
    param.data[i, j] = orig - eps
    minus = f()
    param.data[i, j] = orig
    return (plus - minus) / (2 * eps)


def rel_err(a, b):
    return abs(a - b) / max(1.0, abs(b))


def random_record(rng, n_layers=2, n_heads=2, t=4, causal=False):
    """Random attention record with rows normalised to 1."""
    weights = []
    for _ in range(n_layers):
        layer = rng.random((n_heads, t, t))
        if causal:
            for h in range(n_heads):
                layer[h] = np.tril(layer[h])
        layer /= layer.sum(axis=2, keepdims=True)
        weights.append(layer)
    return AttentionRecord(weights=weights, seq_len=t)


def uniform_record(n_layers=2, n_heads=2, t=4):
    """Every row uniform over all t positions (not causal)."""
    w = [np.full((n_heads, t, t), 1.0 / t) for _ in range(n_layers)]
    return AttentionRecord(weights=w, seq_len=t)


# flat-loop references for the attention metrics ---------------------------


def ref_attention_score(record, positions):
    total, count = 0.0, 0
    for layer in record.weights:
        for h in range(layer.shape[0]):
            for p in positions:
                for i in range(record.seq_len):
                    if i >= p:
                        total += float(layer[h][i][p])
                        count += 1
    return total / count


def ref_received_profile(record):
    t = record.seq_len
    out = np.zeros(t)
    for p in range(t):
        total, count = 0.0, 0
        for layer in record.weights:
            for h in range(layer.shape[0]):
                for i in range(t):
                    if i >= p:
                        total += float(layer[h][i][p])
                        count += 1
        out[p] = total / count
    return out


def ref_score_decay(rec_orig, rec_masked, positions):
    base = ref_attention_score(rec_orig, positions)
    return (base - ref_attention_score(rec_masked, positions)) / base


def ref_variance_increase(rec_orig, rec_masked, mask_positions):
    t = rec_orig.seq_len
    non_mask = [p for p in range(t) if p not in set(int(m) for m in mask_positions)]
    rm = ref_received_profile(rec_masked)[non_mask]
    ro = ref_received_profile(rec_orig)[non_mask]

    def pop_var(v):
        mean = sum(v) / len(v)
        return sum((x - mean) ** 2 for x in v) / len(v)

    return pop_var(list(rm)) - pop_var(list(ro))


def ref_segment_shares(record, segment_map):
    t = record.seq_len
    acc = {}
    n = 0
    for layer in record.weights:
        for h in range(layer.shape[0]):
            n += 1
            for j in range(t):
                seg = int(segment_map[j])
                acc[seg] = acc.get(seg, 0.0) + float(layer[h][t - 1][j])
    return {seg: v / n for seg, v in acc.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(0)
