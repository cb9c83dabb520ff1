"""Attention-distribution metrics, Welch statistics, and retrieval scoring.

Two headline quantities compare a model's attention on an original sequence
against the same sequence with a fraction of tokens masked:

* score decay: (Att_orig(mask positions) - Att_masked(mask positions))
  / Att_orig(mask positions), where Att is the mean attention RECEIVED by
  the given key positions.
* variance increase: Var(received attention at non-mask positions, masked
  input) - Var(same, original input), population variance by default.

"Received attention" aggregates, per key position p, the weights A[i, p]
over all layers, heads, and query rows i >= p; last-layer-only and
final-row-only aggregations are available behind a flag since the headline
definition is a choice, not a law.

Large-scale reference magnitudes are carried along in reports for context;
they are published 1.1B-model numbers, not desk-scale targets.
"""

from __future__ import annotations

import ast
import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corruption import FIRST_ORDINARY, MASK, SEGMENT_NAMES, select_mask_positions
from .data import (
    NeedleTask,
    count_token_run,
    gen_multidoc,
    gen_needle,
    make_multidoc_task,
    random_fact,
)
from .errors import ContractError, StatsError
from .model import AttentionRecord
from .rng import SplitMix64, mix_seed

AGGREGATIONS = ("all", "last-layer", "last-row")

# Published 1.1B-scale statistics, reported alongside desk results for
# orientation only (desk magnitudes are not expected to match).
REFERENCE_LARGE_SCALE = {
    "1024": {"score_decay": 0.3408, "decay_t": -25.71,
             "variance_increase": 0.1266, "var_t": 12.26, "p": "<1e-6"},
    "4096": {"score_decay": 0.5334, "decay_t": -9.97,
             "variance_increase": 0.0780, "var_t": 5.22, "p": "<1e-6"},
    "answer_share": {"meap": 0.345, "ntp": 0.094},
}


# ---------------------------------------------------------------------------
# received attention


def _head_matrices(record: AttentionRecord, aggregation: str):
    if aggregation not in AGGREGATIONS:
        raise ContractError(f"aggregation {aggregation!r} not in {AGGREGATIONS}")
    layers = record.weights[-1:] if aggregation == "last-layer" else record.weights
    for layer in layers:
        for h in range(layer.shape[0]):
            yield layer[h]


def attention_score(record: AttentionRecord, positions,
                    aggregation: str = "all") -> float:
    """Mean attention received by the given key positions.

    Averages A[i, p] over every selected layer/head, every p in positions,
    and every query row i >= p (or only the final row for 'last-row').
    """
    pos = np.sort(np.asarray(positions, dtype=np.int64))  # canonical order
    if pos.size == 0:
        raise ContractError("attention_score: empty position set")
    if pos[0] < 0 or pos[-1] >= record.seq_len:
        raise ContractError(f"positions outside sequence of length {record.seq_len}")
    t = record.seq_len
    total = 0.0
    count = 0
    for m in _head_matrices(record, aggregation):
        if aggregation == "last-row":
            total += float(m[t - 1, pos].sum())
            count += pos.size
        else:
            for p in pos:
                total += float(m[p:, p].sum())
                count += t - int(p)
    return total / count


def received_profile(record: AttentionRecord,
                     aggregation: str = "all") -> np.ndarray:
    """Per-position mean received attention, r[p]."""
    t = record.seq_len
    sums = np.zeros(t, dtype=np.float64)
    counts = np.zeros(t, dtype=np.float64)
    for m in _head_matrices(record, aggregation):
        if aggregation == "last-row":
            sums += m[t - 1].astype(np.float64)
            counts += 1.0
        else:
            # column p summed over rows i >= p: total minus the strict upper part
            md = m.astype(np.float64)
            sums += md.sum(axis=0) - np.triu(md, k=1).sum(axis=0)
            counts += np.arange(t, 0, -1, dtype=np.float64)
    return sums / counts


@dataclass
class AttentionSamplePair:
    record_orig: AttentionRecord
    record_masked: AttentionRecord
    mask_positions: np.ndarray

    def __post_init__(self):
        a, b = self.record_orig, self.record_masked
        if (a.seq_len != b.seq_len or a.n_layers != b.n_layers
                or a.n_heads != b.n_heads):
            raise ContractError("paired records must share shape")


def score_decay(pair: AttentionSamplePair, aggregation: str = "all") -> float:
    if pair.mask_positions.size == 0:
        raise ContractError("score_decay: empty mask set")
    base = attention_score(pair.record_orig, pair.mask_positions, aggregation)
    if base == 0.0:
        raise StatsError("score_decay: zero attention on the original input")
    masked = attention_score(pair.record_masked, pair.mask_positions, aggregation)
    return (base - masked) / base


def variance_increase(pair: AttentionSamplePair, aggregation: str = "all",
                      population: bool = True) -> float:
    t = pair.record_orig.seq_len
    non_mask = np.setdiff1d(np.arange(t), pair.mask_positions)
    if non_mask.size < 2:
        raise ContractError("variance_increase: fewer than 2 non-mask positions")
    ddof = 0 if population else 1
    r_masked = received_profile(pair.record_masked, aggregation)[non_mask]
    r_orig = received_profile(pair.record_orig, aggregation)[non_mask]
    return float(np.var(r_masked, ddof=ddof) - np.var(r_orig, ddof=ddof))


def segment_shares(record: AttentionRecord, segment_map,
                   labels: Sequence[str] = SEGMENT_NAMES,
                   rows: str = "final") -> dict[str, float]:
    """Attention mass landing in each segment, averaged over layers/heads.

    By default only the final query row is read (the position that answers);
    rows='all' averages every query row's distribution instead.
    """
    seg = np.asarray(segment_map, dtype=np.int64)
    t = record.seq_len
    if seg.shape != (t,):
        raise ContractError(f"segment map shape {seg.shape} != ({t},)")
    if seg.min() < 0 or seg.max() >= len(labels):
        raise ContractError("segment map holds values outside the label set")
    present = np.unique(seg)
    acc = np.zeros(len(labels), dtype=np.float64)
    n_heads = 0
    for m in _head_matrices(record, "all"):
        n_heads += 1
        if rows == "final":
            w = m[t - 1].astype(np.float64)
        elif rows == "all":
            w = m.astype(np.float64).mean(axis=0)
        else:
            raise ContractError(f"rows {rows!r} not in {{final, all}}")
        for s in present:
            acc[s] += w[seg == s].sum()
    acc /= n_heads
    return {labels[int(s)]: float(acc[int(s)]) for s in present}


# ---------------------------------------------------------------------------
# Welch statistics (p-values via the regularized incomplete beta function)


def _betacf(a: float, b: float, x: float) -> float:
    # continued fraction for the incomplete beta, modified Lentz iteration
    max_iter, eps, fpmin = 300, 3e-16, 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def _t_two_sided_p(t_stat: float, df: float) -> float:
    if df <= 0:
        raise StatsError(f"degrees of freedom {df} must be positive")
    x = df / (df + t_stat * t_stat)
    return betainc_reg(df / 2.0, 0.5, x)


def welch_t(sample_a, sample_b) -> tuple[float, float]:
    """Welch's unequal-variance t with Welch-Satterthwaite df; two-sided p."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise StatsError("welch_t needs at least 2 values per sample")
    va = float(np.var(a, ddof=1))
    vb = float(np.var(b, ddof=1))
    if va == 0.0 and vb == 0.0:
        raise StatsError("welch_t: both samples have zero variance")
    sa, sb = va / a.size, vb / b.size
    se2 = sa + sb
    t_stat = (float(a.mean()) - float(b.mean())) / math.sqrt(se2)
    df = se2 * se2 / (sa * sa / (a.size - 1) + sb * sb / (b.size - 1))
    return t_stat, _t_two_sided_p(t_stat, df)


def t_against_zero(sample) -> tuple[float, float]:
    """One-sample t against zero: the zero-variance limit of welch_t."""
    a = np.asarray(sample, dtype=np.float64)
    if a.size < 2:
        raise StatsError("t_against_zero needs at least 2 values")
    va = float(np.var(a, ddof=1))
    if va == 0.0:
        raise StatsError("t_against_zero: zero variance")
    t_stat = float(a.mean()) / math.sqrt(va / a.size)
    return t_stat, _t_two_sided_p(t_stat, a.size - 1)


@dataclass
class AttentionStats:
    score_decay: float
    variance_increase: float
    decay_t: float
    decay_p: float
    var_t: float
    var_p: float
    n_samples: int
    aggregation: str


def pair_metrics(forward_fn: Callable, sequences: Sequence[np.ndarray],
                 mask_ratio: float, seed: int,
                 aggregation: str = "all") -> tuple[list[float], list[float]]:
    """Per-sample score decays and variance increases for one model.

    forward_fn(ids) must return an AttentionRecord. Each sequence is paired
    with a masked copy (splitmix64 masks at mask_ratio of eligible tokens).
    """
    decays: list[float] = []
    var_incs: list[float] = []
    for idx, seq in enumerate(sequences):
        seq = np.asarray(seq, dtype=np.int64)
        eligible = seq >= FIRST_ORDINARY
        plan = select_mask_positions(seq.shape[0], eligible, "random",
                                     mask_ratio, mix_seed(seed, idx))
        if plan.positions.size == 0:
            continue
        masked = seq.copy()
        masked[plan.positions] = MASK
        pair = AttentionSamplePair(
            record_orig=forward_fn(seq),
            record_masked=forward_fn(masked),
            mask_positions=plan.positions,
        )
        decays.append(score_decay(pair, aggregation))
        var_incs.append(variance_increase(pair, aggregation))
    return decays, var_incs


def summarize_pairs(decays: Sequence[float], var_incs: Sequence[float],
                    aggregation: str = "all") -> AttentionStats:
    dt, dp = t_against_zero(decays)
    vt, vp = t_against_zero(var_incs)
    return AttentionStats(
        score_decay=float(np.mean(decays)),
        variance_increase=float(np.mean(var_incs)),
        decay_t=dt, decay_p=dp, var_t=vt, var_p=vp,
        n_samples=len(decays), aggregation=aggregation,
    )


# ---------------------------------------------------------------------------
# retrieval grids


@dataclass
class RetrievalGrid:
    row_label: str
    row_values: list
    col_label: str
    col_values: list
    successes: np.ndarray
    samples: np.ndarray
    skipped: int = 0

    def accuracy(self) -> np.ndarray:
        if (self.samples == 0).any():
            raise ContractError("grid has cells with zero samples")
        return self.successes / self.samples


DecodeFn = Callable[[np.ndarray, int], np.ndarray]


def needle_grid(decode: DecodeFn, max_context: int, lengths: Sequence[int],
                depths: Sequence[float], samples: int, seed: int,
                decode_budget: int = 8, **fact_kwargs) -> RetrievalGrid:
    """Exact-match needle retrieval over a (depth x length) grid.

    A cell sample succeeds when the decoded continuation contains the gold
    value run. Prompts that cannot fit max_context with the decode budget
    are skipped and counted, never silently dropped.
    """
    succ = np.zeros((len(depths), len(lengths)), dtype=np.int64)
    tried = np.zeros_like(succ)
    skipped = 0
    for di, depth in enumerate(depths):
        for li, length in enumerate(lengths):
            for s in range(samples):
                if length + decode_budget > max_context:
                    skipped += 1
                    continue
                child = mix_seed(seed, di, li, s)
                key, value = random_fact(SplitMix64(child), **fact_kwargs)
                task = NeedleTask(context_length=length, depth_fraction=depth,
                                  key=key, value=value)
                prompt, gold = gen_needle(task, mix_seed(child, 1))
                out = decode(prompt, decode_budget)
                tried[di, li] += 1
                if count_token_run(out, gold) >= 1:
                    succ[di, li] += 1
    return RetrievalGrid("depth", list(depths), "length", list(lengths),
                         succ, tried, skipped)


def multidoc_grid(decode: DecodeFn, max_context: int, k: int,
                  positions: Sequence[int], samples: int, seed: int,
                  decode_budget: int = 8, **fact_kwargs) -> RetrievalGrid:
    """Exact-match multi-document retrieval by gold position (1-based)."""
    succ = np.zeros((1, len(positions)), dtype=np.int64)
    tried = np.zeros_like(succ)
    skipped = 0
    for pi, pos in enumerate(positions):
        for s in range(samples):
            child = mix_seed(seed, 31, pi, s)
            task = make_multidoc_task(k, pos, SplitMix64(child), **fact_kwargs)
            prompt, gold = gen_multidoc(task, mix_seed(child, 1))
            if prompt.shape[0] + decode_budget > max_context:
                skipped += 1
                continue
            out = decode(prompt, decode_budget)
            tried[0, pi] += 1
            if count_token_run(out, gold) >= 1:
                succ[0, pi] += 1
    return RetrievalGrid("k", [k], "position", list(positions),
                         succ, tried, skipped)


# ---------------------------------------------------------------------------
# report emission


def _grid_to_csv(grid: RetrievalGrid, acc_path: Path, counts_path: Path) -> None:
    acc = grid.accuracy()
    with open(acc_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow([f"{grid.row_label}|{grid.col_label}"]
                   + [repr(v) for v in grid.col_values])
        for i, rv in enumerate(grid.row_values):
            w.writerow([repr(rv)] + [repr(float(a)) for a in acc[i]])
    with open(counts_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow([f"{grid.row_label}|{grid.col_label}"]
                   + [repr(v) for v in grid.col_values])
        for i, rv in enumerate(grid.row_values):
            w.writerow([repr(rv)] + [f"{int(s)}/{int(n)}"
                                     for s, n in zip(grid.successes[i], grid.samples[i])])
        w.writerow([f"# skipped {grid.skipped}"])


def parse_grid_csv(acc_path, counts_path) -> RetrievalGrid:
    """Inverse of the CSV emission (used for round-trip audits)."""
    with open(acc_path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    row_label, col_label = rows[0][0].split("|")
    col_values = [ast.literal_eval(v) for v in rows[0][1:]]
    row_values = [ast.literal_eval(r[0]) for r in rows[1:]]
    acc = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    with open(counts_path, newline="", encoding="utf-8") as f:
        crows = list(csv.reader(f))
    skipped = 0
    body = []
    for r in crows[1:]:
        if r and r[0].startswith("# skipped"):
            skipped = int(r[0].split()[-1])
        else:
            body.append(r)
    succ = np.array([[int(c.split("/")[0]) for c in r[1:]] for r in body])
    samp = np.array([[int(c.split("/")[1]) for c in r[1:]] for r in body])
    grid = RetrievalGrid(row_label, row_values, col_label, col_values,
                         succ, samp, skipped)
    got = grid.accuracy()
    if not np.array_equal(got, acc):
        raise ContractError("counts and accuracy CSVs disagree")
    return grid


def _stats_dict(stats: AttentionStats) -> dict:
    return {
        "score_decay": stats.score_decay,
        "variance_increase": stats.variance_increase,
        "decay_t": stats.decay_t,
        "decay_p": stats.decay_p,
        "var_t": stats.var_t,
        "var_p": stats.var_p,
        "n_samples": stats.n_samples,
        "aggregation": stats.aggregation,
    }


def emit_report(out_dir, grids: dict[str, RetrievalGrid] | None = None,
                attention: dict[str, AttentionStats] | None = None,
                extras: dict | None = None) -> list[Path]:
    """Write per-grid CSVs, a JSON summary, and a plain-text report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    grids = grids or {}
    summary: dict = {"grids": {}, "attention": {}, "extras": extras or {}}

    for name, grid in grids.items():
        acc_path = out / f"{name}.csv"
        counts_path = out / f"{name}_counts.csv"
        _grid_to_csv(grid, acc_path, counts_path)
        written += [acc_path, counts_path]
        summary["grids"][name] = {
            "row_label": grid.row_label, "row_values": grid.row_values,
            "col_label": grid.col_label, "col_values": grid.col_values,
            "accuracy": grid.accuracy().tolist(),
            "successes": grid.successes.tolist(),
            "samples": grid.samples.tolist(),
            "skipped": grid.skipped,
        }
    if attention:
        summary["attention"] = {name: _stats_dict(s) for name, s in attention.items()}
        summary["reference_large_scale"] = REFERENCE_LARGE_SCALE

    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n",
                            encoding="utf-8")
    written.append(summary_path)

    lines = ["meaplab report", "=" * 40]
    if attention:
        lines.append("")
        lines.append(f"{'model':<12}{'metric':<20}{'value':>12}{'t-stat':>12}"
                     f"{'p-value':>12}{'n':>8}")
        for name, s in sorted(attention.items()):
            lines.append(f"{name:<12}{'score-decay':<20}{s.score_decay:>12.6f}"
                         f"{s.decay_t:>12.4f}{s.decay_p:>12.3e}{s.n_samples:>8d}")
            lines.append(f"{name:<12}{'variance-increase':<20}{s.variance_increase:>12.6f}"
                         f"{s.var_t:>12.4f}{s.var_p:>12.3e}{s.n_samples:>8d}")
        lines.append("")
        lines.append("published 1.1B-scale reference (orientation only):")
        for length in ("1024", "4096"):
            ref = REFERENCE_LARGE_SCALE[length]
            lines.append(f"  length {length}: score decay {ref['score_decay']:.2%} "
                         f"(t {ref['decay_t']}), variance increase "
                         f"{ref['variance_increase']:.2%} (t {ref['var_t']}), p {ref['p']}")
    for name, grid in grids.items():
        lines.append("")
        lines.append(f"grid {name} ({grid.row_label} x {grid.col_label}, "
                     f"skipped {grid.skipped})")
        header = f"{grid.row_label:>10} " + " ".join(f"{v!r:>10}" for v in grid.col_values)
        lines.append(header)
        acc = grid.accuracy()
        for i, rv in enumerate(grid.row_values):
            lines.append(f"{rv!r:>10} " + " ".join(f"{a:>10.4f}" for a in acc[i]))
    report_path = out / "report.txt"
    report_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(report_path)
    return written
