"""Mask selection and sequence corruption.

Two training-time transforms live here:

* ``corrupt_pretrain``: write MASK over a fraction P of the eligible
  (non-special) positions of a sequence, then build an ordinary shifted
  next-token batch over the corrupted input. Targets are always the
  original tokens, so the model is never taught to emit MASK.

* ``pack_finetune``: for a (prompt, answer) pair whose answer is longer
  than the gate (50 tokens), concatenate prompt+answer with a full copy of
  itself and mask only inside the copied answer region. Loss covers the
  original answer tokens plus the masked copies (``union`` scope) or just
  the masked copies (``masked_only``). Short answers fall back to a plain
  next-token batch with loss on the answer.

Mask positions are drawn with splitmix64 so masks are bit-reproducible
across platforms. The count is exactly round_half_up(P * n_eligible).

Batch layout convention: ``target_ids[i]`` is the original token at i+1 and
``loss_mask[i]`` gates the logits at row i. A batch therefore "predicts
token position p" at row p-1; ``CorruptedBatch.loss_token_positions`` maps
back to token indices for set-level checks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    ContaminationError,
    ContractError,
    FormatError,
    LengthError,
)
from .rng import SplitMix64, partial_fisher_yates, round_half_up

PAD, BOS, EOS, MASK = 0, 1, 2, 3
FIRST_ORDINARY = 4

SEG_PLAIN, SEG_PROMPT, SEG_ANSWER, SEG_DUP_PROMPT, SEG_DUP_ANSWER = range(5)
SEGMENT_NAMES = ("plain", "prompt", "answer", "dup-prompt", "dup-answer")

ANSWER_GATE = 50  # answers at most this many tokens long get plain NTP

BATCH_MAGIC = b"MEAPBAT1"


@dataclass(frozen=True)
class Vocabulary:
    """Token-id space: PAD=0, BOS=1, EOS=2, MASK=3, ordinary ids from 4."""

    size: int

    def __post_init__(self):
        if self.size < 5:
            raise ConfigError(f"vocabulary size {self.size} < 5")

    @staticmethod
    def is_special(token_id: int) -> bool:
        return token_id < FIRST_ORDINARY


def parse_strategy(spec: str) -> tuple[str, int]:
    """'random' -> ('random', 0); 'span:5' -> ('span', 5)."""
    if spec == "random":
        return ("random", 0)
    if spec.startswith("span:"):
        try:
            span = int(spec[5:])
        except ValueError:
            span = 0
        if span <= 0:
            raise ConfigError(f"bad span strategy {spec!r}; want span:K with K >= 1")
        return ("span", span)
    raise ConfigError(f"unknown masking strategy {spec!r}")


@dataclass(frozen=True)
class MaskPlan:
    length: int
    strategy: str
    ratio: float
    seed: int
    positions: np.ndarray  # sorted int64, no special-token indices


def _place_spans(n: int, eligible: np.ndarray, k: int, span: int,
                 rng: SplitMix64) -> np.ndarray:
    """Mark ceil(k/span) contiguous runs totalling exactly k positions.

    Run lengths are span, span, ..., then one remainder run. Starts are
    scanned in a shuffled order; a start is accepted only if the whole run
    lies on eligible, unmarked positions with unmarked flanks, which keeps
    runs maximal. If strict placement runs out of room (extreme ratios),
    leftover quota is filled position-by-position in the same order.
    """
    marked = np.zeros(n, dtype=bool)
    candidates = partial_fisher_yates(list(np.flatnonzero(eligible)), int(eligible.sum()), rng)
    run_lengths = [span] * (k // span)
    if k % span:
        run_lengths.append(k % span)
    placed = 0
    for run_len in run_lengths:
        for s in candidates:
            e = s + run_len
            if e > n:
                continue
            if not eligible[s:e].all() or marked[s:e].any():
                continue
            if (s > 0 and marked[s - 1]) or (e < n and marked[e]):
                continue  # would merge with a neighbouring run
            marked[s:e] = True
            placed += run_len
            break
    if placed < k:
        for s in candidates:
            if placed == k:
                break
            if not marked[s]:
                marked[s] = True
                placed += 1
    return np.flatnonzero(marked)


def select_mask_positions(n: int, eligible, strategy: str, ratio: float,
                          seed: int) -> MaskPlan:
    """Choose round_half_up(ratio * n_eligible) positions to mask.

    ``random`` takes the first k entries of a partial Fisher-Yates shuffle
    of the eligible indices; ``span:K`` places contiguous runs (see
    _place_spans). Both are driven by one splitmix64 stream per call.
    """
    if not (0.0 <= ratio <= 1.0):
        raise ConfigError(f"mask ratio {ratio} outside [0, 1]")
    elig = np.asarray(eligible, dtype=bool)
    if elig.shape != (n,):
        raise ContractError(f"eligible array shape {elig.shape} != ({n},)")
    kind, span = parse_strategy(strategy)
    k = round_half_up(ratio * int(elig.sum()))
    if k == 0:
        positions = np.empty(0, dtype=np.int64)
    else:
        rng = SplitMix64(seed)
        if kind == "random":
            chosen = partial_fisher_yates(list(np.flatnonzero(elig)), k, rng)
            positions = np.sort(np.asarray(chosen, dtype=np.int64))
        else:
            positions = _place_spans(n, elig, k, span, rng).astype(np.int64)
    return MaskPlan(length=n, strategy=strategy, ratio=ratio, seed=seed,
                    positions=positions)


@dataclass
class CorruptedBatch:
    """One packed training example, shift-by-one convention (see module doc)."""

    input_ids: np.ndarray
    target_ids: np.ndarray
    loss_mask: np.ndarray
    mask_positions: np.ndarray
    segment_map: np.ndarray | None
    eligible_count: int = 0

    @property
    def length(self) -> int:
        return int(self.input_ids.shape[0])

    def loss_token_positions(self) -> set[int]:
        """Token indices whose prediction is scored (row index + 1)."""
        return {int(i) + 1 for i in np.flatnonzero(self.loss_mask)}


def _check_raw(x: np.ndarray, what: str) -> None:
    if (x == MASK).any():
        j = int(np.flatnonzero(x == MASK)[0])
        raise ContaminationError(f"{what} already contains MASK at position {j}")


def _shift_targets(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = x.shape[0]
    targets = np.empty(n, dtype=x.dtype)
    targets[:-1] = x[1:]
    targets[-1] = PAD
    loss = np.ones(n, dtype=bool)
    loss[-1] = False
    return targets, loss


def ntp_batch(x) -> CorruptedBatch:
    """Plain next-token batch: no corruption, loss everywhere but the end."""
    seq = np.asarray(x, dtype=np.int64)
    if seq.shape[0] < 2:
        raise LengthError(f"sequence of length {seq.shape[0]} has nothing to predict")
    _check_raw(seq, "sequence")
    targets, loss = _shift_targets(seq)
    return CorruptedBatch(
        input_ids=seq.copy(),
        target_ids=targets,
        loss_mask=loss,
        mask_positions=np.empty(0, dtype=np.int64),
        segment_map=np.full(seq.shape[0], SEG_PLAIN, dtype=np.int8),
        eligible_count=int((seq >= FIRST_ORDINARY).sum()),
    )


def corrupt_pretrain(x, ratio: float, strategy: str, seed: int) -> CorruptedBatch:
    """Masked-input next-token batch. Targets stay original everywhere."""
    seq = np.asarray(x, dtype=np.int64)
    if seq.shape[0] < 2:
        raise LengthError(f"sequence of length {seq.shape[0]} has nothing to predict")
    _check_raw(seq, "sequence")
    eligible = seq >= FIRST_ORDINARY
    plan = select_mask_positions(seq.shape[0], eligible, strategy, ratio, seed)
    inputs = seq.copy()
    inputs[plan.positions] = MASK
    targets, loss = _shift_targets(seq)
    return CorruptedBatch(
        input_ids=inputs,
        target_ids=targets,
        loss_mask=loss,
        mask_positions=plan.positions,
        segment_map=np.full(seq.shape[0], SEG_PLAIN, dtype=np.int8),
        eligible_count=int(eligible.sum()),
    )


def pack_finetune(prompt, answer, ratio: float, seed: int,
                  loss_scope: str = "union", max_context: int | None = None,
                  answer_gate: int = ANSWER_GATE) -> CorruptedBatch:
    """Duplicate-and-mask packing for one (prompt, answer) pair.

    Answers of at most ``answer_gate`` tokens get a plain next-token batch
    with loss on the answer only. Longer answers are packed as
    prompt|answer|prompt|answer with masks confined to the copied answer,
    positions continuous across the whole packed sequence.
    """
    p = np.asarray(prompt, dtype=np.int64)
    a = np.asarray(answer, dtype=np.int64)
    _check_raw(p, "prompt")
    _check_raw(a, "answer")
    if loss_scope not in ("union", "masked_only"):
        raise ConfigError(f"loss_scope {loss_scope!r} not in {{union, masked_only}}")
    if p.shape[0] == 0 or a.shape[0] == 0:
        raise LengthError("prompt and answer must both be nonempty")
    n_p, n_a = p.shape[0], a.shape[0]
    base = np.concatenate([p, a])

    if n_a <= answer_gate:
        t = n_p + n_a
        if max_context is not None and t > max_context:
            raise LengthError(f"packed length {t} exceeds max_context {max_context}")
        targets, loss = _shift_targets(base)
        segments = np.concatenate([
            np.full(n_p, SEG_PROMPT, dtype=np.int8),
            np.full(n_a, SEG_ANSWER, dtype=np.int8),
        ])
        answer_token = np.zeros(t, dtype=bool)
        answer_token[n_p:] = True
        loss &= np.roll(answer_token, -1)  # row i scores token i+1
        loss[-1] = False
        return CorruptedBatch(
            input_ids=base.copy(), target_ids=targets, loss_mask=loss,
            mask_positions=np.empty(0, dtype=np.int64), segment_map=segments,
            eligible_count=0,
        )

    full = np.concatenate([base, base])
    t = full.shape[0]
    if max_context is not None and t > max_context:
        raise LengthError(f"packed length {t} exceeds max_context {max_context}")
    dup_answer_lo = base.shape[0] + n_p
    eligible = np.zeros(t, dtype=bool)
    eligible[dup_answer_lo:] = full[dup_answer_lo:] >= FIRST_ORDINARY
    plan = select_mask_positions(t, eligible, "random", ratio, seed)

    inputs = full.copy()
    inputs[plan.positions] = MASK
    targets, loss = _shift_targets(full)
    segments = np.concatenate([
        np.full(n_p, SEG_PROMPT, dtype=np.int8),
        np.full(n_a, SEG_ANSWER, dtype=np.int8),
        np.full(n_p, SEG_DUP_PROMPT, dtype=np.int8),
        np.full(n_a, SEG_DUP_ANSWER, dtype=np.int8),
    ])

    scored = np.zeros(t, dtype=bool)  # token indices whose prediction is scored
    if loss_scope == "union":
        scored[n_p:n_p + n_a] = True
    scored[plan.positions] = True
    loss &= np.roll(scored, -1)
    loss[-1] = False
    return CorruptedBatch(
        input_ids=inputs, target_ids=targets, loss_mask=loss,
        mask_positions=plan.positions, segment_map=segments,
        eligible_count=int(eligible.sum()),
    )


@dataclass
class MaskingStats:
    n_batches: int
    total_positions: int
    masked_total: int
    eligible_total: int
    mask_fraction: float
    loss_density: float
    segment_mask_counts: dict[str, int]
    duplicated_batches: int
    duplication_rate: float


def batch_stats(batches: Iterable[CorruptedBatch]) -> MaskingStats:
    """Aggregate masking behaviour over a corpus of batches (audit helper)."""
    n = total = masked = eligible = loss_true = dup = 0
    seg_counts = {name: 0 for name in SEGMENT_NAMES}
    for b in batches:
        n += 1
        total += b.length
        masked += int(b.mask_positions.shape[0])
        eligible += int(b.eligible_count)
        loss_true += int(b.loss_mask.sum())
        if b.segment_map is not None:
            if (b.segment_map >= SEG_DUP_PROMPT).any():
                dup += 1
            for pos in b.mask_positions:
                seg_counts[SEGMENT_NAMES[int(b.segment_map[int(pos)])]] += 1
    if n == 0:
        raise ContractError("batch_stats: no batches")
    return MaskingStats(
        n_batches=n,
        total_positions=total,
        masked_total=masked,
        eligible_total=eligible,
        mask_fraction=(masked / eligible) if eligible else 0.0,
        loss_density=loss_true / total,
        segment_mask_counts=seg_counts,
        duplicated_batches=dup,
        duplication_rate=dup / n,
    )


# ---------------------------------------------------------------------------
# audit dump: MEAPBAT1, little-endian, ids as u32, loss mask as LSB-first bits


def write_batch_dump(path, batches: Sequence[CorruptedBatch]) -> None:
    with open(path, "wb") as f:
        f.write(BATCH_MAGIC)
        f.write(struct.pack("<Q", len(batches)))
        for b in batches:
            t = b.length
            f.write(struct.pack("<I", t))
            f.write(b.input_ids.astype("<u4").tobytes())
            f.write(b.target_ids.astype("<u4").tobytes())
            f.write(np.packbits(b.loss_mask, bitorder="little").tobytes())
            f.write(struct.pack("<I", b.mask_positions.shape[0]))
            f.write(b.mask_positions.astype("<u4").tobytes())


def _read_exact(f: BinaryIO, n: int, offset: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise LengthError(f"batch dump truncated at offset {offset}: "
                          f"wanted {n} bytes, got {len(buf)}")
    return buf


def read_batch_dump(path) -> list[CorruptedBatch]:
    """Inverse of write_batch_dump. Segment maps are not stored; they come
    back as None and eligible_count as 0."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != BATCH_MAGIC:
            raise FormatError(f"bad batch dump magic {magic!r}")
        offset = 8
        (count,) = struct.unpack("<Q", _read_exact(f, 8, offset))
        offset += 8
        out = []
        for _ in range(count):
            (t,) = struct.unpack("<I", _read_exact(f, 4, offset))
            offset += 4
            inputs = np.frombuffer(_read_exact(f, 4 * t, offset), dtype="<u4").astype(np.int64)
            offset += 4 * t
            targets = np.frombuffer(_read_exact(f, 4 * t, offset), dtype="<u4").astype(np.int64)
            offset += 4 * t
            nbytes = (t + 7) // 8
            bits = np.frombuffer(_read_exact(f, nbytes, offset), dtype=np.uint8)
            offset += nbytes
            loss = np.unpackbits(bits, bitorder="little")[:t].astype(bool)
            (nm,) = struct.unpack("<I", _read_exact(f, 4, offset))
            offset += 4
            positions = np.frombuffer(_read_exact(f, 4 * nm, offset), dtype="<u4").astype(np.int64)
            offset += 4 * nm
            out.append(CorruptedBatch(
                input_ids=inputs, target_ids=targets, loss_mask=loss,
                mask_positions=positions, segment_map=None))
        return out
