"""Byte tokenizer, binary corpus files, and synthetic retrieval tasks.

The retrieval tasks are built from a tiny byte-level grammar:

    fact      #KEY=VALUE#
    query     ?KEY=

Keys are uppercase letters and values are digits, while the filler pool is
lowercase prose, so a value run can never occur in filler by accident. A
needle prompt is filler with one fact planted at a controlled depth plus a
trailing query; a multi-document prompt is k facts (one gold, k-1
distractors) plus a query for the gold key. Training corpora mix plain
filler sequences with fact sequences that end in query+answer, which is
what teaches a model to resolve the queries at evaluation time.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .corruption import BOS, EOS, FIRST_ORDINARY, Vocabulary
from .errors import ConfigError, FormatError, GenerationError, LengthError
from .rng import SplitMix64, mix_seed, partial_fisher_yates, round_half_up

BYTE_VOCAB = Vocabulary(260)  # 4 specials + 256 byte values

CORPUS_MAGIC = b"MEAPTOK1"
CORPUS_VERSION = 1

DEFAULT_KEY_ALPHABET = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ"
DEFAULT_VALUE_ALPHABET = b"0123456789"
DEFAULT_KEY_LEN = 3
DEFAULT_VALUE_LEN = 4

# 64 fixed filler sentences (4 subjects x 4 verbs x 4 endings).
_SUBJECTS = ["the river", "a quiet wind", "an old lantern", "the grey harbor"]
_VERBS = ["drifts past", "settles over", "circles around", "leans toward"]
_ENDINGS = ["the low stone wall. ", "a field of barley. ",
            "the sleeping town. ", "an empty pier. "]
FILLER_SENTENCES: list[bytes] = [
    f"{s} {v} {e}".encode("ascii")
    for s, v, e in itertools.product(_SUBJECTS, _VERBS, _ENDINGS)
]


def tokenize_bytes(text: bytes) -> np.ndarray:
    """BOS + (byte + 4 per byte) + EOS."""
    ids = np.empty(len(text) + 2, dtype=np.int64)
    ids[0] = BOS
    if text:
        ids[1:-1] = np.frombuffer(text, dtype=np.uint8).astype(np.int64) + FIRST_ORDINARY
    ids[-1] = EOS
    return ids


def detokenize_bytes(ids) -> bytes:
    """Inverse of tokenize_bytes; special tokens are dropped."""
    arr = np.asarray(ids, dtype=np.int64)
    ordinary = arr[arr >= FIRST_ORDINARY] - FIRST_ORDINARY
    if ordinary.size and ordinary.max() > 255:
        raise ConfigError("token ids above the byte range cannot detokenize")
    return ordinary.astype(np.uint8).tobytes()


def byte_tokens(text: bytes) -> np.ndarray:
    """Raw byte tokens without BOS/EOS (for building prompts piecewise)."""
    return np.frombuffer(text, dtype=np.uint8).astype(np.int64) + FIRST_ORDINARY


@dataclass
class Corpus:
    vocab_size: int
    sequences: list[np.ndarray]
    note: str = ""


def write_corpus(path, corpus: Corpus) -> None:
    with open(path, "wb") as f:
        f.write(CORPUS_MAGIC)
        f.write(struct.pack("<II", CORPUS_VERSION, corpus.vocab_size))
        f.write(struct.pack("<Q", len(corpus.sequences)))
        for seq in corpus.sequences:
            f.write(struct.pack("<I", seq.shape[0]))
            f.write(np.asarray(seq).astype("<u4").tobytes())


def _read_exact(f: BinaryIO, n: int, offset: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise LengthError(f"corpus truncated at offset {offset}: "
                          f"wanted {n} bytes, got {len(buf)}")
    return buf


def read_corpus(path) -> Corpus:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CORPUS_MAGIC:
            raise FormatError(f"bad corpus magic {magic!r}")
        offset = 8
        version, vocab_size = struct.unpack("<II", _read_exact(f, 8, offset))
        offset += 8
        if version != CORPUS_VERSION:
            raise FormatError(f"unsupported corpus version {version}")
        (count,) = struct.unpack("<Q", _read_exact(f, 8, offset))
        offset += 8
        sequences = []
        for _ in range(count):
            (n,) = struct.unpack("<I", _read_exact(f, 4, offset))
            offset += 4
            ids = np.frombuffer(_read_exact(f, 4 * n, offset), dtype="<u4")
            offset += 4 * n
            sequences.append(ids.astype(np.int64))
    return Corpus(vocab_size=vocab_size, sequences=sequences, note="")


# ---------------------------------------------------------------------------
# fact grammar


def fact_bytes(key: bytes, value: bytes) -> bytes:
    return b"#" + key + b"=" + value + b"#"


def query_bytes(key: bytes) -> bytes:
    return b"?" + key + b"="


def random_word(rng: SplitMix64, alphabet: bytes, length: int) -> bytes:
    return bytes(alphabet[rng.next_below(len(alphabet))] for _ in range(length))


def random_fact(rng: SplitMix64,
                key_alphabet: bytes = DEFAULT_KEY_ALPHABET,
                value_alphabet: bytes = DEFAULT_VALUE_ALPHABET,
                key_len: int = DEFAULT_KEY_LEN,
                value_len: int = DEFAULT_VALUE_LEN) -> tuple[bytes, bytes]:
    return (random_word(rng, key_alphabet, key_len),
            random_word(rng, value_alphabet, value_len))


def filler_stream(rng: SplitMix64, n_bytes: int) -> bytes:
    parts: list[bytes] = []
    have = 0
    while have < n_bytes:
        s = FILLER_SENTENCES[rng.next_below(len(FILLER_SENTENCES))]
        parts.append(s)
        have += len(s)
    return b"".join(parts)[:n_bytes]


def count_token_run(haystack, run) -> int:
    """Occurrences of `run` as a contiguous subsequence of `haystack`."""
    hay = np.asarray(haystack)
    sub = np.asarray(run)
    n, m = hay.shape[0], sub.shape[0]
    if m == 0 or m > n:
        return 0
    windows = np.lib.stride_tricks.sliding_window_view(hay, m)
    return int((windows == sub).all(axis=1).sum())


# ---------------------------------------------------------------------------
# needle in a haystack


@dataclass(frozen=True)
class NeedleTask:
    context_length: int          # prompt length in tokens, query included
    depth_fraction: float        # 0 = needle first, 1 = needle at the query
    key: bytes
    value: bytes

    def __post_init__(self):
        if not (0.0 <= self.depth_fraction <= 1.0):
            raise ConfigError(f"depth fraction {self.depth_fraction} outside [0, 1]")


def gen_needle(task: NeedleTask, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Build (prompt ids, gold value ids) for one needle placement.

    Prompt = BOS + filler/needle body + query, exactly context_length
    tokens. The needle starts at 1 + round_half_up(depth * slack) where
    slack is the body room left after the needle itself.
    """
    query = query_bytes(task.key)
    needle = fact_bytes(task.key, task.value)
    body_len = task.context_length - 1 - len(query)
    slack = body_len - len(needle)
    if slack < 0:
        raise ConfigError(
            f"needle of {len(needle)} bytes does not fit a body of {body_len}")
    start = round_half_up(task.depth_fraction * slack)
    rng = SplitMix64(seed)
    filler = filler_stream(rng, slack)
    body = filler[:start] + needle + filler[start:]
    prompt = np.concatenate([np.array([BOS], dtype=np.int64),
                             byte_tokens(body + query)])
    return prompt, byte_tokens(task.value)


# ---------------------------------------------------------------------------
# multi-document QA


@dataclass(frozen=True)
class MultiDocTask:
    docs: tuple[tuple[bytes, bytes], ...]  # (doc key, payload) per document
    gold_position: int                     # 1-based

    @property
    def k(self) -> int:
        return len(self.docs)


def gen_multidoc(task: MultiDocTask, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Build (prompt ids, gold payload ids): k separator-joined documents
    plus a query for the gold document's key."""
    if task.k < 2:
        raise GenerationError(f"need at least 2 documents, got {task.k}")
    if not (1 <= task.gold_position <= task.k):
        raise GenerationError(
            f"gold position {task.gold_position} outside 1..{task.k}")
    keys = [d[0] for d in task.docs]
    if len(set(keys)) != task.k:
        raise GenerationError("duplicate document keys")
    gold_key, gold_payload = task.docs[task.gold_position - 1]
    for i, (_, payload) in enumerate(task.docs):
        if i != task.gold_position - 1 and payload == gold_payload:
            raise GenerationError("distractor payload equals the gold payload")
    body = b" ".join(fact_bytes(k, v) for k, v in task.docs)
    prompt = np.concatenate([np.array([BOS], dtype=np.int64),
                             byte_tokens(body + b" " + query_bytes(gold_key))])
    return prompt, byte_tokens(gold_payload)


def make_multidoc_task(k: int, gold_position: int, rng: SplitMix64,
                       key_alphabet: bytes = DEFAULT_KEY_ALPHABET,
                       value_alphabet: bytes = DEFAULT_VALUE_ALPHABET,
                       key_len: int = DEFAULT_KEY_LEN,
                       value_len: int = DEFAULT_VALUE_LEN) -> MultiDocTask:
    """Draw k distinct documents with disjoint payloads."""
    keys: list[bytes] = []
    payloads: list[bytes] = []
    while len(keys) < k:
        key, value = random_fact(rng, key_alphabet, value_alphabet,
                                 key_len, value_len)
        if key in keys or value in payloads:
            continue
        keys.append(key)
        payloads.append(value)
    return MultiDocTask(docs=tuple(zip(keys, payloads)),
                        gold_position=gold_position)


# ---------------------------------------------------------------------------
# training corpora


def gen_training_sequence(seed: int, seq_len: int, n_facts: int = 1,
                          fact_copies: int = 2,
                          key_alphabet: bytes = DEFAULT_KEY_ALPHABET,
                          value_alphabet: bytes = DEFAULT_VALUE_ALPHABET,
                          key_len: int = DEFAULT_KEY_LEN,
                          value_len: int = DEFAULT_VALUE_LEN) -> np.ndarray:
    """One supervised retrieval sequence of exactly seq_len tokens:
    BOS + filler with planted facts + query + answer + EOS.

    The queried fact is planted fact_copies times (redundancy keeps the
    answer recoverable when a masking objective corrupts one copy, the way
    natural text usually restates key facts); distractors appear once.
    """
    rng = SplitMix64(seed)
    facts: list[tuple[bytes, bytes]] = []
    keys: set[bytes] = set()
    values: set[bytes] = set()
    while len(facts) < n_facts:
        key, value = random_fact(rng, key_alphabet, value_alphabet,
                                 key_len, value_len)
        if key in keys or value in values:
            continue
        keys.add(key)
        values.add(value)
        facts.append((key, value))
    q_key, q_value = facts[rng.next_below(n_facts)]
    tail = query_bytes(q_key) + q_value
    fact_blobs = [fact_bytes(k, v) for k, v in facts]
    fact_blobs += [fact_bytes(q_key, q_value)] * (fact_copies - 1)
    order = partial_fisher_yates(list(range(len(fact_blobs))),
                                 len(fact_blobs), rng)
    fact_blobs = [fact_blobs[i] for i in order]
    body_len = seq_len - 2 - len(tail)
    filler_len = body_len - sum(len(b) for b in fact_blobs)
    if filler_len < 0:
        raise GenerationError(
            f"seq_len {seq_len} too short for {n_facts} facts plus the query")
    cuts = sorted(rng.next_below(filler_len + 1) for _ in range(len(fact_blobs)))
    filler = filler_stream(rng, filler_len)
    pieces: list[bytes] = []
    prev = 0
    for cut, blob in zip(cuts, fact_blobs):
        pieces.append(filler[prev:cut])
        pieces.append(blob)
        prev = cut
    pieces.append(filler[prev:])
    return tokenize_bytes(b"".join(pieces) + tail)


def gen_filler_sequence(seed: int, seq_len: int) -> np.ndarray:
    """BOS + plain filler + EOS, exactly seq_len tokens."""
    return tokenize_bytes(filler_stream(SplitMix64(seed), seq_len - 2))


def gen_episode_sequence(seed: int, seq_len: int, requery_fraction: float = 0.35,
                         max_gap: int = 24, fact_copies: int = 2,
                         key_alphabet: bytes = DEFAULT_KEY_ALPHABET,
                         value_alphabet: bytes = DEFAULT_VALUE_ALPHABET,
                         key_len: int = DEFAULT_KEY_LEN,
                         value_len: int = DEFAULT_VALUE_LEN) -> np.ndarray:
    """Dense retrieval practice: many fact/query episodes in one sequence.

    Each episode plants a fact (fact_copies times, separated by filler, so
    one masked copy still leaves the answer recoverable), then after a gap
    queries either that fact or (with requery_fraction) one planted earlier
    in the sequence, so the lookup distance ranges from a few tokens to the
    whole context.
    """
    rng = SplitMix64(seed)
    parts: list[bytes] = []
    known: list[tuple[bytes, bytes]] = []
    used_keys: set[bytes] = set()
    key_space = len(key_alphabet) ** key_len
    room = seq_len - 2
    while len(used_keys) < key_space:
        key, value = random_fact(rng, key_alphabet, value_alphabet,
                                 key_len, value_len)
        if key in used_keys:
            continue
        fact = fact_bytes(key, value)
        blob = fact
        for _ in range(fact_copies - 1):
            blob += filler_stream(rng, rng.next_below(max_gap // 2 + 1)) + fact
        gap = rng.next_below(max_gap + 1)
        if known and rng.next_below(1000) < round_half_up(requery_fraction * 1000):
            q_key, q_value = known[rng.next_below(len(known))]
        else:
            q_key, q_value = key, value
        episode = blob + filler_stream(rng, gap) + query_bytes(q_key) + q_value + b" "
        if len(episode) > room:
            break
        parts.append(episode)
        used_keys.add(key)
        known.append((key, value))
        room -= len(episode)
    parts.append(filler_stream(rng, room))
    return tokenize_bytes(b"".join(parts))


def gen_mixed_corpus(n_sequences: int, seq_len: int, seed: int,
                     filler_fraction: float = 0.10,
                     episode_fraction: float = 0.60,
                     max_facts: int = 3, **fact_kwargs) -> Corpus:
    """Training mixture: episode sequences (dense retrieval practice),
    needle-style sequences (one query at the end, matching the evaluation
    layout), and plain filler."""
    if seq_len < 32:
        raise ConfigError(f"seq_len {seq_len} too short for the task grammar")
    key_len = fact_kwargs.get("key_len", DEFAULT_KEY_LEN)
    value_len = fact_kwargs.get("value_len", DEFAULT_VALUE_LEN)
    copies = fact_kwargs.get("fact_copies", 2)
    fact_len = 3 + key_len + value_len
    tail_len = 2 + key_len + value_len
    room = seq_len - 2 - tail_len - (copies - 1) * fact_len
    feasible = max(1, min(max_facts, room // fact_len))
    sequences = []
    filler_cut = round_half_up(filler_fraction * 1000)
    episode_cut = filler_cut + round_half_up(episode_fraction * 1000)
    for i in range(n_sequences):
        child = mix_seed(seed, i)
        rng = SplitMix64(child)
        draw = rng.next_below(1000)
        if draw < filler_cut:
            seq = gen_filler_sequence(mix_seed(child, 2), seq_len)
        elif draw < episode_cut:
            seq = gen_episode_sequence(mix_seed(child, 3), seq_len, **fact_kwargs)
        else:
            n_facts = 1 + rng.next_below(feasible)
            seq = gen_training_sequence(mix_seed(child, 1), seq_len,
                                        n_facts=n_facts, **fact_kwargs)
        sequences.append(seq)
    note = (f"mixed retrieval corpus: n={n_sequences} seq_len={seq_len} "
            f"seed={seed} filler={filler_fraction} episodes={episode_fraction}")
    return Corpus(vocab_size=BYTE_VOCAB.size, sequences=sequences, note=note)


def make_qa_corpus(n_pairs: int, prompt_len: int, answer_len: int, seed: int,
                   **fact_kwargs) -> Corpus:
    """Fine-tuning corpus stored as alternating prompt/answer sequences.

    The prompt is a needle-style context plus query (BOS-prefixed); the
    answer is the value followed by filler chatter and EOS so that answer
    lengths can exceed the duplication gate.
    """
    sequences = []
    for i in range(n_pairs):
        child = mix_seed(seed, 7, i)
        rng = SplitMix64(child)
        key, value = random_fact(rng, **fact_kwargs)
        depth = rng.next_below(1001) / 1000.0
        task = NeedleTask(context_length=prompt_len, depth_fraction=depth,
                          key=key, value=value)
        prompt, gold = gen_needle(task, mix_seed(child, 1))
        pad = filler_stream(rng, max(0, answer_len - len(value) - 2))
        answer = np.concatenate([gold, byte_tokens(b" " + pad),
                                 np.array([EOS], dtype=np.int64)])
        sequences.append(prompt)
        sequences.append(answer)
    return Corpus(vocab_size=BYTE_VOCAB.size, sequences=sequences,
                  note=f"qa corpus: pairs={n_pairs} seed={seed}")
