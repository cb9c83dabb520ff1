import numpy as np
import pytest

from meaplab.corruption import BOS, EOS, MASK, PAD
from meaplab.data import (
    BYTE_VOCAB,
    FILLER_SENTENCES,
    Corpus,
    MultiDocTask,
    NeedleTask,
    byte_tokens,
    count_token_run,
    detokenize_bytes,
    filler_stream,
    gen_filler_sequence,
    gen_mixed_corpus,
    gen_multidoc,
    gen_needle,
    gen_training_sequence,
    make_multidoc_task,
    make_qa_corpus,
    query_bytes,
    read_corpus,
    tokenize_bytes,
    write_corpus,
)
from meaplab.errors import ConfigError, FormatError, GenerationError, LengthError
from meaplab.rng import SplitMix64, mix_seed


def test_tokenize_empty():
    assert tokenize_bytes(b"").tolist() == [BOS, EOS]


def test_tokenize_offset():
    assert tokenize_bytes(b"\x00").tolist() == [BOS, 4, EOS]
    assert BYTE_VOCAB.size == 260


def test_round_trip_random_byte_strings(rng):
    for _ in range(1000):
        n = int(rng.integers(0, 64))
        blob = rng.integers(0, 256, size=n).astype(np.uint8).tobytes()
        assert detokenize_bytes(tokenize_bytes(blob)) == blob


def test_tokenizer_never_emits_mask(rng):
    blob = rng.integers(0, 256, size=4096).astype(np.uint8).tobytes()
    ids = tokenize_bytes(blob)
    assert not np.isin([PAD, MASK], ids[1:-1]).any()
    assert (ids[1:-1] >= 4).all()


# corpus io -------------------------------------------------------------------


def test_corpus_round_trip(tmp_path, rng):
    seqs = [rng.integers(0, 260, size=int(rng.integers(1, 50))).astype(np.int64)
            for _ in range(17)]
    corpus = Corpus(vocab_size=260, sequences=seqs, note="test")
    path = tmp_path / "corpus.bin"
    write_corpus(path, corpus)
    back = read_corpus(path)
    assert back.vocab_size == 260
    assert len(back.sequences) == 17
    for a, b in zip(seqs, back.sequences):
        assert np.array_equal(a, b)
    # byte-for-byte stable on rewrite
    blob = path.read_bytes()
    write_corpus(path, back)
    assert path.read_bytes() == blob


def test_empty_corpus_is_header_only(tmp_path):
    path = tmp_path / "empty.bin"
    write_corpus(path, Corpus(260, [], ""))
    assert path.stat().st_size == 8 + 4 + 4 + 8


def test_corpus_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"WRONG!!!" + b"\x00" * 24)
    with pytest.raises(FormatError):
        read_corpus(path)


def test_corpus_truncation_names_offset(tmp_path):
    path = tmp_path / "t.bin"
    write_corpus(path, Corpus(260, [np.arange(10, dtype=np.int64)], ""))
    blob = path.read_bytes()
    path.write_bytes(blob[:28])  # cut inside the sequence payload
    with pytest.raises(LengthError, match="offset"):
        read_corpus(path)


# filler ----------------------------------------------------------------------


def test_filler_pool_is_64_clean_sentences():
    assert len(FILLER_SENTENCES) == 64
    assert len(set(FILLER_SENTENCES)) == 64
    for s in FILLER_SENTENCES:
        text = s.decode("ascii")
        assert text == text.lower()
        assert not any(c.isdigit() for c in text)
        assert not any(c in "#?=" for c in text)


def test_filler_stream_exact_length_and_determinism():
    a = filler_stream(SplitMix64(5), 333)
    b = filler_stream(SplitMix64(5), 333)
    assert len(a) == 333 and a == b


# needle ----------------------------------------------------------------------


def test_needle_depth_zero_starts_after_bos():
    task = NeedleTask(context_length=64, depth_fraction=0.0, key=b"QQ", value=b"1234")
    prompt, gold = gen_needle(task, 9)
    needle = byte_tokens(b"#QQ=1234#")
    assert prompt.shape[0] == 64
    assert prompt[0] == BOS
    assert np.array_equal(prompt[1:1 + needle.shape[0]], needle)
    assert np.array_equal(gold, byte_tokens(b"1234"))


def test_needle_depth_one_ends_at_query():
    task = NeedleTask(context_length=64, depth_fraction=1.0, key=b"QQ", value=b"1234")
    prompt, _ = gen_needle(task, 9)
    query = byte_tokens(query_bytes(b"QQ"))
    needle = byte_tokens(b"#QQ=1234#")
    q_start = 64 - query.shape[0]
    assert np.array_equal(prompt[q_start:], query)
    assert np.array_equal(prompt[q_start - needle.shape[0]:q_start], needle)


def test_needle_depth_placement_within_one_token():
    for depth in (0.1, 0.33, 0.5, 0.77):
        task = NeedleTask(context_length=200, depth_fraction=depth,
                          key=b"AB", value=b"5678")
        prompt, _ = gen_needle(task, 3)
        needle = byte_tokens(b"#AB=5678#")
        starts = [i for i in range(prompt.shape[0] - needle.shape[0] + 1)
                  if np.array_equal(prompt[i:i + needle.shape[0]], needle)]
        assert len(starts) == 1
        query_len = len(query_bytes(b"AB"))
        slack = 200 - 1 - query_len - needle.shape[0]
        assert abs((starts[0] - 1) - depth * slack) <= 1.0


def test_needle_value_unique_over_1000_samples():
    for i in range(1000):
        rng = SplitMix64(mix_seed(4, i))
        depth = rng.next_below(1001) / 1000.0
        key = bytes([65 + rng.next_below(26), 65 + rng.next_below(26)])
        value = bytes([48 + rng.next_below(10) for _ in range(4)])
        task = NeedleTask(context_length=96, depth_fraction=depth,
                          key=key, value=value)
        prompt, gold = gen_needle(task, mix_seed(4, i, 1))
        assert count_token_run(prompt, gold) == 1
        assert prompt.shape[0] == 96


def test_needle_determinism():
    task = NeedleTask(context_length=80, depth_fraction=0.4, key=b"ZZ", value=b"0001")
    a, _ = gen_needle(task, 77)
    b, _ = gen_needle(task, 77)
    c, _ = gen_needle(task, 78)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_needle_too_long_rejected():
    task = NeedleTask(context_length=12, depth_fraction=0.5,
                      key=b"LONGKEY", value=b"123456789")
    with pytest.raises(ConfigError):
        gen_needle(task, 0)


# multidoc --------------------------------------------------------------------


def test_multidoc_order_permutation():
    docs = ((b"AA", b"1111"), (b"BB", b"2222"))
    p1, _ = gen_multidoc(MultiDocTask(docs=docs, gold_position=1), 0)
    p2, _ = gen_multidoc(MultiDocTask(docs=docs[::-1], gold_position=2), 0)
    assert sorted(p1.tolist()) == sorted(p2.tolist())
    assert not np.array_equal(p1, p2)


def test_multidoc_gold_payload_unique(rng):
    for i in range(200):
        task = make_multidoc_task(5, 1 + int(rng.integers(5)), SplitMix64(i))
        prompt, gold = gen_multidoc(task, i)
        assert count_token_run(prompt, gold) == 1


def test_multidoc_duplicate_keys_rejected():
    docs = ((b"AA", b"1111"), (b"AA", b"2222"))
    with pytest.raises(GenerationError):
        gen_multidoc(MultiDocTask(docs=docs, gold_position=1), 0)


def test_multidoc_distractor_payload_collision_rejected():
    docs = ((b"AA", b"1111"), (b"BB", b"1111"))
    with pytest.raises(GenerationError):
        gen_multidoc(MultiDocTask(docs=docs, gold_position=1), 0)


def test_multidoc_k20_paper_shape():
    task = make_multidoc_task(20, 15, SplitMix64(3))
    assert task.k == 20
    prompt, gold = gen_multidoc(task, 1)
    assert count_token_run(prompt, gold) == 1


def test_multidoc_bad_gold_position():
    docs = ((b"AA", b"1111"), (b"BB", b"2222"))
    with pytest.raises(GenerationError):
        gen_multidoc(MultiDocTask(docs=docs, gold_position=3), 0)


# training corpora ------------------------------------------------------------


def test_training_sequence_shape_and_answer():
    seq = gen_training_sequence(5, 128, n_facts=2)
    assert seq.shape[0] == 128
    assert seq[0] == BOS and seq[-1] == EOS
    text = detokenize_bytes(seq)
    q = text.rindex(b"?")
    key = text[q + 1:text.index(b"=", q)]
    value = text[text.index(b"=", q) + 1:]
    assert b"#" + key + b"=" + value + b"#" in text


def test_filler_sequence_exact_length():
    seq = gen_filler_sequence(3, 77)
    assert seq.shape[0] == 77
    assert seq[0] == BOS and seq[-1] == EOS


def test_mixed_corpus_determinism_and_vocab():
    a = gen_mixed_corpus(40, 96, seed=9)
    b = gen_mixed_corpus(40, 96, seed=9)
    assert len(a.sequences) == 40
    for x, y in zip(a.sequences, b.sequences):
        assert np.array_equal(x, y)
        assert x.max() < BYTE_VOCAB.size
        assert not np.isin(MASK, x)


def test_qa_corpus_pairs(tmp_path):
    corpus = make_qa_corpus(6, prompt_len=48, answer_len=12, seed=2)
    assert len(corpus.sequences) == 12
    for i in range(6):
        prompt, answer = corpus.sequences[2 * i], corpus.sequences[2 * i + 1]
        assert prompt[0] == BOS
        assert answer[-1] == EOS
        assert abs(answer.shape[0] - 12) <= 1
