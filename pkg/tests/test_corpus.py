import shutil
import subprocess

import numpy as np
import pytest

from spalm.corpus import (
    SOS_ID,
    Vocabulary,
    build_vocab,
    corpus_from_docs,
    detokenize,
    lane_streams,
    load_corpus,
    segment_stream,
    split_token_count,
    tokenize,
)


def test_char_vocab_covers_all_bytes():
    vocab = build_vocab(b"hello", "char")
    assert vocab.size == 257  # <s> plus every byte value
    assert vocab.id_to_token[0] == "<s>"
    content = [t for t in vocab.id_to_token[1:]]
    assert len(content) == 256


def test_word_vocab_min_count():
    vocab = build_vocab("a a b", "word", min_count=2)
    assert "a" in vocab.token_to_id
    assert "b" not in vocab.token_to_id
    assert vocab.counts[vocab.token_to_id["<unk>"]] == 1


def test_vocab_determinism():
    text = "the cat sat on the mat the end"
    v1 = build_vocab(text, "word")
    v2 = build_vocab(text, "word")
    assert v1.id_to_token == v2.id_to_token


def test_vocab_empty_input_errors():
    with pytest.raises(ValueError):
        build_vocab("", "word")
    with pytest.raises(ValueError):
        build_vocab(b"", "char")


def test_char_round_trip_arbitrary_bytes():
    vocab = build_vocab(b"\x00\x01seed", "char")
    rng = np.random.default_rng(0)
    for _ in range(10):
        data = bytes(rng.integers(0, 256, size=50, dtype=np.uint8))
        ids = tokenize(data, vocab)
        assert detokenize(ids, vocab) == data


def test_word_round_trip_and_unknown_marker():
    vocab = build_vocab("hello world hello", "word", min_count=2)
    ids = tokenize("hello world", vocab)
    assert len(ids) == 2
    assert detokenize(ids, vocab) == "hello <unk>"
    ids2 = tokenize("hello mystery", vocab)
    assert detokenize(ids2, vocab) == "hello <unk>"


def test_detokenize_rejects_out_of_range():
    vocab = build_vocab("a b", "word")
    with pytest.raises(ValueError):
        detokenize(np.array([vocab.size]), vocab)


def test_vocab_save_load_round_trip(tmp_path):
    for level, text in (("word", "alpha beta beta gamma"), ("char", b"abc\x00")):
        vocab = build_vocab(text, level)
        path = str(tmp_path / f"vocab_{level}.txt")
        vocab.save(path)
        loaded = Vocabulary.load(path)
        assert loaded.level == vocab.level
        assert loaded.id_to_token == vocab.id_to_token
        assert loaded.counts == vocab.counts


def test_corpus_stream_structure():
    docs = [np.array([5, 6, 7]), np.array([8, 9])]
    corpus = corpus_from_docs(docs, "word")
    assert list(corpus.ids) == [SOS_ID, 5, 6, 7, SOS_ID, 8, 9]
    assert list(corpus.doc_offsets) == [0, 4]
    assert corpus.doc_bounds(0) == (0, 4)
    assert corpus.doc_bounds(1) == (4, 7)


def test_segment_stream_sizes():
    corpus = corpus_from_docs([np.arange(1, 10)], "word")  # stream length 10
    segs = list(segment_stream(corpus, 4, lanes=1))
    assert len(segs) == 3
    assert [int(s.mask.sum()) for s in segs] == [4, 4, 1]  # last position has no target
    assert segs[0].fresh_lane and not segs[1].fresh_lane


def test_segment_stream_concatenation_reproduces_lane():
    rng = np.random.default_rng(1)
    docs = [rng.integers(1, 50, size=n) for n in (13, 7, 22)]
    corpus = corpus_from_docs(docs, "word")
    for lanes in (1, 2):
        streams = lane_streams(corpus, lanes)
        segs = {}
        for seg in segment_stream(corpus, 5, lanes=lanes):
            segs.setdefault(seg.lane, []).append(seg)
        for lane, (ids, pos) in enumerate(streams):
            got = np.concatenate([s.inputs for s in segs[lane]])[: ids.size]
            assert np.array_equal(got, ids)
            gotpos = np.concatenate([s.positions for s in segs[lane]])[: ids.size]
            assert np.array_equal(gotpos, pos)


def test_lanes_partition_documents():
    docs = [np.arange(1, 4) for _ in range(5)]
    corpus = corpus_from_docs(docs, "word")
    streams = lane_streams(corpus, 2)
    seen = np.concatenate([pos for _, pos in streams])
    assert sorted(seen.tolist()) == list(range(len(corpus)))


def test_segment_targets_shift_by_one():
    corpus = corpus_from_docs([np.array([3, 4, 5, 6])], "word")
    segs = list(segment_stream(corpus, 3, lanes=1))
    stream = corpus.ids
    flat_in = np.concatenate([s.inputs for s in segs])
    flat_tgt = np.concatenate([s.targets for s in segs])
    flat_mask = np.concatenate([s.mask for s in segs])
    for i in range(len(stream) - 1):
        assert flat_in[i] == stream[i]
        assert flat_mask[i] == 1.0
        assert flat_tgt[i] == stream[i + 1]
    assert flat_mask[len(stream) - 1 :].sum() == 0


def test_coverage_every_token_once_per_epoch():
    rng = np.random.default_rng(2)
    docs = [rng.integers(1, 30, size=rng.integers(5, 20)) for _ in range(7)]
    corpus = corpus_from_docs(docs, "word")
    counts = np.zeros(len(corpus))
    for seg in segment_stream(corpus, 6, lanes=3):
        for p in seg.positions:
            if p >= 0:
                counts[p] += 1
    assert np.all(counts == 1)


def test_load_corpus_word_per_line(tmp_path):
    path = tmp_path / "split.txt"
    path.write_text("a b c\nd e\n\n")
    vocab = build_vocab(path.read_text(), "word")
    corpus = load_corpus(str(path), vocab)
    assert corpus.num_docs == 2
    assert len(corpus) == 7  # 2 sos + 5 words


def test_load_corpus_char_single_doc(tmp_path):
    path = tmp_path / "split.bin"
    path.write_bytes(b"hello\nworld")
    vocab = build_vocab(b"seed", "char")
    corpus = load_corpus(str(path), vocab)
    assert corpus.num_docs == 1
    assert len(corpus) == 12  # sos + 11 bytes


def test_split_statistics_match_wc(tmp_path):
    path = tmp_path / "split.txt"
    path.write_text("one two three\nfour five\n")
    assert split_token_count(str(path), "word") == 5
    assert split_token_count(str(path), "char") == len(path.read_bytes())
    if shutil.which("wc"):
        out = subprocess.run(["wc", "-w", str(path)], capture_output=True, text=True)
        assert int(out.stdout.split()[0]) == 5
        out_c = subprocess.run(["wc", "-c", str(path)], capture_output=True, text=True)
        assert int(out_c.stdout.split()[0]) == split_token_count(str(path), "char")
