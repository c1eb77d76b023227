"""Text ingestion: vocabularies, tokenization and deterministic segment streams.

Two levels are supported. Char level maps every byte value to a fixed id
(so any byte stream round-trips losslessly); word level maps whitespace
tokens, with rare words collapsed to an unknown marker. Id 0 is always the
start-of-sequence symbol that opens every document.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SOS_TOKEN = "<s>"
UNK_TOKEN = "<unk>"
SOS_ID = 0


class Vocabulary:
    """Bijective token<->id mapping with frequency counts.

    Char level: ids 1..256 are byte values 0..255, id 0 is <s>; V is always
    257 regardless of which bytes occur. Word level: id 0 <s>, id 1 <unk>,
    then content words in first-seen order.
    """

    def __init__(self, level, tokens, counts):
        if level not in ("char", "word"):
            raise ValueError(f"unknown vocabulary level {level!r}")
        self.level = level
        self.id_to_token = list(tokens)
        self.counts = list(counts)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.id_to_token)

    @property
    def size(self):
        return len(self.id_to_token)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"#level {self.level}\n")
            for tok, cnt in zip(self.id_to_token, self.counts):
                f.write(f"{_escape(tok, self.level)}\t{cnt}\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            header = f.readline().strip()
            if not header.startswith("#level "):
                raise ValueError("vocab file missing level header")
            level = header.split(" ", 1)[1]
            tokens, counts = [], []
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, cnt = line.rsplit("\t", 1)
                tokens.append(_unescape(tok, level))
                counts.append(int(cnt))
        return cls(level, tokens, counts)


def _escape(tok, level):
    if tok in (SOS_TOKEN, UNK_TOKEN):
        return tok
    if level == "char":
        return f"0x{tok:02x}"  # byte value
    return tok


def _unescape(tok, level):
    if tok in (SOS_TOKEN, UNK_TOKEN):
        return tok
    if level == "char":
        return int(tok, 16)
    return tok


def build_vocab(text, level, min_count=1):
    """Build a Vocabulary from raw text (str for word level, bytes or str for char).

    Word level keeps whitespace tokens occurring at least min_count times;
    the rest map to <unk>. Empty input is an error.
    """
    if level == "char":
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        if len(data) == 0:
            raise ValueError("cannot build a vocabulary from empty input")
        counts_by_byte = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256)
        tokens = [SOS_TOKEN] + list(range(256))
        counts = [0] + [int(c) for c in counts_by_byte]
        return Vocabulary("char", tokens, counts)
    if level == "word":
        if isinstance(text, bytes):
            text = text.decode("utf-8")
        words = text.split()
        if not words:
            raise ValueError("cannot build a vocabulary from empty input")
        freq = {}
        for w in words:
            freq[w] = freq.get(w, 0) + 1
        tokens = [SOS_TOKEN, UNK_TOKEN]
        counts = [0, 0]
        for w in words:  # first-seen order keeps ids deterministic
            c = freq.pop(w, None)
            if c is None:
                continue
            if c >= min_count:
                tokens.append(w)
                counts.append(c)
            else:
                counts[1] += c
        return Vocabulary("word", tokens, counts)
    raise ValueError(f"unknown vocabulary level {level!r}")


def tokenize(text, vocab):
    """Map raw text (one document) to an int32 id array. No <s> is inserted."""
    if vocab.level == "char":
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        return np.frombuffer(data, dtype=np.uint8).astype(np.int32) + 1
    words = text.split() if isinstance(text, str) else text.decode("utf-8").split()
    unk = vocab.token_to_id[UNK_TOKEN]
    return np.array([vocab.token_to_id.get(w, unk) for w in words], dtype=np.int32)


def detokenize(ids, vocab):
    """Inverse of tokenize, up to <unk> substitution at word level."""
    ids = np.asarray(ids)
    if ids.size and (ids.max() >= vocab.size or ids.min() < 0):
        raise ValueError(f"token id out of range for vocabulary of size {vocab.size}")
    if vocab.level == "char":
        return bytes(int(i) - 1 for i in ids if int(i) != SOS_ID)
    return " ".join(vocab.id_to_token[int(i)] for i in ids)


@dataclass
class TokenizedCorpus:
    """One split as a single id stream: [<s>] + doc for each document in order."""

    ids: np.ndarray  # int32 stream
    doc_offsets: np.ndarray  # int64 start index of each document's <s>
    level: str

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int32)
        self.doc_offsets = np.asarray(self.doc_offsets, dtype=np.int64)

    def __len__(self):
        return int(self.ids.size)

    @property
    def num_docs(self):
        return int(self.doc_offsets.size)

    def doc_bounds(self, i):
        start = int(self.doc_offsets[i])
        end = int(self.doc_offsets[i + 1]) if i + 1 < self.num_docs else len(self)
        return start, end


def corpus_from_docs(doc_id_arrays, level):
    parts, offsets, pos = [], [], 0
    for doc in doc_id_arrays:
        offsets.append(pos)
        parts.append(np.concatenate([[SOS_ID], doc]).astype(np.int32))
        pos += len(doc) + 1
    if not parts:
        raise ValueError("corpus has no documents")
    return TokenizedCorpus(np.concatenate(parts), np.array(offsets), level)


def load_corpus(path, vocab):
    """Tokenize a split file into a TokenizedCorpus.

    Word level treats each line as one document; char level treats the whole
    file as a single document (raw bytes).
    """
    if vocab.level == "char":
        with open(path, "rb") as f:
            data = f.read()
        return corpus_from_docs([tokenize(data, vocab)], "char")
    with open(path, encoding="utf-8") as f:
        docs = [tokenize(line, vocab) for line in f if line.strip()]
    if not docs:
        raise ValueError(f"no documents in {path}")
    return corpus_from_docs(docs, "word")


@dataclass
class Segment:
    lane: int
    inputs: np.ndarray  # (N,) int32, padded with SOS_ID past the end
    targets: np.ndarray  # (N,) int32
    mask: np.ndarray  # (N,) float64, 1 where the target counts toward loss
    positions: np.ndarray  # (N,) int64 canonical stream position of each input token
    fresh_lane: bool  # True for a lane's first segment (cache starts empty)


def lane_streams(corpus, lanes):
    """Assign documents round-robin to lanes; return per-lane (ids, positions)."""
    per_lane_ids = [[] for _ in range(lanes)]
    per_lane_pos = [[] for _ in range(lanes)]
    for i in range(corpus.num_docs):
        start, end = corpus.doc_bounds(i)
        lane = i % lanes
        per_lane_ids[lane].append(corpus.ids[start:end])
        per_lane_pos[lane].append(np.arange(start, end, dtype=np.int64))
    out = []
    for ids, pos in zip(per_lane_ids, per_lane_pos):
        if ids:
            out.append((np.concatenate(ids), np.concatenate(pos)))
        else:
            out.append((np.empty(0, dtype=np.int32), np.empty(0, dtype=np.int64)))
    return out


def segment_stream(corpus, n, lanes=1):
    """Yield Segments of length n per lane, in lockstep lane-major order.

    Documents are concatenated into `lanes` continuous streams; within a lane
    consecutive segments continue each other so an XL cache stays valid. The
    final partial segment of a lane is padded and masked. Targets are the
    next token in the lane stream; the lane's last token has no target.
    """
    if n < 1:
        raise ValueError("segment length must be >= 1")
    streams = lane_streams(corpus, lanes)
    max_len = max(ids.size for ids, _ in streams)
    num_segments = (max_len + n - 1) // n
    for s in range(num_segments):
        for lane, (ids, pos) in enumerate(streams):
            lo = s * n
            if lo >= ids.size:
                continue  # lane exhausted
            hi = min(lo + n, ids.size)
            inputs = np.full(n, SOS_ID, dtype=np.int32)
            targets = np.full(n, SOS_ID, dtype=np.int32)
            mask = np.zeros(n, dtype=np.float64)
            positions = np.full(n, -1, dtype=np.int64)
            inputs[: hi - lo] = ids[lo:hi]
            positions[: hi - lo] = pos[lo:hi]
            tgt_hi = min(hi, ids.size - 1)
            if tgt_hi > lo:
                targets[: tgt_hi - lo] = ids[lo + 1 : tgt_hi + 1]
                mask[: tgt_hi - lo] = 1.0
            yield Segment(lane, inputs, targets, mask, positions, fresh_lane=(s == 0))


def split_token_count(path, level):
    """Token count of a split file, as reported statistics."""
    if level == "char":
        with open(path, "rb") as f:
            return len(f.read())
    with open(path, encoding="utf-8") as f:
        return sum(len(line.split()) for line in f)
