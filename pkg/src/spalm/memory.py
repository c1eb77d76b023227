"""Episodic key-value memory over a training corpus, with top-K retrieval.

Keys are frozen encoder states (float32 on disk, float64 in compute), values
are the next token at each position. Retrieval is maximum inner product by
default; an L2 mode (score = negative squared distance) exists because only
L2 guarantees that a stored key retrieves itself, which several oracle tests
rely on. Exact search is a blocked brute-force scan with a deterministic
(-score, position) tie-break. Approximate search is an inverted-file index
over a k-means coarse quantizer, optionally with product quantization of
residuals; candidates are always rescored exactly, so reported scores are
recomputable against the raw keys.

File formats (little-endian):
    store  "SPKV" | version u32 | metric u8 (0=ip, 1=l2) | dim u32 |
           count u64 | crc32 u32 of payload | keys f32 row-major |
           values u32 | positions u64
    cache  "SPNN" | version u32 | K u32 | count u64 | crc32 u32 of payload |
           count*K records of (value u32, source u64, score f32)
           missing entries hold value 0xFFFFFFFF and score -inf
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

STORE_MAGIC = b"SPKV"
CACHE_MAGIC = b"SPNN"
FORMAT_VERSION = 1
SENTINEL_VALUE = np.uint32(0xFFFFFFFF)
SENTINEL_SOURCE = np.uint64(0xFFFFFFFFFFFFFFFF)

_METRIC_TAGS = {"ip": 0, "l2": 1}
_TAG_METRICS = {v: k for k, v in _METRIC_TAGS.items()}


@dataclass
class MemoryRecord:
    key: np.ndarray
    value: int
    position: int


@dataclass
class NeighborSet:
    """Top-K retrieval result, sorted by descending score."""

    values: np.ndarray  # token ids
    scores: np.ndarray
    positions: np.ndarray
    query_position: int | None = None
    short: bool = False  # fewer than the requested K were available

    def __len__(self):
        return int(self.values.size)


class EpisodicStore:
    """Immutable array-backed record collection plus search indices."""

    def __init__(self, keys, values, positions, metric="ip"):
        if metric not in _METRIC_TAGS:
            raise ValueError(f"unknown metric {metric!r}")
        self.keys = np.ascontiguousarray(keys, dtype=np.float32)
        self.values = np.ascontiguousarray(values, dtype=np.uint32)
        self.positions = np.ascontiguousarray(positions, dtype=np.uint64)
        if self.keys.ndim != 2:
            raise ValueError("keys must be a (count, dim) matrix")
        if not (len(self.keys) == len(self.values) == len(self.positions)):
            raise ValueError("keys, values and positions must have equal length")
        self.metric = metric
        self.ann = None

    def __len__(self):
        return int(self.keys.shape[0])

    @property
    def dim(self):
        return int(self.keys.shape[1])

    def record(self, i):
        return MemoryRecord(self.keys[i].astype(np.float64), int(self.values[i]), int(self.positions[i]))

    def build_ann(self, n_lists=64, n_probe=8, pq_subquantizers=0, kmeans_iters=10, seed=0):
        self.ann = AnnIndex.build(
            self,
            n_lists=n_lists,
            n_probe=n_probe,
            pq_subquantizers=pq_subquantizers,
            kmeans_iters=kmeans_iters,
            seed=seed,
        )
        return self.ann


def _scores_against(queries, keys, metric):
    """(Q, dim) x (B, dim) -> (Q, B) scores, computed in float64."""
    kf = keys.astype(np.float64)
    s = queries @ kf.T
    if metric == "l2":
        qn = (queries * queries).sum(axis=1, keepdims=True)
        kn = (kf * kf).sum(axis=1)
        s = 2.0 * s - qn - kn[None, :]
    return s


def exact_topk(store, query, k, exclude=None):
    """Brute-force top-k for one query. `exclude` is a predicate on positions."""
    query = np.asarray(query, dtype=np.float64).reshape(1, -1)
    if query.shape[1] != store.dim:
        raise ValueError(f"query dim {query.shape[1]} != store dim {store.dim}")
    scores = _scores_against(query, store.keys, store.metric)[0]
    if exclude is not None:
        drop = np.fromiter((bool(exclude(int(p))) for p in store.positions), bool, len(store))
        scores = np.where(drop, -np.inf, scores)
    order = np.lexsort((store.positions, -scores))
    order = order[np.isfinite(scores[order])]
    short = order.size < k
    take = order[:k]
    return NeighborSet(
        values=store.values[take].copy(),
        scores=scores[take].copy(),
        positions=store.positions[take].copy(),
        short=short,
    )


def exact_topk_batch(store, queries, k, exclude_lo=None, exclude_hi=None, key_block=16384):
    """Blocked brute-force top-k for many queries.

    Optional per-query half-open position ranges [exclude_lo, exclude_hi) are
    never returned. Returns (values (Q,k), sources (Q,k), scores (Q,k)) with
    sentinel entries when fewer than k records are available.
    """
    queries = np.asarray(queries, dtype=np.float64)
    q_count = queries.shape[0]
    if queries.shape[1] != store.dim:
        raise ValueError(f"query dim {queries.shape[1]} != store dim {store.dim}")
    n = len(store)
    cand_scores = []
    cand_idx = []
    for lo in range(0, max(n, 1), key_block):
        hi = min(lo + key_block, n)
        if hi <= lo:
            break
        block_scores = _scores_against(queries, store.keys[lo:hi], store.metric)
        if exclude_lo is not None:
            pos = store.positions[lo:hi].astype(np.int64)
            drop = (pos[None, :] >= exclude_lo[:, None]) & (pos[None, :] < exclude_hi[:, None])
            block_scores[drop] = -np.inf
        take = min(k, hi - lo)
        part = np.argpartition(block_scores, -take, axis=1)[:, -take:]
        cand_scores.append(np.take_along_axis(block_scores, part, axis=1))
        cand_idx.append(part + lo)
    if not cand_scores:
        shape = (q_count, k)
        return (
            np.full(shape, SENTINEL_VALUE, dtype=np.uint32),
            np.full(shape, SENTINEL_SOURCE, dtype=np.uint64),
            np.full(shape, -np.inf, dtype=np.float64),
        )
    all_scores = np.concatenate(cand_scores, axis=1)
    all_idx = np.concatenate(cand_idx, axis=1)
    return _finalize_topk(store, all_scores, all_idx, k)


def _finalize_topk(store, cand_scores, cand_idx, k):
    """Per-row sort by (-score, position) and pad to k with sentinels."""
    q_count = cand_scores.shape[0]
    out_vals = np.full((q_count, k), SENTINEL_VALUE, dtype=np.uint32)
    out_src = np.full((q_count, k), SENTINEL_SOURCE, dtype=np.uint64)
    out_scores = np.full((q_count, k), -np.inf, dtype=np.float64)
    positions = store.positions
    for qi in range(q_count):
        row_scores = cand_scores[qi]
        row_idx = cand_idx[qi]
        order = np.lexsort((positions[row_idx], -row_scores))
        order = order[np.isfinite(row_scores[order])][:k]
        got = order.size
        out_vals[qi, :got] = store.values[row_idx[order]]
        out_src[qi, :got] = positions[row_idx[order]]
        out_scores[qi, :got] = row_scores[order]
    return out_vals, out_src, out_scores


def ann_topk(store, query, k):
    """Approximate top-k through the quantized index; scores are exact rescored."""
    if store.ann is None:
        raise RuntimeError("approximate index not built; call build_ann first")
    vals, srcs, scores = store.ann.search_batch(np.asarray(query, dtype=np.float64).reshape(1, -1), k)
    keep = vals[0] != SENTINEL_VALUE
    return NeighborSet(
        values=vals[0][keep],
        scores=scores[0][keep],
        positions=srcs[0][keep],
        short=bool(keep.sum() < k),
    )


# ---------------------------------------------------------------------------
# approximate index: IVF coarse quantizer + optional PQ of residuals
# ---------------------------------------------------------------------------


def _pairwise_sq(a, b):
    an = (a * a).sum(axis=1)[:, None]
    bn = (b * b).sum(axis=1)[None, :]
    return an + bn - 2.0 * (a @ b.T)


def _assign_nearest(data, centroids, block=16384):
    """argmin_c ||x - c||^2 per row, blocked to bound memory."""
    out = np.empty(data.shape[0], dtype=np.int64)
    for lo in range(0, data.shape[0], block):
        hi = min(lo + block, data.shape[0])
        out[lo:hi] = _pairwise_sq(data[lo:hi], centroids).argmin(axis=1)
    return out


def _kmeans(data, n_clusters, iters, rng):
    """Seeded k-means++ then Lloyd iterations; returns (centroids, assignment)."""
    n = data.shape[0]
    if n_clusters >= n:
        return data.copy(), np.arange(n)
    first = int(rng.integers(n))
    centroids = [data[first]]
    d2 = ((data - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, n_clusters):
        total = d2.sum()
        probs = d2 / total if total > 0 else np.full(n, 1.0 / n)
        nxt = int(rng.choice(n, p=probs))
        centroids.append(data[nxt])
        d2 = np.minimum(d2, ((data - data[nxt]) ** 2).sum(axis=1))
    centroids = np.stack(centroids)
    assign = _assign_nearest(data, centroids)
    for _ in range(iters):
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, data)
        counts = np.bincount(assign, minlength=n_clusters)
        empty = counts == 0
        nonzero = ~empty
        centroids[nonzero] = sums[nonzero] / counts[nonzero, None]
        for c in np.where(empty)[0]:  # re-seed empty clusters deterministically
            centroids[c] = data[int(rng.integers(n))]
        assign = _assign_nearest(data, centroids)
    return centroids, assign


@dataclass
class AnnIndex:
    metric: str
    centroids: np.ndarray  # (n_lists, dim) f64
    list_members: list = field(default_factory=list)  # record index arrays, position-sorted
    n_probe: int = 8
    pq_codebooks: np.ndarray | None = None  # (n_sub, 256, sub_dim)
    pq_codes: np.ndarray | None = None  # (count, n_sub) uint8
    _store: EpisodicStore | None = None

    @classmethod
    def build(cls, store, n_lists, n_probe, pq_subquantizers=0, kmeans_iters=10, seed=0):
        rng = np.random.default_rng(seed)
        keys = store.keys.astype(np.float64)
        n_lists = max(1, min(n_lists, max(1, len(store))))
        if len(store) == 0:
            raise ValueError("cannot build an index over an empty store")
        sample = keys
        if len(keys) > 100_000:
            pick = rng.choice(len(keys), size=100_000, replace=False)
            pick.sort()
            sample = keys[pick]
        centroids, _ = _kmeans(sample, n_lists, kmeans_iters, rng)
        assign = _assign_nearest(keys, centroids)
        order = np.argsort(assign, kind="stable")
        sorted_assign = assign[order]
        starts = np.searchsorted(sorted_assign, np.arange(len(centroids)))
        ends = np.searchsorted(sorted_assign, np.arange(len(centroids)) + 1)
        members = [np.sort(order[s:e]).astype(np.int64) for s, e in zip(starts, ends)]

        idx = cls(
            metric=store.metric,
            centroids=centroids,
            list_members=members,
            n_probe=min(n_probe, len(centroids)),
            _store=store,
        )
        if pq_subquantizers > 0:
            idx._train_pq(keys, assign, pq_subquantizers, kmeans_iters, rng)
        return idx

    def _train_pq(self, keys, assign, n_sub, iters, rng):
        dim = keys.shape[1]
        if dim % n_sub != 0:
            raise ValueError(f"dim {dim} not divisible by {n_sub} subquantizers")
        sub_dim = dim // n_sub
        residuals = keys - self.centroids[assign]
        codebooks = np.zeros((n_sub, 256, sub_dim))
        codes = np.zeros((len(keys), n_sub), dtype=np.uint8)
        for s in range(n_sub):
            block = residuals[:, s * sub_dim : (s + 1) * sub_dim]
            cb, asg = _kmeans(block, min(256, len(block)), iters, rng)
            codebooks[s, : len(cb)] = cb
            codes[:, s] = asg.astype(np.uint8)
        self.pq_codebooks = codebooks
        self.pq_codes = codes

    @property
    def n_lists(self):
        return len(self.centroids)

    def _rank_lists(self, queries, n_probe):
        if self.metric == "ip":
            aff = queries @ self.centroids.T
        else:
            aff = -_pairwise_sq(queries, self.centroids)
        n_probe = min(n_probe, self.n_lists)
        part = np.argpartition(aff, -n_probe, axis=1)[:, -n_probe:]
        row_aff = np.take_along_axis(aff, part, axis=1)
        order = np.argsort(-row_aff, axis=1, kind="stable")
        return np.take_along_axis(part, order, axis=1)

    def _adc_scores(self, rows_q, list_idx, members):
        """PQ lookup-table scores of `members` for queries (R, dim)."""
        n_sub, _, sub_dim = self.pq_codebooks.shape
        codes = self.pq_codes[members]  # (m, n_sub)
        qs = rows_q.reshape(len(rows_q), n_sub, sub_dim)
        if self.metric == "ip":
            base = rows_q @ self.centroids[list_idx]
            lut = np.einsum("rsd,scd->rsc", qs, self.pq_codebooks)
        else:
            resid = (rows_q - self.centroids[list_idx]).reshape(len(rows_q), n_sub, sub_dim)
            diff = resid[:, :, None, :] - self.pq_codebooks[None]
            lut = -(diff * diff).sum(axis=3)
            base = np.zeros(len(rows_q))
        out = np.broadcast_to(base[:, None], (len(rows_q), len(members))).copy()
        for s in range(n_sub):
            out += lut[:, s, codes[:, s]]
        return out

    def search_batch(self, queries, k, n_probe=None, exclude_lo=None, exclude_hi=None, refine=4):
        """Probe the top lists per query; candidates are scored (or rescored)
        against the raw keys. Same output contract as exact_topk_batch.

        Probes are flattened and grouped by list so each inverted list is
        scanned once per call with one matrix product.
        """
        store = self._store
        queries = np.asarray(queries, dtype=np.float64)
        n_probe = self.n_probe if n_probe is None else min(n_probe, self.n_lists)
        probes = self._rank_lists(queries, n_probe)
        q_count = queries.shape[0]
        cand_scores = np.full((q_count, n_probe * k), -np.inf)
        cand_idx = np.zeros((q_count, n_probe * k), dtype=np.int64)

        flat_q = np.repeat(np.arange(q_count), n_probe)
        flat_slot = np.tile(np.arange(n_probe), q_count)
        flat_list = probes.ravel()
        order = np.argsort(flat_list, kind="stable")
        fq, fslot, flist = flat_q[order], flat_slot[order], flat_list[order]
        uniq, starts = np.unique(flist, return_index=True)
        ends = np.append(starts[1:], flist.size)

        for lst, lo, hi in zip(uniq, starts, ends):
            members = self.list_members[lst]
            if members.size == 0:
                continue
            rows = fq[lo:hi]
            slots = fslot[lo:hi]
            if self.pq_codes is not None:
                scores = self._adc_scores(queries[rows], lst, members)
                take = min(max(k * refine, k), members.size)
            else:
                scores = _scores_against(queries[rows], store.keys[members], store.metric)
                take = min(k, members.size)
            if exclude_lo is not None:
                pos = store.positions[members].astype(np.int64)
                drop = (pos[None, :] >= exclude_lo[rows, None]) & (pos[None, :] < exclude_hi[rows, None])
                scores[drop] = -np.inf
            part = np.argpartition(scores, -take, axis=1)[:, -take:]
            got_idx = members[part]
            got_scores = np.take_along_axis(scores, part, axis=1)
            if self.pq_codes is not None:
                # keep the top-k ADC candidates per row, rescored exactly
                sel = np.argsort(-got_scores, axis=1, kind="stable")[:, :k]
                got_idx = np.take_along_axis(got_idx, sel, axis=1)
                got_scores = np.take_along_axis(got_scores, sel, axis=1)
                for r in range(len(rows)):
                    finite = np.isfinite(got_scores[r])
                    ids = got_idx[r][finite]
                    if ids.size:
                        exact = _scores_against(queries[rows[r] : rows[r] + 1], store.keys[ids], store.metric)[0]
                        got_scores[r][finite] = exact
            width = got_idx.shape[1]
            cols = (slots * k)[:, None] + np.arange(width)[None, :]
            cand_scores[rows[:, None], cols] = got_scores
            cand_idx[rows[:, None], cols] = got_idx

        return _finalize_topk(store, cand_scores, cand_idx, k)


# ---------------------------------------------------------------------------
# store construction from a frozen encoder
# ---------------------------------------------------------------------------


def encode_keys(corpus, encoder, group_docs=16, progress=None):
    """Frozen-encoder states for every stream position except the last.

    Documents are encoded in order with a per-document cache reset; the
    state at position i is the retrieval key for predicting position i+1.
    Returns a float32 (len(corpus)-1, d) matrix.
    """
    c = encoder.config
    n_positions = len(corpus) - 1
    keys = np.zeros((n_positions, c.d_model), dtype=np.float32)
    docs = [corpus.doc_bounds(i) for i in range(corpus.num_docs)]
    for g in range(0, len(docs), group_docs):
        group = docs[g : g + group_docs]
        lens = [end - start for start, end in group]
        width = max(lens)
        batch = np.zeros((len(group), width), dtype=np.int32)
        for row, (start, end) in enumerate(group):
            batch[row, : end - start] = corpus.ids[start:end]
        cache = encoder.new_cache(len(group))
        for lo in range(0, width, c.context_len):
            hi = min(lo + c.context_len, width)
            h, _ = encoder.forward(batch[:, lo:hi], cache=cache, training=False)
            states = h.data  # (B, seg, d)
            for row, (start, end) in enumerate(group):
                doc_len = end - start
                seg_lo = start + lo
                seg_hi = start + min(hi, doc_len)
                if seg_hi <= seg_lo:
                    continue
                upper = min(seg_hi, n_positions)
                if upper > seg_lo:
                    keys[seg_lo:upper] = states[row, : upper - seg_lo].astype(np.float32)
        if progress is not None:
            progress(min(g + group_docs, len(docs)), len(docs))
    return keys


def build_store(corpus, encoder, metric="ip", group_docs=16, progress=None):
    """Build the episodic store over a tokenized corpus with a frozen encoder.

    One record per position i in [0, len-2]: key is the encoder state at i,
    value is the token at i+1.
    """
    if encoder.config.vocab_size < int(corpus.ids.max()) + 1:
        raise ValueError("encoder vocabulary smaller than corpus token ids")
    keys = encode_keys(corpus, encoder, group_docs=group_docs, progress=progress)
    values = corpus.ids[1:].astype(np.uint32)
    positions = np.arange(len(corpus) - 1, dtype=np.uint64)
    return EpisodicStore(keys, values, positions, metric=metric)


# ---------------------------------------------------------------------------
# store file io
# ---------------------------------------------------------------------------


def save_store(store, path):
    payload = (
        store.keys.astype("<f4").tobytes()
        + store.values.astype("<u4").tobytes()
        + store.positions.astype("<u8").tobytes()
    )
    with open(path, "wb") as f:
        f.write(STORE_MAGIC)
        f.write(struct.pack("<IBIQ", FORMAT_VERSION, _METRIC_TAGS[store.metric], store.dim, len(store)))
        f.write(struct.pack("<I", zlib.crc32(payload)))
        f.write(payload)


def load_store(store_path, expect_dim=None):
    with open(store_path, "rb") as f:
        magic = f.read(4)
        if magic != STORE_MAGIC:
            raise ValueError(f"store magic mismatch: {magic!r}")
        header = f.read(4 + 1 + 4 + 8 + 4)
        if len(header) != 21:
            raise ValueError("store header truncated")
        version, tag, dim, count, crc = struct.unpack("<IBIQI", header)
        if version != FORMAT_VERSION:
            raise ValueError(f"store version mismatch: {version}")
        if tag not in _TAG_METRICS:
            raise ValueError(f"store metric tag invalid: {tag}")
        if expect_dim is not None and dim != expect_dim:
            raise ValueError(f"store dim mismatch: file {dim}, expected {expect_dim}")
        payload = f.read()
    expected = count * (dim * 4 + 4 + 8)
    if len(payload) != expected:
        raise ValueError(f"store count mismatch: payload {len(payload)} bytes, expected {expected}")
    if zlib.crc32(payload) != crc:
        raise ValueError("store checksum mismatch")
    ksz = count * dim * 4
    vsz = count * 4
    keys = np.frombuffer(payload[:ksz], dtype="<f4").reshape(count, dim)
    values = np.frombuffer(payload[ksz : ksz + vsz], dtype="<u4")
    positions = np.frombuffer(payload[ksz + vsz :], dtype="<u8")
    return EpisodicStore(keys, values, positions, metric=_TAG_METRICS[tag])


# ---------------------------------------------------------------------------
# neighbor cache file io
# ---------------------------------------------------------------------------

_RECORD_DTYPE = np.dtype([("value", "<u4"), ("source", "<u8"), ("score", "<f4")])


@dataclass
class NeighborCache:
    """Precomputed per-position top-K neighbors, row t for stream position t."""

    values: np.ndarray  # (count, K) uint32
    sources: np.ndarray  # (count, K) uint64
    scores: np.ndarray  # (count, K) float32

    @property
    def k(self):
        return int(self.values.shape[1])

    def __len__(self):
        return int(self.values.shape[0])

    def truncated(self, k):
        if k > self.k:
            raise ValueError(f"requested K={k} exceeds cached K={self.k}")
        return NeighborCache(self.values[:, :k], self.sources[:, :k], self.scores[:, :k])

    def neighbor_set(self, position):
        keep = self.values[position] != SENTINEL_VALUE
        return NeighborSet(
            values=self.values[position][keep],
            scores=self.scores[position][keep].astype(np.float64),
            positions=self.sources[position][keep],
            query_position=int(position),
            short=bool(keep.sum() < self.k),
        )


def save_neighbor_cache(cache, path):
    count, k = cache.values.shape
    records = np.zeros((count, k), dtype=_RECORD_DTYPE)
    records["value"] = cache.values
    records["source"] = cache.sources
    records["score"] = cache.scores
    payload = records.tobytes()
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<IIQ", FORMAT_VERSION, k, count))
        f.write(struct.pack("<I", zlib.crc32(payload)))
        f.write(payload)


def load_neighbor_cache(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CACHE_MAGIC:
            raise ValueError(f"neighbor cache magic mismatch: {magic!r}")
        header = f.read(4 + 4 + 8 + 4)
        if len(header) != 20:
            raise ValueError("neighbor cache header truncated")
        version, k, count, crc = struct.unpack("<IIQI", header)
        if version != FORMAT_VERSION:
            raise ValueError(f"neighbor cache version mismatch: {version}")
        payload = f.read()
    if len(payload) != count * k * _RECORD_DTYPE.itemsize:
        raise ValueError("neighbor cache count mismatch: truncated payload")
    if zlib.crc32(payload) != crc:
        raise ValueError("neighbor cache checksum mismatch")
    records = np.frombuffer(payload, dtype=_RECORD_DTYPE).reshape(count, k)
    return NeighborCache(
        values=records["value"].copy(),
        sources=records["source"].copy(),
        scores=records["score"].copy(),
    )
