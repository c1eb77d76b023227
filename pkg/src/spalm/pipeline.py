"""Two-phase training and evaluation.

Phase one trains the base transformer (it doubles as the retrieval key
encoder). Phase two builds the episodic store, precomputes per-position
neighbors, and trains the gated model against the frozen neighbor cache.
Evaluation streams a split in document order with a configurable cache
length and never writes to the store or neighbor cache.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import SOS_ID, TokenizedCorpus, lane_streams
from .fusion import aggregate_neighbors_batch, combine, gate, knn_target_probs
from .memory import (
    SENTINEL_VALUE,
    EpisodicStore,
    NeighborCache,
    encode_keys,
    exact_topk_batch,
)
from .model import TransformerLM, nll_loss, read_checkpoint, write_checkpoint
from .optim import AdamState, adam_step, clip_global_norm

LAMBDA_GRID = (0.05, 0.1, 0.2, 0.3, 0.4)

TRAIN_STATE_MAGIC = b"SPTS"
TRAIN_STATE_VERSION = 1

EVAL_MODES = ("transformer", "xl", "knnlm", "spalm", "spalm+knn")


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


class LaneBatcher:
    """Fixed lane-major batches over a corpus, padded to whole segments."""

    def __init__(self, corpus, seg_len, lanes):
        streams = lane_streams(corpus, lanes)
        longest = max(ids.size for ids, _ in streams)
        self.seg_len = seg_len
        self.num_steps = max(1, (longest + seg_len - 1) // seg_len)
        width = self.num_steps * seg_len
        self.ids = np.full((lanes, width), SOS_ID, dtype=np.int32)
        self.targets = np.full((lanes, width), SOS_ID, dtype=np.int32)
        self.mask = np.zeros((lanes, width))
        self.positions = np.full((lanes, width), -1, dtype=np.int64)
        for lane, (ids, pos) in enumerate(streams):
            n = ids.size
            self.ids[lane, :n] = ids
            self.positions[lane, :n] = pos
            if n > 1:
                self.targets[lane, : n - 1] = ids[1:]
                self.mask[lane, : n - 1] = 1.0

    def batch(self, s):
        lo, hi = s * self.seg_len, (s + 1) * self.seg_len
        return (
            self.ids[:, lo:hi],
            self.targets[:, lo:hi],
            self.mask[:, lo:hi],
            self.positions[:, lo:hi],
        )


def _neighbor_arrays(cache, positions, k):
    """Gather (ids, scores, valid) of shape (B, n, k) for stream positions."""
    flat = positions.reshape(-1)
    ok = (flat >= 0) & (flat < len(cache))
    idx = np.where(ok, flat, 0)
    vals = cache.values[idx, :k]
    scores = cache.scores[idx, :k].astype(np.float64)
    valid = ok[:, None] & (vals != SENTINEL_VALUE)
    ids = np.where(valid, vals, 0).astype(np.int64)
    shape = (*positions.shape, k)
    return ids.reshape(shape), scores.reshape(shape), valid.reshape(shape)


def _gated_log_probs(model, h, positions, neighbors, k, force_gate=None):
    """log p(. | context, neighbors) under the gated head; also returns g and z."""
    ids, _, valid = _neighbor_arrays(neighbors, positions, k)
    W = model.params["embed.W"]
    m, _, _ = aggregate_neighbors_batch(h, ids, W, valid)
    if force_gate is None:
        g = gate(h, model.params["gate.w_g"])
    else:
        shape = (h.shape[0], h.shape[1], 1)
        g = Tensor(np.full(shape, float(force_gate)))
    z = combine(h, m, g)
    log_probs = ad.log_softmax(model.lm_logits(z), axis=-1)
    return log_probs, g, z


def _batch_loss(model, batch, neighbors, k, cache, rng, training):
    ids, targets, mask, positions = batch
    h, _ = model.forward(ids, cache=cache, training=training, rng=rng)
    if neighbors is not None:
        log_probs, _, _ = _gated_log_probs(model, h, positions, neighbors, k)
    else:
        log_probs = ad.log_softmax(model.lm_logits(h), axis=-1)
    return nll_loss(log_probs, targets, mask)


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)  # (step, train nll)
    dev_evals: list = field(default_factory=list)  # (step, dev nll)
    stopped_early: bool = False


class Trainer:
    """Single-writer training loop; fully serializable for exact resume."""

    def __init__(self, model, corpus, cfg, neighbors=None, dev_corpus=None, dev_neighbors=None, log=None):
        self.model = model
        self.cfg = cfg
        self.neighbors = neighbors.truncated(model.config.neighbor_k) if neighbors is not None else None
        self.dev_corpus = dev_corpus
        self.dev_neighbors = (
            dev_neighbors.truncated(model.config.neighbor_k) if dev_neighbors is not None else None
        )
        self.batcher = LaneBatcher(corpus, model.config.context_len, cfg.lanes)
        self.cache = model.new_cache(cfg.lanes)
        self.adam = AdamState.init(
            model.param_arrays(), lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps
        )
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.epoch = 0
        self.seg = 0
        self.best_dev = math.inf
        self.bad_evals = 0
        self.history = TrainHistory()
        self.log = log or (lambda msg: None)

    def _dev_nll(self):
        return quick_nll(
            self.model,
            self.dev_corpus,
            lanes=self.cfg.lanes,
            cache_len=self.model.config.cache_len,
            max_tokens=self.cfg.dev_eval_tokens,
            neighbors=self.dev_neighbors,
        )

    def step_once(self):
        batch = self.batcher.batch(self.seg)
        self.model.zero_grad()
        where = f"step {self.step} (epoch {self.epoch}, segment {self.seg})"
        try:
            loss, _ = _batch_loss(
                self.model, batch, self.neighbors, self.model.config.neighbor_k, self.cache, self.rng, True
            )
        except FloatingPointError as e:
            raise TrainingDiverged(f"non-finite activations at {where}: {e}") from e
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss became non-finite at {where}")
        ad.backward(loss)
        grads = clip_global_norm(self.model.grads(), self.cfg.grad_clip)
        new_params, self.adam = adam_step(self.model.param_arrays(), grads, self.adam)
        self.model.set_param_arrays(new_params)
        self.step += 1
        self.seg += 1
        if self.seg >= self.batcher.num_steps:
            self.seg = 0
            self.epoch += 1
            self.cache.reset()
        self.history.steps.append((self.step, value))
        return value

    def run(self):
        cfg = self.cfg
        while self.step < cfg.max_steps and self.epoch < cfg.max_epochs:
            value = self.step_once()
            if self.step % cfg.log_every == 0:
                self.log(f"step {self.step} train_nll {value:.4f}")
            if self.dev_corpus is not None and self.step % cfg.eval_every == 0:
                dev = self._dev_nll()
                self.history.dev_evals.append((self.step, dev))
                self.log(f"step {self.step} dev_nll {dev:.4f}")
                if dev < self.best_dev - cfg.min_delta:
                    self.best_dev = dev
                    self.bad_evals = 0
                else:
                    self.bad_evals += 1
                    if self.bad_evals >= cfg.patience:
                        self.history.stopped_early = True
                        self.log(f"early stop at step {self.step} (best dev {self.best_dev:.4f})")
                        return self.history
        return self.history


def quick_nll(model, corpus, *, lanes, cache_len, max_tokens=None, neighbors=None, force_gate=None):
    """Batched lane-streaming NLL, used for early stopping and smoke checks.

    Unlike `evaluate`, lanes concatenate documents (no per-document cache
    reset), matching the training-time distribution.
    """
    if neighbors is not None:
        neighbors = neighbors.truncated(model.config.neighbor_k)
    batcher = LaneBatcher(corpus, model.config.context_len, lanes)
    cache = model.new_cache(lanes, max_len=cache_len)
    total, count = 0.0, 0.0
    for s in range(batcher.num_steps):
        batch = batcher.batch(s)
        ids, targets, mask, positions = batch
        h, _ = model.forward(ids, cache=cache, training=False)
        if neighbors is not None:
            log_probs, _, _ = _gated_log_probs(
                model, h, positions, neighbors, model.config.neighbor_k, force_gate=force_gate
            )
        else:
            log_probs = ad.log_softmax(model.lm_logits(h), axis=-1)
        picked = np.take_along_axis(log_probs.data, targets[..., None].astype(np.int64), axis=-1)[..., 0]
        total += float(-(picked * mask).sum())
        count += float(mask.sum())
        if max_tokens is not None and count >= max_tokens:
            break
    return total / count


# ---------------------------------------------------------------------------
# phase one / phase two entry points
# ---------------------------------------------------------------------------


def pretrain(cfg, train_corpus, dev_corpus, log=None):
    """Train the base transformer; it serves as encoder and baseline rows."""
    mcfg = cfg.model_config(gated=False)
    model = TransformerLM(mcfg, rng=np.random.default_rng(cfg.seed))
    trainer = Trainer(model, train_corpus, cfg, dev_corpus=dev_corpus, log=log)
    history = trainer.run()
    return model, history


def train_gated(cfg, train_corpus, dev_corpus, neighbors, dev_neighbors=None, encoder=None, log=None):
    """Train the retrieval-gated model against a frozen neighbor cache.

    Fresh initialization by default; pass `encoder` to warm-start the shared
    parameters from the pretrained model.
    """
    if len(neighbors) != len(train_corpus) - 1:
        raise ValueError(
            f"neighbor cache rows ({len(neighbors)}) misaligned with corpus positions ({len(train_corpus) - 1})"
        )
    mcfg = cfg.model_config(gated=True)
    model = TransformerLM(mcfg, rng=np.random.default_rng(cfg.seed))
    if encoder is not None:
        for name, p in encoder.params.items():
            model.params[name].data = p.data.copy()
    trainer = Trainer(
        model,
        train_corpus,
        cfg,
        neighbors=neighbors,
        dev_corpus=dev_corpus,
        dev_neighbors=dev_neighbors,
        log=log,
    )
    history = trainer.run()
    return model, history


# ---------------------------------------------------------------------------
# neighbor precomputation
# ---------------------------------------------------------------------------

_PRECOMPUTE_CTX = {}


def _run_chunk(store, queries, positions, k, exclude_window, method, chunk_slice):
    qs = queries[chunk_slice].astype(np.float64)
    if exclude_window is None:
        lo = hi = None
    else:
        pos = positions[chunk_slice]
        lo = pos - exclude_window
        hi = pos + exclude_window + 1
    if method == "ann":
        return store.ann.search_batch(qs, k, exclude_lo=lo, exclude_hi=hi)
    return exact_topk_batch(store, qs, k, exclude_lo=lo, exclude_hi=hi)


def _worker_chunks(chunk_ids):
    ctx = _PRECOMPUTE_CTX
    out = []
    for ci in chunk_ids:
        sl = slice(ci * ctx["chunk"], min((ci + 1) * ctx["chunk"], ctx["count"]))
        out.append(
            (
                ci,
                _run_chunk(
                    ctx["store"],
                    ctx["queries"],
                    ctx["positions"],
                    ctx["k"],
                    ctx["exclude_window"],
                    ctx["method"],
                    sl,
                ),
            )
        )
    return out


def precompute_neighbors(
    store,
    queries,
    k,
    *,
    query_positions=None,
    exclude_window=None,
    method="exact",
    chunk=2048,
    workers=1,
    log=None,
):
    """Top-k neighbors for every query row, as a NeighborCache.

    Queries are processed in a fixed chunk grid so results are byte-identical
    regardless of how chunks are sharded across workers. `exclude_window` is
    a radius: store positions within |p - t| <= window of the query position
    t are never returned (the training-time self-exclusion rule).
    """
    queries = np.asarray(queries)
    count = queries.shape[0]
    if queries.ndim != 2 or queries.shape[1] != store.dim:
        raise ValueError(f"queries must be (n, {store.dim})")
    if exclude_window is not None and query_positions is None:
        raise ValueError("exclusion requires query positions")
    if method == "ann" and store.ann is None:
        raise RuntimeError("approximate index not built; call build_ann first")
    positions = None if query_positions is None else np.asarray(query_positions, dtype=np.int64)
    n_chunks = max(1, (count + chunk - 1) // chunk)

    vals = np.full((count, k), SENTINEL_VALUE, dtype=np.uint32)
    srcs = np.full((count, k), np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    scores = np.full((count, k), -np.inf, dtype=np.float32)

    def consume(ci, result):
        sl = slice(ci * chunk, min((ci + 1) * chunk, count))
        vals[sl], srcs[sl], scores[sl] = result[0], result[1], result[2].astype(np.float32)

    if workers <= 1:
        for ci in range(n_chunks):
            sl = slice(ci * chunk, min((ci + 1) * chunk, count))
            consume(ci, _run_chunk(store, queries, positions, k, exclude_window, method, sl))
            if log is not None and (ci + 1) % 16 == 0:
                log(f"neighbors: {min((ci + 1) * chunk, count)}/{count}")
    else:
        _PRECOMPUTE_CTX.update(
            store=store,
            queries=queries,
            positions=positions,
            k=k,
            exclude_window=exclude_window,
            method=method,
            chunk=chunk,
            count=count,
        )
        shards = [list(range(w, n_chunks, workers)) for w in range(workers)]
        try:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for batch in pool.map(_worker_chunks, shards):
                    for ci, result in batch:
                        consume(ci, result)
        finally:
            _PRECOMPUTE_CTX.clear()
    return NeighborCache(values=vals, sources=srcs, scores=scores)


def neighbors_for_corpus(store, corpus, encoder, k, *, method="exact", exclude_window=None, chunk=2048, workers=1, log=None):
    """Neighbor cache for a split: queries are frozen-encoder states.

    For the training split pass the store built on the same corpus and an
    exclusion window; for held-out splits leave exclusion off.
    """
    keys = encode_keys(corpus, encoder)
    positions = np.arange(len(keys), dtype=np.int64)
    return precompute_neighbors(
        store,
        keys,
        k,
        query_positions=positions,
        exclude_window=exclude_window,
        method=method,
        chunk=chunk,
        workers=workers,
        log=log,
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    mode: str
    tokens: int
    nll_total: float
    # optional per-token arrays (document-order)
    nll: np.ndarray | None = None
    gates: np.ndarray | None = None
    rank1_hit: np.ndarray | None = None

    @property
    def nll_per_token(self):
        return self.nll_total / self.tokens

    @property
    def perplexity(self):
        return math.exp(self.nll_per_token)

    @property
    def bpc(self):
        return self.nll_per_token / math.log(2.0)

    def lines(self):
        return [
            f"metric=tokens value={self.tokens} mode={self.mode}",
            f"metric=nll_total value={self.nll_total!r} mode={self.mode}",
            f"metric=nll_per_token value={self.nll_per_token!r} mode={self.mode}",
            f"metric=perplexity value={self.perplexity!r} mode={self.mode}",
            f"metric=bpc value={self.bpc!r} mode={self.mode}",
        ]

    def write(self, path):
        with open(path, "w") as f:
            for line in self.lines():
                f.write(line + "\n")


def _doc_segments(corpus, doc, seg_len):
    start, end = corpus.doc_bounds(doc)
    for lo in range(start, end, seg_len):
        yield lo, min(lo + seg_len, end)


def _resolve_neighbors(corpus, store, encoder, neighbor_cache, chunk=2048, log=None, k=None):
    if neighbor_cache is not None:
        return neighbor_cache
    if store is None or encoder is None:
        raise ValueError("retrieval mode needs a neighbor cache or a store plus encoder")
    return neighbors_for_corpus(store, corpus, encoder, k, method="exact", chunk=chunk, log=log)


def evaluate(
    model,
    corpus,
    *,
    mode,
    eval_cache_len,
    store=None,
    encoder=None,
    neighbor_cache=None,
    lam=None,
    tau=1.0,
    k=None,
    force_gate=None,
    collect=False,
    log=None,
):
    """Stream a split in document order and report NLL/perplexity/BPC.

    Per-token NLL is -log of the probability the mode assigns to the gold
    target, so interpolation identities hold exactly. The cache is reset at
    every document boundary; evaluation is static (no store growth).
    """
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown eval mode {mode!r}")
    if mode in ("knnlm", "spalm+knn") and lam is None:
        raise ValueError(f"mode {mode} requires an interpolation weight")
    k = model.config.neighbor_k if k is None else k
    neighbors = None
    if mode in ("knnlm", "spalm", "spalm+knn"):
        neighbors = _resolve_neighbors(corpus, store, encoder, neighbor_cache, log=log, k=k)
        neighbors = neighbors.truncated(k)

    cache_len = 0 if mode == "transformer" else eval_cache_len
    stream = corpus.ids
    last = len(stream) - 1
    total_nll, total_tokens = 0.0, 0
    nlls, gates_out, hits = [], [], []

    for doc in range(corpus.num_docs):
        cache = model.new_cache(1, max_len=cache_len)
        for lo, hi in _doc_segments(corpus, doc, model.config.context_len):
            ids = stream[lo:hi][None, :]
            h, _ = model.forward(ids, cache=cache, training=False)
            upper = min(hi, last)
            if upper <= lo:
                continue
            n_eval = upper - lo
            targets = stream[lo + 1 : upper + 1].astype(np.int64)
            positions = np.arange(lo, upper, dtype=np.int64)[None, :]

            if mode in ("transformer", "xl", "knnlm"):
                log_probs = ad.log_softmax(model.lm_logits(h), axis=-1).data[0, :n_eval]
                p_base = np.exp(log_probs[np.arange(n_eval), targets])
            else:
                log_probs_t, g, _ = _gated_log_probs(
                    model, h, np.arange(lo, hi, dtype=np.int64)[None, :], neighbors, k, force_gate=force_gate
                )
                log_probs = log_probs_t.data[0, :n_eval]
                p_base = np.exp(log_probs[np.arange(n_eval), targets])
                if collect:
                    gates_out.append(g.data[0, :n_eval].mean(axis=-1))

            if mode in ("knnlm", "spalm+knn"):
                vals, scores, valid = _neighbor_arrays(neighbors, positions, k)
                p_knn = knn_target_probs(vals[0], scores[0], valid[0], tau, targets)
                p = lam * p_base + (1.0 - lam) * p_knn
            else:
                p = p_base

            if neighbors is not None and collect:
                vals, _, valid = _neighbor_arrays(neighbors, positions, k)
                rank1 = np.where(valid[0, :, 0], vals[0, :, 0], -1)
                hits.append(rank1 == targets)

            tok_nll = -np.log(p)
            total_nll += float(tok_nll.sum())
            total_tokens += n_eval
            if collect:
                nlls.append(tok_nll)
    report = EvalReport(mode=mode, tokens=total_tokens, nll_total=total_nll)
    if collect:
        report.nll = np.concatenate(nlls) if nlls else np.zeros(0)
        if gates_out:
            report.gates = np.concatenate(gates_out)
        if hits:
            report.rank1_hit = np.concatenate(hits)
    return report


def tune_lambda(model, corpus, *, grid=LAMBDA_GRID, eval_cache_len, store=None, encoder=None, neighbor_cache=None, tau=1.0, k=None, log=None):
    """Pick the mixture weight minimizing dev perplexity; ties go to the
    smaller weight. Returns (lambda*, [(lambda, perplexity), ...])."""
    if not grid:
        raise ValueError("lambda grid must be nonempty")
    k = model.config.neighbor_k if k is None else k
    neighbors = _resolve_neighbors(corpus, store, encoder, neighbor_cache, log=log, k=k)
    neighbors = neighbors.truncated(k)

    p_lm_parts, p_knn_parts = [], []
    stream = corpus.ids
    last = len(stream) - 1
    for doc in range(corpus.num_docs):
        cache = model.new_cache(1, max_len=eval_cache_len)
        for lo, hi in _doc_segments(corpus, doc, model.config.context_len):
            h, _ = model.forward(stream[lo:hi][None, :], cache=cache, training=False)
            upper = min(hi, last)
            if upper <= lo:
                continue
            n_eval = upper - lo
            targets = stream[lo + 1 : upper + 1].astype(np.int64)
            log_probs = ad.log_softmax(model.lm_logits(h), axis=-1).data[0, :n_eval]
            p_lm_parts.append(np.exp(log_probs[np.arange(n_eval), targets]))
            positions = np.arange(lo, upper, dtype=np.int64)[None, :]
            vals, scores, valid = _neighbor_arrays(neighbors, positions, k)
            p_knn_parts.append(knn_target_probs(vals[0], scores[0], valid[0], tau, targets))
    p_lm = np.concatenate(p_lm_parts)
    p_knn = np.concatenate(p_knn_parts)

    table = []
    for lam in grid:
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"interpolation weight must be in [0, 1], got {lam}")
        nll = float(-np.log(lam * p_lm + (1.0 - lam) * p_knn).mean())
        table.append((lam, math.exp(nll)))
    best_lam, _ = min(table, key=lambda row: (row[1], row[0]))
    return best_lam, table


@dataclass
class AnalysisResult:
    tokens: int
    gate_mean: float
    gate_hist_edges: np.ndarray  # 21 edges over [0, 1]
    gate_hist_counts: np.ndarray  # 20 bins
    z_window: np.ndarray  # (window, d) gated-combination values for the first tokens
    rank_match_rates: np.ndarray  # (K,) P(neighbor at rank r+1 equals target)
    any_match_rate: float
    score_weighted_match_rate: float

    def lines(self):
        out = [
            f"metric=tokens value={self.tokens}",
            f"metric=gate_mean value={self.gate_mean!r}",
            f"metric=any_match_rate value={self.any_match_rate!r}",
            f"metric=score_weighted_match_rate value={self.score_weighted_match_rate!r}",
        ]
        for r, rate in enumerate(self.rank_match_rates, start=1):
            out.append(f"metric=rank{r}_match_rate value={float(rate)!r}")
        for b, c in enumerate(self.gate_hist_counts):
            out.append(f"metric=gate_hist_bin{b:02d} value={int(c)}")
        return out


def analyze(model, corpus, *, eval_cache_len, store=None, encoder=None, neighbor_cache=None, tau=1.0, k=None, z_window=64, log=None):
    """Gate statistics, a per-dimension window of the combined state, and
    neighbor-vs-target match rates over a split."""
    k = model.config.neighbor_k if k is None else k
    neighbors = _resolve_neighbors(corpus, store, encoder, neighbor_cache, log=log, k=k)
    neighbors = neighbors.truncated(k)

    stream = corpus.ids
    last = len(stream) - 1
    gates_all, z_rows, match = [], [], []
    weighted = []
    for doc in range(corpus.num_docs):
        cache = model.new_cache(1, max_len=eval_cache_len)
        for lo, hi in _doc_segments(corpus, doc, model.config.context_len):
            h, _ = model.forward(stream[lo:hi][None, :], cache=cache, training=False)
            upper = min(hi, last)
            if upper <= lo:
                continue
            n_eval = upper - lo
            targets = stream[lo + 1 : upper + 1].astype(np.int64)
            _, g, z = _gated_log_probs(model, h, np.arange(lo, hi, dtype=np.int64)[None, :], neighbors, k)
            gates_all.append(g.data[0, :n_eval].mean(axis=-1))
            if sum(len(r) for r in z_rows) < z_window:
                z_rows.append(z.data[0, :n_eval])
            positions = np.arange(lo, upper, dtype=np.int64)[None, :]
            vals, scores, valid = _neighbor_arrays(neighbors, positions, k)
            match.append((vals[0] == targets[:, None]) & valid[0])
            weighted.append(knn_target_probs(vals[0], scores[0], valid[0], tau, targets))
    gates = np.concatenate(gates_all)
    matches = np.concatenate(match, axis=0)
    counts, edges = np.histogram(gates, bins=20, range=(0.0, 1.0))
    z_mat = np.concatenate(z_rows, axis=0)[:z_window] if z_rows else np.zeros((0, model.config.d_model))
    return AnalysisResult(
        tokens=int(matches.shape[0]),
        gate_mean=float(gates.mean()),
        gate_hist_edges=edges,
        gate_hist_counts=counts,
        z_window=z_mat,
        rank_match_rates=matches.mean(axis=0),
        any_match_rate=float(matches.any(axis=1).mean()),
        score_weighted_match_rate=float(np.concatenate(weighted).mean()),
    )


def sweep_neighbors(cfg, train_corpus, dev_corpus, neighbors, dev_neighbors, k_list, log=None):
    """Train and evaluate one gated model per neighbor count.

    Caches must have been precomputed at the largest K; smaller K truncates.
    """
    rows = []
    for k in k_list:
        if k > neighbors.k or k > dev_neighbors.k:
            raise ValueError(f"K={k} exceeds cached K={min(neighbors.k, dev_neighbors.k)}")
        sub = cfg.with_updates(neighbor_k=k)
        model, _ = train_gated(
            sub, train_corpus, dev_corpus, neighbors.truncated(k), dev_neighbors.truncated(k), log=log
        )
        report = evaluate(
            model,
            dev_corpus,
            mode="spalm",
            eval_cache_len=cfg.resolved_eval_cache_len,
            neighbor_cache=dev_neighbors.truncated(k),
            k=k,
        )
        rows.append((k, report))
        if log is not None:
            log(f"K={k} dev_ppl={report.perplexity:.3f}")
    return rows


# ---------------------------------------------------------------------------
# train-state persistence (exact resume)
# ---------------------------------------------------------------------------


def save_train_state(trainer, path):
    import io

    model_buf = io.BytesIO()
    write_checkpoint(trainer.model, model_buf)
    blob = model_buf.getvalue()
    rng_state = json.dumps(trainer.rng.bit_generator.state).encode("utf-8")
    with open(path, "wb") as f:
        f.write(TRAIN_STATE_MAGIC)
        f.write(struct.pack("<I", TRAIN_STATE_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        a = trainer.adam
        f.write(struct.pack("<4dQ", a.lr, a.beta1, a.beta2, a.eps, a.step))
        for m, v in zip(a.m, a.v):
            f.write(np.ascontiguousarray(m, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
        f.write(struct.pack("<I", len(rng_state)))
        f.write(rng_state)
        f.write(struct.pack("<3Q", trainer.step, trainer.epoch, trainer.seg))
        f.write(struct.pack("<dI", trainer.best_dev, trainer.bad_evals))
        cache = trainer.cache
        f.write(struct.pack("<QQ", len(cache), cache.tokens_seen))
        for states in cache.states:
            f.write(np.ascontiguousarray(states, dtype="<f8").tobytes())


def load_train_state(path, corpus, cfg, neighbors=None, dev_corpus=None, dev_neighbors=None, log=None):
    from .model import _read_exact

    with open(path, "rb") as f:
        if f.read(4) != TRAIN_STATE_MAGIC:
            raise ValueError("bad train-state magic")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != TRAIN_STATE_VERSION:
            raise ValueError(f"unsupported train-state version {version}")
        (blob_len,) = struct.unpack("<Q", _read_exact(f, 8, "model length"))
        import io

        model = read_checkpoint(io.BytesIO(_read_exact(f, blob_len, "model")))
        trainer = Trainer(
            model, corpus, cfg, neighbors=neighbors, dev_corpus=dev_corpus, dev_neighbors=dev_neighbors, log=log
        )
        lr, b1, b2, eps, step = struct.unpack("<4dQ", _read_exact(f, 40, "adam header"))
        m, v = [], []
        for p in model.param_arrays():
            m.append(np.frombuffer(_read_exact(f, p.size * 8, "adam m"), dtype="<f8").reshape(p.shape).copy())
            v.append(np.frombuffer(_read_exact(f, p.size * 8, "adam v"), dtype="<f8").reshape(p.shape).copy())
        trainer.adam = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=step, m=m, v=v)
        (rng_len,) = struct.unpack("<I", _read_exact(f, 4, "rng length"))
        trainer.rng.bit_generator.state = json.loads(_read_exact(f, rng_len, "rng state").decode("utf-8"))
        trainer.step, trainer.epoch, trainer.seg = struct.unpack("<3Q", _read_exact(f, 24, "cursor"))
        trainer.best_dev, trainer.bad_evals = struct.unpack("<dI", _read_exact(f, 12, "early-stop state"))
        cache_len, tokens_seen = struct.unpack("<QQ", _read_exact(f, 16, "cache header"))
        c = model.config
        for r in range(c.num_layers):
            raw = _read_exact(f, cfg.lanes * cache_len * c.d_model * 8, "cache states")
            trainer.cache.states[r] = np.frombuffer(raw, dtype="<f8").reshape(cfg.lanes, cache_len, c.d_model).copy()
        trainer.cache.tokens_seen = tokens_seen
    return trainer
