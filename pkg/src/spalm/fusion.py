"""Per-token fusion of the local hidden state with retrieved neighbors.

Retrieved neighbor tokens are embedded with the shared embedding matrix and
aggregated by attention with the untransformed hidden state as the query.
A learned gate then mixes the aggregate with the hidden state before the
tied-embedding softmax. The kNN interpolation baseline lives here too: a
neighbor-only distribution built from retrieval scores, mixed with the base
model at a corpus-level weight.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_INF_MASK = -1e30


def aggregate_neighbors(h, neighbor_ids, W):
    """Attention-weighted combination of neighbor token embeddings.

    h: (d,) array or Tensor, the attention query (used untransformed).
    neighbor_ids: length-K int sequence of retrieved token ids.
    W: (V, d) embedding matrix (array or Tensor).

    Returns (m, alpha, has_neighbors); K=0 yields the zero vector and a
    False flag instead of an error.
    """
    h = h if isinstance(h, Tensor) else Tensor(h)
    W = W if isinstance(W, Tensor) else Tensor(W)
    ids = np.asarray(neighbor_ids, dtype=np.int64)
    d = h.shape[-1]
    if ids.size == 0:
        return Tensor(np.zeros(d)), Tensor(np.zeros(0)), False
    m, alpha, valid = aggregate_neighbors_batch(
        ad.reshape(h, (1, 1, d)), ids.reshape(1, 1, -1), W, np.ones((1, 1, ids.size), dtype=bool)
    )
    return ad.reshape(m, (d,)), ad.reshape(alpha, (ids.size,)), True


def aggregate_neighbors_batch(h, neighbor_ids, W, valid):
    """Batched neighbor aggregation.

    h: (B, n, d) tensor; neighbor_ids: (B, n, K) ints (invalid slots may hold
    any in-range id); valid: (B, n, K) bool. Rows with no valid neighbor get
    a zero aggregate. Returns (m (B,n,d), alpha (B,n,K), any_valid (B,n)).
    """
    B, n, d = h.shape
    K = neighbor_ids.shape[-1]
    ids = np.where(valid, neighbor_ids, 0).astype(np.int64)
    y = ad.gather_rows(W, ids)  # (B,n,K,d)
    scores = ad.tensor_sum(ad.mul(y, ad.reshape(h, (B, n, 1, d))), axis=-1)  # (B,n,K)
    mask = np.where(valid, 0.0, NEG_INF_MASK)
    alpha = ad.softmax(scores + Tensor(mask), axis=-1)
    m = ad.tensor_sum(ad.mul(y, ad.reshape(alpha, (B, n, K, 1))), axis=-2)  # (B,n,d)
    any_valid = valid.any(axis=-1)
    m = ad.mul(m, Tensor(any_valid.astype(np.float64)[..., None]))
    return m, alpha, any_valid


def gate(h, w_g):
    """Context-dependent gate sigmoid(w_g . h).

    For a (d,) hidden state and (d,) weight this is a scalar in (0,1); the
    batched form maps (B,n,d) to (B,n,1). A (d,d) weight gives the optional
    per-dimension gate (B,n,d).
    """
    h_t = h if isinstance(h, Tensor) else Tensor(h)
    w_t = w_g if isinstance(w_g, Tensor) else Tensor(w_g)
    if h_t.ndim == 1:
        return ad.sigmoid(ad.tensor_sum(ad.mul(h_t, w_t)))
    B, n, d = h_t.shape
    flat = ad.reshape(h_t, (B * n, d))
    if w_t.ndim == 1:
        out = ad.matmul(flat, ad.reshape(w_t, (d, 1)))
        return ad.sigmoid(ad.reshape(out, (B, n, 1)))
    out = ad.matmul(flat, w_t)
    return ad.sigmoid(ad.reshape(out, (B, n, d)))


def combine(h, m, g):
    """z = g * h + (1 - g) * m, with the gate broadcast across dimensions."""
    h_t = h if isinstance(h, Tensor) else Tensor(h)
    m_t = m if isinstance(m, Tensor) else Tensor(m)
    g_t = g if isinstance(g, Tensor) else Tensor(g)
    if h_t.shape != m_t.shape:
        raise ValueError(f"shape mismatch: h {h_t.shape} vs m {m_t.shape}")
    one_minus = ad.sub(Tensor(1.0), g_t)
    return ad.add(ad.mul(g_t, h_t), ad.mul(one_minus, m_t))


def output_distribution(z, W):
    """softmax(W z) over the vocabulary, tied to the embedding matrix."""
    z_t = z if isinstance(z, Tensor) else Tensor(z)
    W_t = W if isinstance(W, Tensor) else Tensor(W)
    if z_t.ndim == 1:
        logits = ad.matmul(ad.reshape(z_t, (1, -1)), ad.transpose(W_t, (1, 0)))
        return ad.reshape(ad.softmax(logits, axis=-1), (W_t.shape[0],))
    lead = z_t.shape[:-1]
    flat = ad.reshape(z_t, (int(np.prod(lead)), z_t.shape[-1]))
    probs = ad.softmax(ad.matmul(flat, ad.transpose(W_t, (1, 0))), axis=-1)
    return ad.reshape(probs, (*lead, W_t.shape[0]))


def knn_distribution(values, scores, tau, vocab_size):
    """Neighbor-only next-token distribution.

    p(v) is proportional to the sum of exp(score/tau) over neighbors whose
    value is v; tokens outside the neighbor set get zero mass. Raises on an
    empty neighbor set, where the distribution is undefined.
    """
    values = np.asarray(values, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if values.size == 0:
        raise ValueError("knn distribution undefined for an empty neighbor set")
    if tau <= 0:
        raise ValueError("tau must be positive")
    w = np.exp((scores - scores.max()) / tau)
    p = np.zeros(vocab_size)
    np.add.at(p, values, w)
    return p / p.sum()


def knn_target_probs(values, scores, valid, tau, targets):
    """p_knn(target) for a batch of positions.

    values/scores/valid: (n, K); targets: (n,). Positions with no valid
    neighbor are an error, matching the K=0 contract of knn_distribution.
    """
    values = np.asarray(values, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    targets = np.asarray(targets, dtype=np.int64)
    if not valid.any(axis=1).all():
        raise ValueError("knn distribution undefined for an empty neighbor set")
    if tau <= 0:
        raise ValueError("tau must be positive")
    safe = np.where(valid, scores, -np.inf)
    shift = safe.max(axis=1, keepdims=True)
    w = np.where(valid, np.exp((safe - shift) / tau), 0.0)
    hit = w * (values == targets[:, None])
    return hit.sum(axis=1) / w.sum(axis=1)


def interpolate(p_lm, p_knn, lam):
    """Corpus-level mixture lam * p_lm + (1 - lam) * p_knn."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"interpolation weight must be in [0, 1], got {lam}")
    p_lm = np.asarray(p_lm, dtype=np.float64)
    p_knn = np.asarray(p_knn, dtype=np.float64)
    return lam * p_lm + (1.0 - lam) * p_knn
