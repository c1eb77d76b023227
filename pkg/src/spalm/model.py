"""Decoder-only transformer with an XL-style cached extended context.

Attention uses the relative-position decomposition: content and position
score terms plus two learned global bias vectors, with sinusoidal relative
embeddings passed through a learned per-layer projection. Residual blocks
are pre-layer-norm. Cached states from the previous segment join the current
segment as extra keys/values only; they are plain arrays, so no gradient
ever flows into them, while the projections applied to them still train.

Checkpoint format (little-endian, documented here as the reference):
    magic   b"SPLM"
    u32     format version (1)
    config  num_layers u32, d_model u32, num_heads u32, context_len u32,
            cache_len u32, vocab_size u32, neighbor_k u32, ffn_mult u32,
            gated u8, per_dim_gate u8, dropout f64
    u32     parameter count
    then per parameter, in the fixed order of `TransformerLM.param_names`:
            name_len u32, name bytes (utf-8), rank u32, dims u32 x rank,
            raw float64 data
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"SPLM"
CHECKPOINT_VERSION = 1

MASK_VALUE = -1e30  # additive mask; large but finite so softmax input stays finite


@dataclass
class ModelConfig:
    num_layers: int
    d_model: int
    num_heads: int
    context_len: int  # N: max tokens per segment
    cache_len: int  # M: max cached states per layer at training time
    vocab_size: int
    neighbor_k: int = 4
    dropout: float = 0.25
    ffn_mult: int = 4
    gated: bool = False
    per_dim_gate: bool = False

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.context_len < 1:
            raise ValueError("context_len must be >= 1")
        if self.cache_len < 0:
            raise ValueError("cache_len must be >= 0")
        if self.neighbor_k < 0:
            raise ValueError("neighbor_k must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def head_dim(self):
        return self.d_model // self.num_heads


class XLCache:
    """Per-layer ring of previous hidden states, oldest evicted first.

    States live here as plain float64 arrays: attention treats them as
    constants, which is exactly the stop-gradient contract.
    """

    def __init__(self, num_layers, max_len, batch, d_model):
        self.max_len = int(max_len)
        self.batch = batch
        self.states = [np.zeros((batch, 0, d_model)) for _ in range(num_layers)]
        self.tokens_seen = 0  # absolute stream position bookkeeping

    def __len__(self):
        return self.states[0].shape[1]

    @property
    def oldest_position(self):
        return self.tokens_seen - len(self)

    def update(self, layer_inputs):
        """Append one segment's per-layer input states, trimming to max_len."""
        n = layer_inputs[0].shape[1]
        for r, new in enumerate(layer_inputs):
            if self.max_len == 0:
                continue
            merged = np.concatenate([self.states[r], new], axis=1)
            self.states[r] = merged[:, -self.max_len :, :]
        self.tokens_seen += n

    def reset(self):
        for r in range(len(self.states)):
            self.states[r] = self.states[r][:, :0, :]
        self.tokens_seen = 0


_REL_TABLE_CACHE = {}
_MASK_CACHE = {}
_DIST_IDX_CACHE = {}


def relative_embedding_table(length, d):
    """Sinusoidal embeddings of relative distances 0..length-1."""
    key = (length, d)
    cached = _REL_TABLE_CACHE.get(key)
    if cached is not None:
        return cached
    dist = np.arange(length, dtype=np.float64)
    inv_freq = 1.0 / (10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d))
    ang = dist[:, None] * inv_freq[None, :]
    table = np.zeros((length, d))
    table[:, 0::2] = np.sin(ang)
    table[:, 1::2] = np.cos(ang)
    _REL_TABLE_CACHE[key] = table
    return table


def _causal_mask(n, m):
    key = (n, m)
    cached = _MASK_CACHE.get(key)
    if cached is None:
        j = np.arange(m + n)[None, :]
        i = np.arange(n)[:, None]
        cached = np.where(j > m + i, MASK_VALUE, 0.0)
        _MASK_CACHE[key] = cached
    return cached


def _distance_index(n, m):
    key = (n, m)
    cached = _DIST_IDX_CACHE.get(key)
    if cached is None:
        total = m + n
        j = np.arange(total)[None, :]
        i = np.arange(n)[:, None]
        cached = np.clip(m + i - j, 0, total - 1).astype(np.int64)
        _DIST_IDX_CACHE[key] = cached
    return cached


class TransformerLM:
    """Transformer LM with tied embeddings and optional retrieval gate parameter."""

    def __init__(self, config, rng=None, init_std=0.02):
        self.config = config
        self.params = {}
        if rng is None:
            rng = np.random.default_rng(0)
        c = config
        dh = c.head_dim
        f = c.ffn_mult * c.d_model

        def normal(name, shape):
            self.params[name] = ad.parameter(rng.normal(0.0, init_std, size=shape))

        def const(name, value):
            self.params[name] = ad.parameter(value)

        normal("embed.W", (c.vocab_size, c.d_model))
        for r in range(c.num_layers):
            const(f"layers.{r}.ln1.g", np.ones(c.d_model))
            const(f"layers.{r}.ln1.b", np.zeros(c.d_model))
            normal(f"layers.{r}.attn.wq", (c.d_model, c.d_model))
            normal(f"layers.{r}.attn.wk", (c.d_model, c.d_model))
            normal(f"layers.{r}.attn.wv", (c.d_model, c.d_model))
            normal(f"layers.{r}.attn.wo", (c.d_model, c.d_model))
            normal(f"layers.{r}.attn.wr", (c.d_model, c.d_model))
            normal(f"layers.{r}.attn.u", (c.num_heads, dh))
            normal(f"layers.{r}.attn.v", (c.num_heads, dh))
            const(f"layers.{r}.ln2.g", np.ones(c.d_model))
            const(f"layers.{r}.ln2.b", np.zeros(c.d_model))
            normal(f"layers.{r}.ffn.w1", (c.d_model, f))
            const(f"layers.{r}.ffn.b1", np.zeros(f))
            normal(f"layers.{r}.ffn.w2", (f, c.d_model))
            const(f"layers.{r}.ffn.b2", np.zeros(c.d_model))
        const("final_ln.g", np.ones(c.d_model))
        const("final_ln.b", np.zeros(c.d_model))
        if c.gated:
            if c.per_dim_gate:
                const("gate.w_g", np.zeros((c.d_model, c.d_model)))
            else:
                const("gate.w_g", np.zeros(c.d_model))

    @property
    def param_names(self):
        return list(self.params.keys())

    def param_arrays(self):
        return [self.params[n].data for n in self.param_names]

    def num_params(self):
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads(self):
        return [self.params[n].grad for n in self.param_names]

    def set_param_arrays(self, arrays):
        for name, arr in zip(self.param_names, arrays):
            p = self.params[name]
            if p.data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.data = arr

    def new_cache(self, batch, max_len=None):
        max_len = self.config.cache_len if max_len is None else max_len
        return XLCache(self.config.num_layers, max_len, batch, self.config.d_model)

    # ------------------------------------------------------------------
    # forward pieces
    # ------------------------------------------------------------------

    def embed(self, ids):
        """Input embedding: rows of the tied matrix scaled by sqrt(d)."""
        ids = np.asarray(ids)
        if ids.size and int(ids.max()) >= self.config.vocab_size:
            raise ValueError(f"token id {int(ids.max())} >= vocab size {self.config.vocab_size}")
        if ids.size and int(ids.min()) < 0:
            raise ValueError("negative token id")
        return ad.gather_rows(self.params["embed.W"], ids) * float(np.sqrt(self.config.d_model))

    def attention_sublayer(self, r, x, cached, training=False, rng=None):
        """One relative-position attention sublayer (pre-residual output).

        x: (B, n, d) tensor of block inputs; cached: (B, m, d) array of
        previous-segment block inputs, keys/values only.
        """
        c = self.config
        B, n, d = x.shape
        m = cached.shape[1]
        total = m + n
        H, dh = c.num_heads, c.head_dim
        p = self.params
        g1, b1 = p[f"layers.{r}.ln1.g"], p[f"layers.{r}.ln1.b"]

        xn = ad.layer_norm(x, g1, b1)
        if m > 0:
            if cached.shape[0] != B or cached.shape[2] != d:
                raise ValueError(f"cache shape {cached.shape} incompatible with input {x.shape}")
            en = ad.layer_norm(Tensor(cached), g1, b1)
            kv_in = ad.concat([en, xn], axis=1)
        else:
            kv_in = xn

        def project(t, w, length):
            flat = ad.matmul(ad.reshape(t, (B * length, d)), w)
            return ad.transpose(ad.reshape(flat, (B, length, H, dh)), (0, 2, 1, 3))

        q = project(xn, p[f"layers.{r}.attn.wq"], n)  # (B,H,n,dh)
        k = project(kv_in, p[f"layers.{r}.attn.wk"], total)  # (B,H,total,dh)
        v = project(kv_in, p[f"layers.{r}.attn.wv"], total)

        u = ad.reshape(p[f"layers.{r}.attn.u"], (1, H, 1, dh))
        vbias = ad.reshape(p[f"layers.{r}.attn.v"], (1, H, 1, dh))

        content = ad.matmul(q + u, ad.transpose(k, (0, 1, 3, 2)))  # (B,H,n,total)

        rel = Tensor(relative_embedding_table(total, d))
        r_proj = ad.matmul(rel, p[f"layers.{r}.attn.wr"])  # (total, d)
        r_heads = ad.transpose(ad.reshape(r_proj, (total, H, dh)), (1, 2, 0))  # (H,dh,total)
        pos_by_dist = ad.matmul(q + vbias, r_heads)  # (B,H,n,total), last axis = distance
        position = ad.gather_last(pos_by_dist, _distance_index(n, m))

        scores = (content + position) * (1.0 / np.sqrt(dh)) + Tensor(_causal_mask(n, m))
        attn = ad.softmax(scores, axis=-1)
        attn = ad.dropout(attn, c.dropout, rng, training)

        ctx = ad.matmul(attn, v)  # (B,H,n,dh)
        merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B * n, d))
        out = ad.matmul(merged, p[f"layers.{r}.attn.wo"])
        return ad.reshape(out, (B, n, d)), attn

    def _ffn(self, r, x, training, rng):
        c = self.config
        B, n, d = x.shape
        p = self.params
        y = ad.layer_norm(x, p[f"layers.{r}.ln2.g"], p[f"layers.{r}.ln2.b"])
        y = ad.reshape(y, (B * n, d))
        y = ad.relu(ad.matmul(y, p[f"layers.{r}.ffn.w1"]) + p[f"layers.{r}.ffn.b1"])
        y = ad.matmul(y, p[f"layers.{r}.ffn.w2"]) + p[f"layers.{r}.ffn.b2"]
        return ad.reshape(y, (B, n, d))

    def forward(self, ids, cache=None, training=False, rng=None):
        """Encode one segment. Returns (final hidden states (B,n,d), cache).

        `cache` is updated in place with this segment's layer inputs. The
        segment must not exceed the configured context length.
        """
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        B, n = ids.shape
        if n > self.config.context_len:
            raise ValueError(f"segment length {n} exceeds context length {self.config.context_len}")
        c = self.config

        x = self.embed(ids)
        x = ad.dropout(x, c.dropout, rng, training)

        new_cache_states = []
        for r in range(c.num_layers):
            cached = cache.states[r] if cache is not None else np.zeros((B, 0, c.d_model))
            new_cache_states.append(x.data)  # layer input, detached by construction
            attn_out, _ = self.attention_sublayer(r, x, cached, training, rng)
            x = x + ad.dropout(attn_out, c.dropout, rng, training)
            x = x + ad.dropout(self._ffn(r, x, training, rng), c.dropout, rng, training)

        h = ad.layer_norm(x, self.params["final_ln.g"], self.params["final_ln.b"])
        if cache is not None:
            cache.update(new_cache_states)
        return h, cache

    def lm_logits(self, h):
        """Tied-embedding output logits W @ h for hidden states of shape (..., d)."""
        W = self.params["embed.W"]
        lead = h.shape[:-1]
        d = h.shape[-1]
        flat = h if h.ndim == 2 else ad.reshape(h, (int(np.prod(lead)), d))
        if h.ndim == 1:
            flat = ad.reshape(h, (1, d))
        logits = ad.matmul(flat, ad.transpose(W, (1, 0)))
        if h.ndim == 1:
            return ad.reshape(logits, (self.config.vocab_size,))
        if h.ndim == 2:
            return logits
        return ad.reshape(logits, (*lead, self.config.vocab_size))

    def encode(self, segment_ids, cache):
        """Spec alias: run one segment through all layers against the cache."""
        return self.forward(segment_ids, cache=cache, training=False)


def nll_loss(log_probs, targets, mask):
    """Masked mean negative log-likelihood in nats per token.

    log_probs: (..., V) tensor of log-probabilities; targets/mask match the
    leading shape. Returns (loss tensor, token count).
    """
    picked = ad.select_last(log_probs, np.asarray(targets))
    mask = np.asarray(mask, dtype=np.float64)
    count = float(mask.sum())
    if count == 0:
        raise ValueError("loss mask selects no tokens")
    total = ad.tensor_sum(picked * Tensor(mask))
    return ad.neg(total) * (1.0 / count), count


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------


def save_checkpoint(model, path):
    with open(path, "wb") as f:
        write_checkpoint(model, f)


def write_checkpoint(model, f):
    f.write(CHECKPOINT_MAGIC)
    f.write(struct.pack("<I", CHECKPOINT_VERSION))
    c = model.config
    f.write(
        struct.pack(
            "<8I2Bd",
            c.num_layers,
            c.d_model,
            c.num_heads,
            c.context_len,
            c.cache_len,
            c.vocab_size,
            c.neighbor_k,
            c.ffn_mult,
            int(c.gated),
            int(c.per_dim_gate),
            c.dropout,
        )
    )
    names = model.param_names
    f.write(struct.pack("<I", len(names)))
    for name in names:
        raw = name.encode("utf-8")
        arr = model.params[name].data
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(f, size, what):
    buf = f.read(size)
    if len(buf) != size:
        raise ValueError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path):
    with open(path, "rb") as f:
        return read_checkpoint(f)


def read_checkpoint(f):
    magic = _read_exact(f, 4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    fields = struct.unpack("<8I2Bd", _read_exact(f, 8 * 4 + 2 + 8, "config"))
    config = ModelConfig(
        num_layers=fields[0],
        d_model=fields[1],
        num_heads=fields[2],
        context_len=fields[3],
        cache_len=fields[4],
        vocab_size=fields[5],
        neighbor_k=fields[6],
        ffn_mult=fields[7],
        gated=bool(fields[8]),
        per_dim_gate=bool(fields[9]),
        dropout=fields[10],
    )
    model = TransformerLM(config, rng=np.random.default_rng(0))
    (count,) = struct.unpack("<I", _read_exact(f, 4, "parameter count"))
    expected = model.param_names
    if count != len(expected):
        raise ValueError(f"checkpoint has {count} parameters, expected {len(expected)}")
    for name in expected:
        (name_len,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
        got = _read_exact(f, name_len, "name").decode("utf-8")
        if got != name:
            raise ValueError(f"parameter order mismatch: expected {name}, found {got}")
        (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
        dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
        want = model.params[name].data.shape
        if tuple(dims) != want:
            raise ValueError(f"shape mismatch for {name}: file {dims}, model {want}")
        n_bytes = int(np.prod(dims)) * 8 if rank else 8
        raw = _read_exact(f, n_bytes, f"data for {name}")
        model.params[name].data = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    return model
