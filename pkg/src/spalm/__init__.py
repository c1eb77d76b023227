"""Semiparametric language model: a transformer with an XL-style short-term
cache and a retrieval-based long-term episodic memory, fused per token by a
learned context-dependent gate."""

from .autodiff import Tensor, backward, stop_gradient
from .config import RunConfig
from .corpus import TokenizedCorpus, Vocabulary, build_vocab, detokenize, segment_stream, tokenize
from .fusion import aggregate_neighbors, combine, gate, interpolate, knn_distribution, output_distribution
from .memory import (
    EpisodicStore,
    NeighborCache,
    NeighborSet,
    ann_topk,
    build_store,
    exact_topk,
    load_neighbor_cache,
    load_store,
    save_neighbor_cache,
    save_store,
)
from .model import ModelConfig, TransformerLM, XLCache, load_checkpoint, save_checkpoint
from .optim import AdamState, adam_step
from .pipeline import (
    EvalReport,
    analyze,
    evaluate,
    precompute_neighbors,
    pretrain,
    sweep_neighbors,
    train_gated,
    tune_lambda,
)

__all__ = [name for name in dir() if not name.startswith("_")]
