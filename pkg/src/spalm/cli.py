"""Command-line pipeline: corpus generation through training to analysis.

Every subcommand accepts --config (key=value file) and repeated --set
overrides, writes a manifest into its output directory, and reports metrics
as line-delimited `metric=<name> value=<value> ...` records.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import corpus as corpus_mod
from . import pipeline, synthetic
from .config import resolve_config, write_manifest
from .memory import build_store, load_neighbor_cache, load_store, save_neighbor_cache, save_store
from .model import load_checkpoint, save_checkpoint


def _log(msg):
    print(msg, flush=True)


def _add_common(p):
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    p.add_argument("--out", required=True, help="output directory")


def _cfg(args):
    return resolve_config(args.config, args.set)


def _load_vocab_and_corpus(vocab_path, split_path):
    vocab = corpus_mod.Vocabulary.load(vocab_path)
    return vocab, corpus_mod.load_corpus(split_path, vocab)


def _write_history(out_dir, history):
    path = os.path.join(out_dir, "history.txt")
    with open(path, "w") as f:
        for step, value in history.steps:
            f.write(f"metric=train_nll step={step} value={value!r}\n")
        for step, value in history.dev_evals:
            f.write(f"metric=dev_nll step={step} value={value!r}\n")


def cmd_gen_synthetic(args):
    cfg = _cfg(args)
    scfg = synthetic.SynthConfig(
        train_tokens=args.train_tokens,
        dev_tokens=args.dev_tokens,
        test_tokens=args.test_tokens,
        entity_pool=args.entity_pool,
        entity_len=args.entity_len,
        entities_per_doc=args.entities_per_doc,
        cycles_per_doc=args.cycles_per_doc,
        filler_run=args.filler_run,
        seed=args.seed if args.seed is not None else cfg.seed,
    )
    paths = synthetic.write_splits(scfg, args.out)
    write_manifest(args.out, cfg, {}, extra={f"synth.{k}": v for k, v in vars(scfg).items()})
    for name, path in paths.items():
        _log(f"wrote {name}: {path} ({corpus_mod.split_token_count(path, 'word')} tokens)")


def cmd_pretrain(args):
    cfg = _cfg(args)
    os.makedirs(args.out, exist_ok=True)
    with open(args.train, encoding="utf-8") as f:
        text = f.read()
    vocab = corpus_mod.build_vocab(text, cfg.level, min_count=args.min_count)
    vocab_path = os.path.join(args.out, "vocab.txt")
    vocab.save(vocab_path)
    cfg = cfg.with_updates(vocab_size=vocab.size)
    train = corpus_mod.load_corpus(args.train, vocab)
    dev = corpus_mod.load_corpus(args.dev, vocab)
    write_manifest(args.out, cfg, {"train": args.train, "dev": args.dev})
    model, history = pipeline.pretrain(cfg, train, dev, log=_log)
    ckpt = os.path.join(args.out, "encoder.splm")
    save_checkpoint(model, ckpt)
    _write_history(args.out, history)
    _log(f"saved encoder checkpoint: {ckpt} ({model.num_params()} params, vocab {vocab.size})")


def cmd_build_memory(args):
    cfg = _cfg(args)
    os.makedirs(args.out, exist_ok=True)
    vocab, corpus = _load_vocab_and_corpus(args.vocab, args.corpus)
    encoder = load_checkpoint(args.encoder)
    store = build_store(corpus, encoder, metric=args.metric)
    path = os.path.join(args.out, "store.spkv")
    save_store(store, path)
    write_manifest(args.out, cfg, {"corpus": args.corpus, "vocab": args.vocab, "encoder": args.encoder})
    _log(f"wrote store: {path} ({len(store)} records, dim {store.dim}, metric {store.metric})")


def cmd_precompute_neighbors(args):
    cfg = _cfg(args)
    os.makedirs(args.out, exist_ok=True)
    store = load_store(args.store)
    vocab, corpus = _load_vocab_and_corpus(args.vocab, args.corpus)
    if cfg.precompute_method == "ann":
        store.build_ann(
            n_lists=cfg.ann_lists,
            n_probe=cfg.ann_probes,
            pq_subquantizers=cfg.ann_pq,
            kmeans_iters=cfg.kmeans_iters,
            seed=cfg.seed,
        )
    window = cfg.resolved_exclude_window if args.self_exclude else None
    if args.queries_from == "store":
        queries = store.keys
        positions = np.arange(len(store), dtype=np.int64)
        cache = pipeline.precompute_neighbors(
            store,
            queries,
            cfg.neighbor_k,
            query_positions=positions,
            exclude_window=window,
            method=cfg.precompute_method,
            chunk=cfg.chunk,
            workers=cfg.workers,
            log=_log,
        )
    else:
        encoder = load_checkpoint(args.encoder)
        cache = pipeline.neighbors_for_corpus(
            store,
            corpus,
            encoder,
            cfg.neighbor_k,
            method=cfg.precompute_method,
            exclude_window=window,
            chunk=cfg.chunk,
            workers=cfg.workers,
            log=_log,
        )
    path = os.path.join(args.out, "neighbors.spnn")
    save_neighbor_cache(cache, path)
    inputs = {"store": args.store, "corpus": args.corpus, "vocab": args.vocab}
    if args.encoder:
        inputs["encoder"] = args.encoder
    write_manifest(args.out, cfg, inputs)
    _log(f"wrote neighbor cache: {path} ({len(cache)} rows, K={cache.k})")


def cmd_train(args):
    cfg = _cfg(args)
    os.makedirs(args.out, exist_ok=True)
    vocab = corpus_mod.Vocabulary.load(args.vocab)
    cfg = cfg.with_updates(vocab_size=vocab.size)
    train = corpus_mod.load_corpus(args.train, vocab)
    dev = corpus_mod.load_corpus(args.dev, vocab)
    neighbors = load_neighbor_cache(args.neighbors)
    dev_neighbors = load_neighbor_cache(args.dev_neighbors) if args.dev_neighbors else None
    encoder = load_checkpoint(args.encoder) if (args.encoder and cfg.warm_start) else None
    inputs = {"train": args.train, "dev": args.dev, "vocab": args.vocab, "neighbors": args.neighbors}
    if args.dev_neighbors:
        inputs["dev_neighbors"] = args.dev_neighbors
    if args.encoder:
        inputs["encoder"] = args.encoder
    write_manifest(args.out, cfg, inputs, extra={"warm_start": cfg.warm_start})
    model, history = pipeline.train_gated(
        cfg, train, dev, neighbors, dev_neighbors=dev_neighbors, encoder=encoder, log=_log
    )
    ckpt = os.path.join(args.out, "spalm.splm")
    save_checkpoint(model, ckpt)
    _write_history(args.out, history)
    _log(f"saved gated checkpoint: {ckpt}")


def cmd_eval(args):
    cfg = _cfg(args)
    os.makedirs(args.out, exist_ok=True)
    vocab, corpus = _load_vocab_and_corpus(args.vocab, args.split)
    model = load_checkpoint(args.model)
    store = load_store(args.store) if args.store else None
    encoder = load_checkpoint(args.encoder) if args.encoder else None
    neighbors = load_neighbor_cache(args.neighbors) if args.neighbors else None
    report = pipeline.evaluate(
        model,
        corpus,
        mode=args.mode,
        eval_cache_len=cfg.resolved_eval_cache_len,
        store=store,
        encoder=encoder,
        neighbor_cache=neighbors,
        lam=args.interp_lambda,
        tau=cfg.knn_tau,
        k=cfg.neighbor_k,
        force_gate=args.force_gate,
        log=_log,
    )
    path = os.path.join(args.out, "report.txt")
    report.write(path)
    inputs = {"model": args.model, "split": args.split, "vocab": args.vocab}
    for name, p in (("store", args.store), ("encoder", args.encoder), ("neighbors", args.neighbors)):
        if p:
            inputs[name] = p
    write_manifest(args.out, cfg, inputs, extra={"mode": args.mode})
    for line in report.lines():
        _log(line)


def cmd_tune_lambda(args):
    cfg = _cfg(args)
    os.makedirs(args.out, exist_ok=True)
    vocab, corpus = _load_vocab_and_corpus(args.vocab, args.split)
    model = load_checkpoint(args.model)
    store = load_store(args.store) if args.store else None
    encoder = load_checkpoint(args.encoder) if args.encoder else None
    neighbors = load_neighbor_cache(args.neighbors) if args.neighbors else None
    grid = [float(x) for x in args.grid.split(",")] if args.grid else list(pipeline.LAMBDA_GRID)
    best, table = pipeline.tune_lambda(
        model,
        corpus,
        grid=grid,
        eval_cache_len=cfg.resolved_eval_cache_len,
        store=store,
        encoder=encoder,
        neighbor_cache=neighbors,
        tau=cfg.knn_tau,
        k=cfg.neighbor_k,
        log=_log,
    )
    path = os.path.join(args.out, "lambda.txt")
    with open(path, "w") as f:
        f.write(f"metric=lambda_star value={best!r}\n")
        for lam, ppl in table:
            f.write(f"metric=dev_perplexity lambda={lam!r} value={ppl!r}\n")
    inputs = {"model": args.model, "split": args.split, "vocab": args.vocab}
    write_manifest(args.out, cfg, inputs)
    _log(f"lambda*={best} (grid {grid})")


def cmd_analyze(args):
    cfg = _cfg(args)
    os.makedirs(args.out, exist_ok=True)
    vocab, corpus = _load_vocab_and_corpus(args.vocab, args.split)
    model = load_checkpoint(args.model)
    store = load_store(args.store) if args.store else None
    encoder = load_checkpoint(args.encoder) if args.encoder else None
    neighbors = load_neighbor_cache(args.neighbors) if args.neighbors else None
    result = pipeline.analyze(
        model,
        corpus,
        eval_cache_len=cfg.resolved_eval_cache_len,
        store=store,
        encoder=encoder,
        neighbor_cache=neighbors,
        tau=cfg.knn_tau,
        k=cfg.neighbor_k,
        z_window=args.z_window,
        log=_log,
    )
    path = os.path.join(args.out, "analysis.txt")
    with open(path, "w") as f:
        for line in result.lines():
            f.write(line + "\n")
    np.save(os.path.join(args.out, "z_window.npy"), result.z_window)
    write_manifest(args.out, cfg, {"model": args.model, "split": args.split, "vocab": args.vocab})
    for line in result.lines():
        _log(line)


def cmd_sweep_k(args):
    cfg = _cfg(args)
    os.makedirs(args.out, exist_ok=True)
    vocab = corpus_mod.Vocabulary.load(args.vocab)
    cfg = cfg.with_updates(vocab_size=vocab.size)
    train = corpus_mod.load_corpus(args.train, vocab)
    dev = corpus_mod.load_corpus(args.dev, vocab)
    neighbors = load_neighbor_cache(args.neighbors)
    dev_neighbors = load_neighbor_cache(args.dev_neighbors)
    k_list = [int(x) for x in args.ks.split(",")]
    rows = pipeline.sweep_neighbors(cfg, train, dev, neighbors, dev_neighbors, k_list, log=_log)
    path = os.path.join(args.out, "sweep.txt")
    with open(path, "w") as f:
        for k, report in rows:
            f.write(f"metric=dev_perplexity k={k} value={report.perplexity!r}\n")
    write_manifest(args.out, cfg, {"train": args.train, "dev": args.dev, "vocab": args.vocab})


def build_parser():
    p = argparse.ArgumentParser(prog="spalm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="write the seeded synthetic long-range-repeat corpus")
    _add_common(g)
    g.add_argument("--train-tokens", type=int, default=1_000_000)
    g.add_argument("--dev-tokens", type=int, default=32_768)
    g.add_argument("--test-tokens", type=int, default=32_768)
    g.add_argument("--entity-pool", type=int, default=1024)
    g.add_argument("--entity-len", type=int, default=8)
    g.add_argument("--entities-per-doc", type=int, default=6)
    g.add_argument("--cycles-per-doc", type=int, default=4)
    g.add_argument("--filler-run", type=int, default=40)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=cmd_gen_synthetic)

    g = sub.add_parser("pretrain", help="train the base transformer / retrieval encoder")
    _add_common(g)
    g.add_argument("--train", required=True)
    g.add_argument("--dev", required=True)
    g.add_argument("--min-count", type=int, default=1)
    g.set_defaults(func=cmd_pretrain)

    g = sub.add_parser("build-memory", help="build the episodic store over a corpus")
    _add_common(g)
    g.add_argument("--corpus", required=True)
    g.add_argument("--vocab", required=True)
    g.add_argument("--encoder", required=True)
    g.add_argument("--metric", choices=("ip", "l2"), default="ip")
    g.set_defaults(func=cmd_build_memory)

    g = sub.add_parser("precompute-neighbors", help="freeze per-position top-K neighbors")
    _add_common(g)
    g.add_argument("--store", required=True)
    g.add_argument("--corpus", required=True)
    g.add_argument("--vocab", required=True)
    g.add_argument("--encoder", default=None)
    g.add_argument("--queries-from", choices=("store", "encode"), default="store")
    g.add_argument("--self-exclude", action="store_true", help="apply the training-time exclusion window")
    g.set_defaults(func=cmd_precompute_neighbors)

    g = sub.add_parser("train", help="train the gated retrieval model")
    _add_common(g)
    g.add_argument("--train", required=True)
    g.add_argument("--dev", required=True)
    g.add_argument("--vocab", required=True)
    g.add_argument("--neighbors", required=True)
    g.add_argument("--dev-neighbors", default=None)
    g.add_argument("--encoder", default=None, help="warm-start source (with warm_start=true)")
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_common(g)
    g.add_argument("--model", required=True)
    g.add_argument("--split", required=True)
    g.add_argument("--vocab", required=True)
    g.add_argument("--mode", choices=pipeline.EVAL_MODES, required=True)
    g.add_argument("--store", default=None)
    g.add_argument("--encoder", default=None)
    g.add_argument("--neighbors", default=None)
    g.add_argument("--interp-lambda", type=float, default=None)
    g.add_argument("--force-gate", type=float, default=None)
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("tune-lambda", help="grid-search the interpolation weight on a dev split")
    _add_common(g)
    g.add_argument("--model", required=True)
    g.add_argument("--split", required=True)
    g.add_argument("--vocab", required=True)
    g.add_argument("--store", default=None)
    g.add_argument("--encoder", default=None)
    g.add_argument("--neighbors", default=None)
    g.add_argument("--grid", default=None, help="comma-separated weights; default 0.05,0.1,0.2,0.3,0.4")
    g.set_defaults(func=cmd_tune_lambda)

    g = sub.add_parser("analyze", help="gate histogram, combined-state window, neighbor match rates")
    _add_common(g)
    g.add_argument("--model", required=True)
    g.add_argument("--split", required=True)
    g.add_argument("--vocab", required=True)
    g.add_argument("--store", default=None)
    g.add_argument("--encoder", default=None)
    g.add_argument("--neighbors", default=None)
    g.add_argument("--z-window", type=int, default=64)
    g.set_defaults(func=cmd_analyze)

    g = sub.add_parser("sweep-k", help="train and evaluate across neighbor counts")
    _add_common(g)
    g.add_argument("--train", required=True)
    g.add_argument("--dev", required=True)
    g.add_argument("--vocab", required=True)
    g.add_argument("--neighbors", required=True)
    g.add_argument("--dev-neighbors", required=True)
    g.add_argument("--ks", required=True, help="comma-separated neighbor counts")
    g.set_defaults(func=cmd_sweep_k)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
