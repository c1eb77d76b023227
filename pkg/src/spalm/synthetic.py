"""Seeded synthetic corpus with controllable long-range repetition.

Documents interleave filler text from a fixed random bigram chain with
mentions of multi-word entities drawn from a global pool. Entity names are
word sequences whose first two words identify the entity uniquely, so the
continuation is predictable given the prefix; mentions of the same entity
inside a document are spaced further apart than a short-term cache covers,
and every entity mentioned in dev also occurs in train. Local filler
structure is learnable by any model; entity continuations reward a model
that can consult other mentions, however far away they are.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np


@dataclass
class SynthConfig:
    train_tokens: int = 1_000_000
    dev_tokens: int = 32_768
    test_tokens: int = 32_768
    filler_vocab: int = 256
    name_vocab: int = 256
    branching: int = 8  # bigram successors per filler word
    entity_pool: int = 1024
    entity_len: int = 8
    entities_per_doc: int = 6
    cycles_per_doc: int = 4  # each cycle mentions every assigned entity once
    filler_run: int = 40  # mean filler tokens between mentions
    seed: int = 1234


class SyntheticGenerator:
    def __init__(self, cfg):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.filler_words = [f"f{i:03d}" for i in range(cfg.filler_vocab)]
        self.name_words = [f"n{i:03d}" for i in range(cfg.name_vocab)]
        # fixed bigram chain over filler words
        self.successors = np.stack(
            [rng.choice(cfg.filler_vocab, size=cfg.branching, replace=False) for _ in range(cfg.filler_vocab)]
        )
        # entity name sequences; the first two words form a unique pair
        n_pairs = cfg.name_vocab * cfg.name_vocab
        if cfg.entity_pool > n_pairs:
            raise ValueError("entity pool larger than the number of distinct word pairs")
        pair_ids = rng.choice(n_pairs, size=cfg.entity_pool, replace=False)
        tails = rng.integers(0, cfg.name_vocab, size=(cfg.entity_pool, max(0, cfg.entity_len - 2)))
        self.entities = []
        for e in range(cfg.entity_pool):
            first, second = divmod(int(pair_ids[e]), cfg.name_vocab)
            words = [first, second] + [int(w) for w in tails[e]]
            self.entities.append([self.name_words[w] for w in words[: cfg.entity_len]])
        self.rng = rng
        self.used_entities = set()

    def _filler(self, state, length, out):
        for _ in range(length):
            state = int(self.successors[state][self.rng.integers(self.cfg.branching)])
            out.append(self.filler_words[state])
        return state

    def make_doc(self, entity_ids):
        cfg = self.cfg
        out = []
        state = int(self.rng.integers(cfg.filler_vocab))
        for _ in range(cfg.cycles_per_doc):
            for e in entity_ids:
                run = 1 + int(self.rng.poisson(cfg.filler_run - 1))
                state = self._filler(state, run, out)
                out.extend(self.entities[e])
        state = self._filler(state, 1 + int(self.rng.poisson(cfg.filler_run - 1)), out)
        return " ".join(out)

    def docs_for_split(self, target_tokens, restrict_to_used):
        cfg = self.cfg
        docs, total = [], 0
        while total < target_tokens:
            if restrict_to_used:
                pool = sorted(self.used_entities)
                picks = self.rng.choice(len(pool), size=cfg.entities_per_doc, replace=False)
                entity_ids = [pool[i] for i in picks]
            else:
                entity_ids = [int(i) for i in self.rng.choice(cfg.entity_pool, size=cfg.entities_per_doc, replace=False)]
                self.used_entities.update(entity_ids)
            doc = self.make_doc(entity_ids)
            docs.append(doc)
            total += len(doc.split())
        return docs


def generate(cfg):
    """Returns {"train": [...], "dev": [...], "test": [...]} document lists.

    Train is generated first so that dev and test mention only entities the
    training corpus (and hence the episodic store) contains.
    """
    gen = SyntheticGenerator(cfg)
    splits = {"train": gen.docs_for_split(cfg.train_tokens, restrict_to_used=False)}
    splits["dev"] = gen.docs_for_split(cfg.dev_tokens, restrict_to_used=True)
    splits["test"] = gen.docs_for_split(cfg.test_tokens, restrict_to_used=True)
    return splits


def write_splits(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    splits = generate(cfg)
    paths = {}
    for name, docs in splits.items():
        path = os.path.join(out_dir, f"{name}.txt")
        with open(path, "w", encoding="utf-8") as f:
            for doc in docs:
                f.write(doc + "\n")
        paths[name] = path
    return paths
