"""Run configuration and manifests.

Configs are plain key=value text files; command-line flags override file
values which override defaults. Every CLI run writes a manifest recording
the resolved config, the seed, a git-describe string, and checksums of the
input files, so any result can be traced back to its inputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
import shlex
import subprocess
import sys
import time
from dataclasses import dataclass


@dataclass
class RunConfig:
    # model
    num_layers: int = 4
    d_model: int = 128
    num_heads: int = 4
    context_len: int = 64
    cache_len: int = 64
    vocab_size: int = 0  # resolved from the vocabulary at run time
    neighbor_k: int = 4
    dropout: float = 0.25
    ffn_mult: int = 4
    per_dim_gate: bool = False
    # optimization
    seed: int = 0
    lanes: int = 16
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    max_steps: int = 100000
    max_epochs: int = 100
    eval_every: int = 200
    patience: int = 5
    min_delta: float = 0.0
    dev_eval_tokens: int = 8192
    log_every: int = 50
    warm_start: bool = False
    # retrieval
    exclude_window: int = -1  # -1: use context_len
    knn_tau: float = 1.0
    precompute_method: str = "ann"  # ann | exact
    ann_lists: int = 256
    ann_probes: int = 64
    ann_pq: int = 0
    kmeans_iters: int = 8
    chunk: int = 2048
    workers: int = 1
    # evaluation
    eval_cache_len: int = -1  # -1: use cache_len
    level: str = "word"

    @property
    def resolved_exclude_window(self):
        return self.context_len if self.exclude_window < 0 else self.exclude_window

    @property
    def resolved_eval_cache_len(self):
        return self.cache_len if self.eval_cache_len < 0 else self.eval_cache_len

    def model_config(self, gated):
        from .model import ModelConfig

        if self.vocab_size <= 0:
            raise ValueError("vocab_size not resolved; build or load a vocabulary first")
        return ModelConfig(
            num_layers=self.num_layers,
            d_model=self.d_model,
            num_heads=self.num_heads,
            context_len=self.context_len,
            cache_len=self.cache_len,
            vocab_size=self.vocab_size,
            neighbor_k=self.neighbor_k,
            dropout=self.dropout,
            ffn_mult=self.ffn_mult,
            gated=gated,
            per_dim_gate=self.per_dim_gate,
        )

    def with_updates(self, **kw):
        return dataclasses.replace(self, **kw)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(name, raw):
    typ = _FIELD_TYPES.get(name)
    if typ is None:
        raise KeyError(f"unknown config key {name!r}")
    raw = raw.strip()
    if typ in ("bool", bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"bad boolean for {name}: {raw!r}")
    if typ in ("int", int):
        return int(raw)
    if typ in ("float", float):
        return float(raw)
    return raw


def parse_config_file(path):
    """key=value lines; blank lines and # comments ignored."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, raw = line.split("=", 1)
            out[key.strip()] = raw
    return out


def resolve_config(config_path=None, overrides=None):
    """Defaults <- config file <- explicit overrides."""
    values = {}
    if config_path:
        for key, raw in parse_config_file(config_path).items():
            values[key] = _coerce(key, raw)
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override must be key=value, got {item!r}")
        key, raw = item.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), raw)
    return RunConfig(**values)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def git_describe():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.TimeoutExpired):
        pass
    return "unknown"


def write_manifest(out_dir, cfg, inputs, extra=None):
    """Record the run: command, git state, config snapshot, input checksums."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "manifest.txt")
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"command={shlex.join(sys.argv)}\n")
        f.write(f"git={git_describe()}\n")
        f.write(f"timestamp={time.strftime('%Y-%m-%dT%H:%M:%S%z')}\n")
        f.write(f"seed={cfg.seed}\n")
        for fld in dataclasses.fields(cfg):
            f.write(f"config.{fld.name}={getattr(cfg, fld.name)}\n")
        for name, p in (inputs or {}).items():
            f.write(f"input.{name}={p} sha256={sha256_file(p)}\n")
        for key, value in (extra or {}).items():
            f.write(f"{key}={value}\n")
    return path
