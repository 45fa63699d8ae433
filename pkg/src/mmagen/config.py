"""Run configuration: a flat set of keys, loadable from an INI-style file.

Sections in the file are organizational only; every key is unique across sections and
is also exposed as a ``--key-name`` command-line flag.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from typing import Optional

from .aligner import Ablation, AlignerConfig
from .graph import SyntheticSpec
from .inference import Strategy
from .linearize import GraphMode, LinearizationSpec, Modality, Order
from .lm import LmConfig
from .ppr import PprConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    nodes_path: Optional[str] = None
    edges_path: Optional[str] = None
    n_nodes: int = 256
    n_clusters: int = 8
    intra_edge_prob: float = 0.1
    inter_edge_prob: float = 0.005
    cluster_vocab_size: int = 12
    shared_vocab_size: int = 16
    doc_len: int = 8
    d_img: int = 32
    feature_noise_sigma: float = 0.05
    train_frac: float = 0.8
    # sampling
    beta: float = 0.85
    epsilon: float = 1e-8
    max_iters: int = 1000
    top_k: int = 5
    # linearization
    modality: str = "both"
    order: str = "text-first"
    k_neighbors: int = 5
    graph_mode: str = "hard"
    max_len: int = 1024
    # aligner
    ablation: str = "full"
    aligner_d_model: int = 64
    aligner_heads: int = 4
    node_layers: int = 2
    graph_layers: int = 2
    node_queries: int = 8
    graph_tokens: int = 8
    max_text_len: int = 32
    # sequence model
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    image_tokens: int = 4
    image_codes: int = 64
    min_word_freq: int = 2
    # training
    steps: int = 1000
    lr: float = 1e-5
    aligner_lr: float = 1e-5
    batch_size: int = 1
    image_loss_weight: float = 5.0
    warmup_ratio: float = 3e-3
    target_order: str = "mixed"
    log_every: int = 100
    ckpt_every: int = 0
    # inference
    strategy: str = "text-first"
    temperature: float = 0.7
    max_new: int = 32
    # run
    seed: int = 0
    precision: str = "f32"
    output_dir: str = "runs/default"

    def validate(self):
        try:
            self.modality = Modality(self.modality).value
            if self.nodes_path is None:
                self.synthetic_spec().validate()
            self.ppr_config()
            self.linearization_spec()
            Ablation(self.ablation)
            Strategy(self.strategy)
            if self.graph_mode == GraphMode.SOFT:
                self.aligner_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.d_img % self.image_tokens:
            raise ConfigError("d_img must be divisible by image_tokens")
        if self.target_order not in ("text-first", "image-first", "mixed"):
            raise ConfigError(f"target_order must be text-first, image-first or mixed, not {self.target_order!r}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        if not 0 < self.train_frac <= 1:
            raise ConfigError("train_frac must lie in (0, 1]")
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0 or self.aligner_lr <= 0:
            raise ConfigError("steps >= 0, batch_size >= 1, lr > 0 and aligner_lr > 0 required")
        if self.k_neighbors > self.top_k:
            raise ConfigError("k_neighbors cannot exceed top_k")
        return self

    def synthetic_spec(self):
        names = {f.name for f in fields(SyntheticSpec)} - {"seed"}
        return SyntheticSpec(seed=self.seed, **{k: getattr(self, k) for k in names})

    def ppr_config(self):
        return PprConfig(self.beta, self.epsilon, self.max_iters, self.top_k)

    def linearization_spec(self):
        return LinearizationSpec(Modality(self.modality), Order(self.order), self.k_neighbors, GraphMode(self.graph_mode))

    def aligner_config(self):
        return AlignerConfig(
            self.aligner_d_model,
            self.aligner_heads,
            self.node_layers,
            self.graph_layers,
            self.node_queries,
            self.graph_tokens,
            self.max_text_len,
            self.image_tokens,
        )

    def lm_config(self):
        graph_dim = self.aligner_d_model if self.graph_mode == GraphMode.SOFT else 0
        return LmConfig(self.d_model, self.n_heads, self.n_layers, self.max_len, graph_dim)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_ini(self):
        lines = ["[run]"]
        for f in fields(self):
            val = getattr(self, f.name)
            lines.append(f"{f.name} = {'' if val is None else val}")
        return "\n".join(lines) + "\n"


def _coerce(field, raw):
    if raw is None:
        return None
    typ = field.type
    if typ in ("int", int):
        return int(raw)
    if typ in ("float", float):
        return float(raw)
    if typ in ("Optional[str]",):
        return raw or None
    return str(raw)


def load_config(path=None, overrides=None):
    """Defaults, then file values, then ``overrides`` (e.g. parsed flags)."""
    known = {f.name: f for f in fields(RunConfig)}
    values = {}
    if path is not None:
        parser = configparser.ConfigParser()
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
        for section in parser.sections():
            for key, raw in parser.items(section):
                if key not in known:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                try:
                    values[key] = _coerce(known[key], raw)
                except ValueError:
                    raise ConfigError(f"{path}: bad value for {key}: {raw!r}") from None
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in known:
            raise ConfigError(f"unknown key {key!r}")
        try:
            values[key] = _coerce(known[key], val)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {val!r}") from None
    return RunConfig(**values).validate()
