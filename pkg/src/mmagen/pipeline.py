"""End-to-end pipeline: sampling, linearization, alignment and the sequence model."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .aligner import HierAligner
from .codebook import ImageCodebook
from .config import RunConfig, load_config
from .graph import generate_synthetic, ingest
from .inference import infer, stage_seed
from .linearize import GraphMode, TargetOrder, linearize
from .lm import InterleavedLm
from .nn import load_checkpoint, save_checkpoint
from .ppr import build_normalized_adjacency, sample_neighborhood
from .vocab import Vocab

logger = logging.getLogger(__name__)

# independent RNG streams derived from the run seed
_SPLIT, _LM_INIT, _ALIGNER_INIT, _ORDER, _CODEBOOK = range(5)


def stream(seed, purpose):
    return np.random.default_rng([int(seed), purpose])


def load_graph(cfg):
    if cfg.nodes_path:
        return ingest(cfg.nodes_path, cfg.edges_path).graph
    return generate_synthetic(cfg.synthetic_spec())


def split_nodes(n, train_frac, seed):
    perm = stream(seed, _SPLIT).permutation(n)
    cut = max(1, int(round(train_frac * n)))
    return sorted(perm[:cut].tolist()), sorted(perm[cut:].tolist())


@dataclass
class Pipeline:
    cfg: RunConfig
    graph: object
    vocab: Vocab
    codebook: ImageCodebook
    model: InterleavedLm
    aligner: HierAligner = None
    train_ids: list = field(default_factory=list)
    test_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.spec = self.cfg.linearization_spec()
        self.ppr_cfg = self.cfg.ppr_config()
        self.adj = build_normalized_adjacency(self.graph)
        self._neighbors = {}
        if self.spec.graph_mode is GraphMode.SOFT and self.aligner is None:
            raise ValueError("soft graph mode needs an aligner")

    def neighbors(self, target):
        if target not in self._neighbors:
            self._neighbors[target] = sample_neighborhood(self.adj, target, self.ppr_cfg)
        return self._neighbors[target]

    def sequence(self, target, training=False, target_order=TargetOrder.TEXT_FIRST):
        """Prompt for ``target``; in soft mode the graph tokens are attached (and differentiable)."""
        nbrs = self.neighbors(target)
        soft, m = None, 0
        if self.spec.graph_mode is GraphMode.SOFT:
            soft = self.aligner.align(self.graph, nbrs, self.vocab, k=self.spec.k_neighbors)
            m = soft.shape[0]
        return linearize(
            self.graph,
            nbrs,
            target,
            self.spec,
            self.vocab,
            self.codebook,
            training=training,
            target_order=target_order,
            m_tokens=m,
            soft_tokens=soft,
            max_len=self.cfg.max_len,
        )

    def context(self, target):
        with T.no_grad():
            return self.sequence(target, training=False)

    def named_parameters(self):
        """Optimizer view with checkpoint prefixes ``lm.*``, ``adapter.*``, ``nfq.*``, ``gsq.*``."""
        out = {}
        for name, p in self.model.named_parameters().items():
            out[name if name.startswith("adapter.") else f"lm.{name}"] = p
        if self.aligner is not None:
            out.update(self.aligner.named_parameters())
        return out

    def state(self):
        arrays = {k: p.data for k, p in self.named_parameters().items()}
        arrays.update(self.codebook.state())
        return arrays

    def load_state(self, arrays):
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)[:5]}")
        for name, p in params.items():
            if arrays[name].shape != p.data.shape:
                raise ValueError(f"{name}: checkpoint shape {arrays[name].shape} != {p.data.shape}")
            p.data = np.array(arrays[name], dtype=p.data.dtype)
        self.codebook = ImageCodebook.from_state(arrays)

    def infer(self, target, strategy=None, seed=None, temperature=None):
        cfg = self.cfg
        gen = infer(
            self.context(target),
            self.model,
            self.codebook,
            strategy or cfg.strategy,
            cfg.seed if seed is None else seed,
            cfg.temperature if temperature is None else temperature,
            cfg.max_new,
        )
        gen.target_id = target
        return gen


def node_seed(seed, target):
    return stage_seed(seed, f"target:{target}") % (2**31)


def infer_batch(pipeline, targets, strategy=None, seeds=None, temperature=None):
    """Full pipeline per target. Each target gets its own seed, so results are order-independent."""
    if seeds is None:
        seeds = [node_seed(pipeline.cfg.seed, t) for t in targets]
    if len(seeds) != len(targets):
        raise ValueError("need one seed per target")
    out = []
    for t, s in zip(targets, seeds):
        try:
            out.append(pipeline.infer(t, strategy, s, temperature))
        except Exception as exc:
            raise RuntimeError(f"inference failed for target {t}: {exc}") from exc
    return out


def build_pipeline(cfg, graph=None):
    """Fresh, untrained pipeline: split, vocabulary, codebook and initialized models."""
    T.set_precision(cfg.precision)
    graph = load_graph(cfg) if graph is None else graph
    train_ids, test_ids = split_nodes(graph.n, cfg.train_frac, cfg.seed)
    n_codes = min(cfg.image_codes, len(train_ids))
    if n_codes < cfg.image_codes:
        logger.warning("only %d training nodes: codebook shrunk to %d codes", len(train_ids), n_codes)
    vocab = Vocab.build([graph.nodes[i].text for i in train_ids], cfg.image_tokens, n_codes, cfg.min_word_freq)
    codebook = ImageCodebook.build(graph.image_matrix(train_ids), cfg.image_tokens, n_codes, seed=cfg.seed)
    model = InterleavedLm(vocab, cfg.lm_config(), stream(cfg.seed, _LM_INIT))
    aligner = None
    if cfg.graph_mode == GraphMode.SOFT:
        aligner = HierAligner(cfg.aligner_config(), vocab, graph.d_img, stream(cfg.seed, _ALIGNER_INIT), cfg.ablation)
    return Pipeline(cfg, graph, vocab, codebook, model, aligner, train_ids, test_ids)


CHECKPOINT = "checkpoint.bin"
VOCAB = "vocab.tsv"
CONFIG = "config.ini"


def save_pipeline(pipeline, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(os.path.join(out_dir, CHECKPOINT), pipeline.state())
    pipeline.vocab.save(os.path.join(out_dir, VOCAB))
    with open(os.path.join(out_dir, CONFIG), "w", encoding="utf-8") as fh:
        fh.write(pipeline.cfg.to_ini())


def load_pipeline(run_dir, graph=None, overrides=None):
    """Rebuild a trained pipeline from ``run_dir``; ``overrides`` may change inference keys."""
    cfg = load_config(os.path.join(run_dir, CONFIG), overrides)
    T.set_precision(cfg.precision)
    graph = load_graph(cfg) if graph is None else graph
    train_ids, test_ids = split_nodes(graph.n, cfg.train_frac, cfg.seed)
    vocab = Vocab.load(os.path.join(run_dir, VOCAB))
    arrays = load_checkpoint(os.path.join(run_dir, CHECKPOINT))
    codebook = ImageCodebook.from_state(arrays)
    model = InterleavedLm(vocab, cfg.lm_config(), stream(cfg.seed, _LM_INIT))
    aligner = None
    if cfg.graph_mode == GraphMode.SOFT:
        aligner = HierAligner(cfg.aligner_config(), vocab, graph.d_img, stream(cfg.seed, _ALIGNER_INIT), cfg.ablation)
    pipe = Pipeline(cfg, graph, vocab, codebook, model, aligner, train_ids, test_ids)
    pipe.load_state(arrays)
    return pipe
