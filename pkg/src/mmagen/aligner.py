"""Hierarchical aligner: a per-node Q-Former feeding a neighborhood Q-Former.

The node feature Q-Former fuses one node's word embeddings and projected image tokens in
a shared self-attention stream, then compresses them with ``node_queries`` learned
queries. The graph structure Q-Former concatenates those node representations (no
positional signal, so the neighbor order does not matter), mixes them with self-attention
and compresses them to ``graph_tokens`` learned queries.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import CrossAttentionBlock, Linear, Module, SelfAttentionBlock, normal_param

logger = logging.getLogger(__name__)


class Ablation(str, enum.Enum):
    FULL = "full"
    NO_NFQ = "no-nfq"
    NO_GSQ = "no-gsq"
    GNN = "gnn"


@dataclass(frozen=True)
class AlignerConfig:
    d_model: int = 64
    n_heads: int = 4
    node_layers: int = 2
    graph_layers: int = 2
    node_queries: int = 8
    graph_tokens: int = 8
    max_text_len: int = 32
    image_tokens: int = 4

    def __post_init__(self):
        for k, v in vars(self).items():
            if v <= 0:
                raise ValueError(f"AlignerConfig.{k} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


class NodeFeatureQFormer(Module):
    def __init__(self, cfg, n_word_rows, d_img, rng):
        self._cfg = cfg
        d = cfg.d_model
        self.word_emb = normal_param(rng, (n_word_rows, d))
        self.pos_emb = normal_param(rng, (cfg.max_text_len, d))
        self.image_proj = Linear(d_img, cfg.image_tokens * d, rng)
        self.blocks = [SelfAttentionBlock(d, cfg.n_heads, rng) for _ in range(cfg.node_layers)]
        self.queries = normal_param(rng, (cfg.node_queries, d))
        self.cross = CrossAttentionBlock(d, cfg.n_heads, rng)

    def initial_embedding(self, node, vocab):
        """Word embeddings plus positions, followed by the projected image tokens."""
        cfg = self._cfg
        ids = [vocab.token_id(t) for t in vocab.word_tokens(node.text)][: cfg.max_text_len]
        img = T.reshape(self.image_proj(node.image_feat[None, :].astype(T.get_dtype())), (cfg.image_tokens, cfg.d_model))
        if not ids:
            logger.warning("node %d has no text tokens; using image tokens only", node.id)
            return img
        words = T.add(T.embedding(self.word_emb, ids), T.rows(self.pos_emb, 0, len(ids)))
        return T.concat_rows([words, img])

    def __call__(self, node, vocab):
        h = self.initial_embedding(node, vocab)
        for block in self.blocks:
            h = block(h)
        return self.cross(self.queries, h)


class GraphStructureQFormer(Module):
    def __init__(self, cfg, rng):
        d = cfg.d_model
        self.blocks = [SelfAttentionBlock(d, cfg.n_heads, rng) for _ in range(cfg.graph_layers)]
        self.queries = normal_param(rng, (cfg.graph_tokens, d))
        self.cross = CrossAttentionBlock(d, cfg.n_heads, rng)

    def __call__(self, reps):
        if not reps:
            raise ValueError("encode_subgraph needs at least one node representation")
        g = T.concat_rows(reps)
        for block in self.blocks:
            g = block(g)
        return self.cross(self.queries, g)


class MeanGnn(Module):
    """Two rounds of mean-neighbor message passing over the sampled nodes' induced edges."""

    def __init__(self, d, rng, layers=2):
        self.self_w = [Linear(d, d, rng) for _ in range(layers)]
        self.nbr_w = [Linear(d, d, rng, bias=False) for _ in range(layers)]

    def __call__(self, h, mean_adj):
        for ws, wn in zip(self.self_w, self.nbr_w):
            h = T.gelu(T.add(ws(h), wn(T.matmul(mean_adj, h))))
        return h


def induced_mean_adjacency(graph, members):
    n = len(members)
    pos = {m: i for i, m in enumerate(members)}
    a = np.zeros((n, n))
    for i, m in enumerate(members):
        for j in graph.neighbors(m):
            if int(j) in pos:
                a[i, pos[int(j)]] = 1.0
    deg = a.sum(axis=1, keepdims=True)
    return np.divide(a, deg, out=np.zeros_like(a), where=deg > 0)


class HierAligner(Module):
    """Maps a neighbor set to graph tokens. Parameter prefixes: ``nfq.*`` and ``gsq.*``."""

    def __init__(self, cfg, vocab, d_img, rng, ablation=Ablation.FULL):
        self._cfg = cfg
        self._ablation = Ablation(ablation)
        self.nfq = NodeFeatureQFormer(cfg, vocab.image_offset, d_img, rng)
        if self._ablation is Ablation.GNN:
            self.gsq = MeanGnn(cfg.d_model, rng)
        elif self._ablation is not Ablation.NO_GSQ:
            self.gsq = GraphStructureQFormer(cfg, rng)

    @property
    def cfg(self):
        return self._cfg

    @property
    def ablation(self):
        return self._ablation

    def encode_node(self, node, vocab):
        if self._ablation is Ablation.NO_NFQ:
            return T.mean_rows(self.nfq.initial_embedding(node, vocab))
        return self.nfq(node, vocab)

    def encode_subgraph(self, reps, graph=None, members=None):
        if not reps:
            raise ValueError("encode_subgraph needs at least one node representation")
        if self._ablation is Ablation.NO_GSQ:
            acc = reps[0]
            for r in reps[1:]:
                acc = T.add(acc, r)
            return T.scale(acc, 1.0 / len(reps))
        if self._ablation is Ablation.GNN:
            h = T.concat_rows([T.mean_rows(r) for r in reps])
            return self.gsq(h, T.as_tensor(induced_mean_adjacency(graph, members)))
        return self.gsq(reps)

    def align(self, graph, neighbors, vocab, k=None):
        members = list(neighbors.members)[:k]
        if not members:
            raise ValueError(f"node {neighbors.source} has no sampled neighbors to align")
        reps = [self.encode_node(graph.nodes[j], vocab) for j in members]
        return self.encode_subgraph(reps, graph, members)

    def n_tokens(self, k):
        """Number of graph-token rows produced for ``k`` neighbors."""
        if self._ablation is Ablation.NO_GSQ:
            return self._cfg.node_queries
        if self._ablation is Ablation.GNN:
            return k
        return self._cfg.graph_tokens
