"""Personalized PageRank and top-K context neighbor selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class PprConfig:
    """``beta`` weights the walk term; ``1 - beta`` is the restart mass."""

    beta: float = 0.85
    epsilon: float = 1e-8
    max_iters: int = 1000
    top_k: int = 5

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1 or self.top_k < 1:
            raise ValueError("max_iters and top_k must be positive")


@dataclass(frozen=True)
class NormalizedAdjacency:
    matrix: sp.csr_matrix  # column-stochastic except at dangling columns
    dangling: np.ndarray  # bool mask, True where degree == 0

    @property
    def n(self):
        return self.matrix.shape[0]


@dataclass(frozen=True)
class PprVector:
    source: int
    scores: np.ndarray
    converged: bool
    iterations: int


@dataclass(frozen=True)
class NeighborSet:
    source: int
    members: tuple
    scores: tuple

    def __len__(self):
        return len(self.members)


def build_normalized_adjacency(graph):
    """Random-walk normalization ``A D^-1``: column ``i`` holds ``1/deg(i)`` at each neighbor."""
    adj = graph.adjacency().astype(np.float64)
    deg = np.asarray(adj.sum(axis=0)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    mat = (adj @ sp.diags(inv)).tocsr()
    mat.sort_indices()
    return NormalizedAdjacency(mat, deg == 0)


def ppr_vector(adj, source, cfg):
    """Power iteration for ``p = beta * A p + (1 - beta) e_source``.

    Mass that would leave through a dangling column is sent back to the source, so the
    iterate stays a probability vector.
    """
    n = adj.n
    if not 0 <= source < n:
        raise IndexError(f"source {source} out of range for {n} nodes")
    p = np.zeros(n)
    p[source] = 1.0
    if cfg.beta == 0.0:
        return PprVector(source, p, True, 0)
    dangling = adj.dangling
    has_dangling = bool(dangling.any())
    for it in range(1, cfg.max_iters + 1):
        nxt = cfg.beta * (adj.matrix @ p)
        restart = 1.0 - cfg.beta
        if has_dangling:
            restart += cfg.beta * p[dangling].sum()
        nxt[source] += restart
        delta = np.abs(nxt - p).sum()
        p = nxt
        if delta < cfg.epsilon:
            return PprVector(source, p, True, it)
    return PprVector(source, p, False, cfg.max_iters)


def select_neighbors(ppr, k):
    """Top-``k`` nodes by score excluding the source; ties go to the lower id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = ppr.scores
    order = np.lexsort((np.arange(len(scores)), -scores))
    order = order[order != ppr.source][:k]
    return NeighborSet(ppr.source, tuple(int(i) for i in order), tuple(float(scores[i]) for i in order))


def sample_neighborhood(adj, source, cfg):
    return select_neighbors(ppr_vector(adj, source, cfg), cfg.top_k)


def dump_scores(ppr, fh):
    """Write ``node_id<TAB>score`` lines in descending score order."""
    order = np.lexsort((np.arange(len(ppr.scores)), -ppr.scores))
    for i in order:
        fh.write(f"{int(i)}\t{float(ppr.scores[i])!r}\n")
