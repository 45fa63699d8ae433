"""Multimodal attributed graphs: data model, file ingestion, synthetic generation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)


class GraphError(ValueError):
    """Raised for malformed graph input."""


@dataclass(frozen=True)
class MmagNode:
    id: int
    text: str
    image_feat: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, MmagNode):
            return NotImplemented
        return (
            self.id == other.id
            and self.text == other.text
            and np.array_equal(self.image_feat, other.image_feat)
        )

    __hash__ = None


class Mmag:
    """Undirected simple graph whose nodes each carry one text and one image feature vector.

    Node ids are dense ``0..n-1``. ``indptr``/``indices`` form a CSR adjacency over both
    edge directions with each row sorted ascending.
    """

    def __init__(self, nodes, edges, d_img):
        self.nodes = list(nodes)
        self.d_img = int(d_img)
        if self.d_img <= 0:
            raise GraphError("d_img must be positive")
        n = len(self.nodes)
        for i, node in enumerate(self.nodes):
            if node.id != i:
                raise GraphError(f"node ids must be dense 0..n-1, got {node.id} at {i}")
            if not node.text.strip():
                raise GraphError(f"node {i}: empty text")
            if node.image_feat.shape != (self.d_img,):
                raise GraphError(
                    f"node {i}: image_feat length {node.image_feat.shape} != {self.d_img}"
                )
            if not np.all(np.isfinite(node.image_feat)):
                raise GraphError(f"node {i}: non-finite image_feat")

        canon = set()
        for a, b in edges:
            a, b = int(a), int(b)
            if not (0 <= a < n and 0 <= b < n):
                raise GraphError(f"edge ({a}, {b}) references an unknown node")
            if a == b:
                raise GraphError(f"self-loop at node {a}")
            canon.add((min(a, b), max(a, b)))
        self.edges = frozenset(canon)

        if canon:
            pairs = np.array(sorted(canon), dtype=np.int64)
            rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
            cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
        else:
            rows = cols = np.zeros(0, dtype=np.int64)
        adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        adj.sort_indices()
        self.indptr = adj.indptr.astype(np.int64)
        self.indices = adj.indices.astype(np.int64)

    @property
    def n(self):
        return len(self.nodes)

    def neighbors(self, i):
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def degree(self):
        return np.diff(self.indptr)

    def adjacency(self):
        """Symmetric 0/1 adjacency as a ``scipy.sparse.csr_matrix``."""
        data = np.ones(len(self.indices))
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    def image_matrix(self, ids=None):
        ids = range(self.n) if ids is None else ids
        return np.stack([self.nodes[i].image_feat for i in ids]) if self.n else np.zeros((0, self.d_img))

    def connected_components(self):
        _, labels = connected_components(self.adjacency(), directed=False)
        return labels

    def __repr__(self):
        return f"Mmag(n={self.n}, edges={len(self.edges)}, d_img={self.d_img})"


@dataclass(frozen=True)
class IngestResult:
    graph: Mmag
    id_map: dict  # original id -> dense id
    self_loops_dropped: int
    duplicates_dropped: int


def _read_nodes(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                raw_id = rec["id"]
                text = rec["text"]
                feat = np.asarray(rec["image_feat"], dtype=np.float32)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise GraphError(f"{path}:{lineno}: malformed node record ({exc})") from None
            if not isinstance(text, str) or not text.strip():
                raise GraphError(f"{path}:{lineno}: text must be a non-empty string")
            if feat.ndim != 1 or feat.size == 0:
                raise GraphError(f"{path}:{lineno}: image_feat must be a non-empty array")
            if not np.all(np.isfinite(feat)):
                raise GraphError(f"{path}:{lineno}: image_feat has non-finite values")
            records.append((lineno, raw_id, text, feat))
    return records


def ingest(nodes_path, edges_path=None):
    """Read a nodes JSONL file and an optional ``src<TAB>dst`` edge list.

    Self-loops are dropped and duplicate edges collapsed; both are counted. Node ids
    (strings or ints) are remapped to dense ids in file order.
    """
    records = _read_nodes(nodes_path)
    if not records:
        raise GraphError(f"{nodes_path}: no node records")
    d_img = records[0][3].size
    id_map = {}
    nodes = []
    for lineno, raw_id, text, feat in records:
        if feat.size != d_img:
            raise GraphError(
                f"{nodes_path}:{lineno}: image_feat length {feat.size}, expected {d_img}"
            )
        key = str(raw_id)
        if key in id_map:
            raise GraphError(f"{nodes_path}:{lineno}: duplicate node id {raw_id!r}")
        id_map[key] = len(nodes)
        nodes.append(MmagNode(len(nodes), text, feat))

    edges = set()
    loops = dups = 0
    if edges_path is not None:
        with open(edges_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise GraphError(f"{edges_path}:{lineno}: expected 'src<TAB>dst'")
                try:
                    a, b = (id_map[p.strip()] for p in parts)
                except KeyError as exc:
                    raise GraphError(f"{edges_path}:{lineno}: unknown node id {exc}") from None
                if a == b:
                    loops += 1
                    continue
                e = (min(a, b), max(a, b))
                if e in edges:
                    dups += 1
                else:
                    edges.add(e)
    if loops:
        logger.warning("dropped %d self-loop(s)", loops)
    return IngestResult(Mmag(nodes, edges, d_img), id_map, loops, dups)


def write_graph(graph, nodes_path, edges_path):
    """Write ``graph`` in the ingest format. Floats are written with ``repr`` precision."""
    with open(nodes_path, "w", encoding="utf-8") as fh:
        for node in graph.nodes:
            rec = {"id": node.id, "text": node.text, "image_feat": [float(x) for x in node.image_feat]}
            fh.write(json.dumps(rec) + "\n")
    with open(edges_path, "w", encoding="utf-8") as fh:
        for a, b in sorted(graph.edges):
            fh.write(f"{a}\t{b}\n")


@dataclass(frozen=True)
class SyntheticSpec:
    n_nodes: int = 256
    n_clusters: int = 8
    intra_edge_prob: float = 0.1
    inter_edge_prob: float = 0.005
    cluster_vocab_size: int = 12
    shared_vocab_size: int = 16
    doc_len: int = 8
    d_img: int = 32
    feature_noise_sigma: float = 0.05
    seed: int = 0

    def validate(self):
        if not 0 <= self.inter_edge_prob <= self.intra_edge_prob <= 1:
            raise GraphError("need 0 <= inter_edge_prob <= intra_edge_prob <= 1")
        for name in ("n_nodes", "n_clusters", "cluster_vocab_size", "shared_vocab_size", "doc_len", "d_img"):
            if getattr(self, name) <= 0:
                raise GraphError(f"{name} must be positive")
        if self.feature_noise_sigma < 0:
            raise GraphError("feature_noise_sigma must be non-negative")
        if self.n_clusters > self.n_nodes:
            raise GraphError("n_clusters exceeds n_nodes")


def cluster_assignment(spec):
    """Cluster label of each node: round-robin so every cluster is non-empty."""
    return np.arange(spec.n_nodes) % spec.n_clusters


def generate_synthetic(spec):
    """Planted-cluster MMAG.

    Each cluster has a unit-norm prototype image vector and a private word list. A node's
    text draws ``doc_len`` words, each from its cluster's private list with probability
    0.8 and from the shared list otherwise. Edges are independent Bernoulli draws.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    labels = cluster_assignment(spec)

    protos = rng.standard_normal((spec.n_clusters, spec.d_img))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    private = [[f"c{c}w{j}" for j in range(spec.cluster_vocab_size)] for c in range(spec.n_clusters)]
    shared = [f"s{j}" for j in range(spec.shared_vocab_size)]

    nodes = []
    for i in range(spec.n_nodes):
        c = labels[i]
        feat = protos[c] + spec.feature_noise_sigma * rng.standard_normal(spec.d_img)
        from_private = rng.random(spec.doc_len) < 0.8
        words = [
            private[c][rng.integers(spec.cluster_vocab_size)] if p else shared[rng.integers(spec.shared_vocab_size)]
            for p in from_private
        ]
        nodes.append(MmagNode(i, " ".join(words), feat.astype(np.float32)))

    iu, ju = np.triu_indices(spec.n_nodes, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, spec.intra_edge_prob, spec.inter_edge_prob)
    keep = rng.random(len(iu)) < prob
    edges = zip(iu[keep].tolist(), ju[keep].tolist())
    return Mmag(nodes, edges, spec.d_img)
