"""Flatten a sampled neighborhood into an interleaved prompt sequence."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, replace

from .vocab import BOS, EOS, GEN, IMG_END, IMG_START, NODE, TXT_END, Kind, Token

logger = logging.getLogger(__name__)

MAX_LEN = 1024


class Modality(str, enum.Enum):
    TEXT = "text"
    IMAGE = "image"
    BOTH = "both"

    @classmethod
    def _missing_(cls, value):
        aliases = {"text-only": cls.TEXT, "image-only": cls.IMAGE, "text+image": cls.BOTH}
        return aliases.get(value)


class Order(str, enum.Enum):
    TEXT_FIRST = "text-first"
    IMAGE_FIRST = "image-first"
    INTERLEAVED = "interleaved"


class GraphMode(str, enum.Enum):
    HARD = "hard"
    SOFT = "soft"
    NONE = "none"  # context-free baseline: empty context block


class TargetOrder(str, enum.Enum):
    TEXT_FIRST = "text-first"
    IMAGE_FIRST = "image-first"


@dataclass(frozen=True)
class LinearizationSpec:
    modality: Modality = Modality.BOTH
    order: Order = Order.TEXT_FIRST
    k_neighbors: int = 5
    graph_mode: GraphMode = GraphMode.HARD

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "order", Order(self.order))
        object.__setattr__(self, "graph_mode", GraphMode(self.graph_mode))
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be positive")
        if self.modality is not Modality.BOTH and self.order is not Order.TEXT_FIRST:
            raise ValueError("modality order only applies when both modalities are used")


@dataclass(frozen=True)
class PromptSequence:
    tokens: tuple
    target_span: tuple = (0, 0)  # half-open
    soft_tokens: object = None  # (M, d) array or Tensor, present iff soft mode

    def __len__(self):
        return len(self.tokens)

    @property
    def n_soft(self):
        return sum(1 for t in self.tokens if t.kind is Kind.SOFT)

    def with_soft_tokens(self, g):
        return replace(self, soft_tokens=g)

    def context(self):
        """Prefix up to and including ``<gen>``: the inference form of the sequence."""
        cut = self.tokens.index(GEN) + 1
        return PromptSequence(self.tokens[:cut], (cut, cut), self.soft_tokens)


def text_block(node, vocab):
    return vocab.word_tokens(node.text)


def image_block(node, codebook):
    codes = codebook.quantize(node.image_feat)
    return [IMG_START, *(Token.image(p, c) for p, c in enumerate(codes)), IMG_END]


def context_block(graph, members, spec, vocab, codebook):
    """Hard-mode context for ``members`` in rank order."""
    texts = [[NODE, *text_block(graph.nodes[j], vocab)] for j in members]
    images = [[NODE, *image_block(graph.nodes[j], codebook)] for j in members]
    if spec.modality is Modality.TEXT:
        blocks = texts
    elif spec.modality is Modality.IMAGE:
        blocks = images
    elif spec.order is Order.TEXT_FIRST:
        blocks = texts + images
    elif spec.order is Order.IMAGE_FIRST:
        blocks = images + texts
    else:
        blocks = [b for pair in zip(texts, images) for b in pair]
    return [t for b in blocks for t in b]


def target_template(node, vocab, codebook, order=TargetOrder.TEXT_FIRST):
    words = text_block(node, vocab)
    img = image_block(node, codebook)
    if TargetOrder(order) is TargetOrder.TEXT_FIRST:
        return [*words, TXT_END, *img, EOS]
    return [*img, *words, TXT_END, EOS]


def linearize(
    graph,
    neighbors,
    target,
    spec,
    vocab,
    codebook,
    *,
    training=True,
    target_order=TargetOrder.TEXT_FIRST,
    m_tokens=8,
    soft_tokens=None,
    max_len=MAX_LEN,
):
    """Build ``[BOS] context [GEN] target-template``.

    At inference (``training=False``) the target template and target span are empty.
    Whole neighbor blocks are dropped from the lowest rank upward until the sequence
    fits in ``max_len``.
    """
    if neighbors.source != target:
        raise ValueError(f"neighbor set belongs to node {neighbors.source}, not {target}")
    members = list(neighbors.members)
    if spec.k_neighbors > len(members) and spec.graph_mode is not GraphMode.NONE:
        logger.warning("k_neighbors=%d clamped to %d available", spec.k_neighbors, len(members))
    members = members[: spec.k_neighbors]
    tail = target_template(graph.nodes[target], vocab, codebook, target_order) if training else []

    if spec.graph_mode is GraphMode.SOFT:
        context = [Token.soft(i) for i in range(m_tokens)]
    elif spec.graph_mode is GraphMode.NONE:
        context = []
    else:
        while True:
            context = context_block(graph, members, spec, vocab, codebook)
            if len(context) + len(tail) + 2 <= max_len or not members:
                break
            members.pop()
    tokens = (BOS, *context, GEN, *tail)
    if len(tokens) > max_len:
        raise ValueError(f"sequence of length {len(tokens)} exceeds max_len={max_len}")
    start = len(context) + 2
    return PromptSequence(tokens, (start, len(tokens)), soft_tokens)


def render_debug(seq, vocab):
    return " ".join(vocab.render(t) for t in seq.tokens)


def parse_debug(text, vocab):
    """Rebuild word/special tokens from :func:`render_debug` output."""
    return [vocab.parse(p) for p in text.split()]


def check_well_formed(seq, image_tokens):
    """Raise ``ValueError`` unless image blocks are well formed and soft tokens form one prefix block."""
    toks = seq.tokens
    lo, hi = seq.target_span
    if not 0 <= lo <= hi <= len(toks):
        raise ValueError("target span out of bounds")
    i = 0
    while i < len(toks):
        if toks[i] == IMG_START:
            body = toks[i + 1 : i + 1 + image_tokens]
            if len(body) != image_tokens or any(
                t.kind is not Kind.IMAGE or t.pos != p for p, t in enumerate(body)
            ):
                raise ValueError(f"malformed image block at {i}")
            if i + 1 + image_tokens >= len(toks) or toks[i + 1 + image_tokens] != IMG_END:
                raise ValueError(f"unterminated image block at {i}")
            i += image_tokens + 2
            continue
        if toks[i] == IMG_END or toks[i].kind is Kind.IMAGE:
            raise ValueError(f"stray image token at {i}")
        i += 1
    soft = [i for i, t in enumerate(toks) if t.kind is Kind.SOFT]
    if soft and soft != list(range(soft[0], soft[0] + len(soft))):
        raise ValueError("soft graph tokens must be contiguous")
    if soft and [toks[i].value for i in soft] != list(range(len(soft))):
        raise ValueError("soft graph rows must be numbered 0..M-1")
