"""Evaluation metrics in the shared proxy embedding space."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .linearize import PromptSequence
from .vocab import BOS, tokenize

logger = logging.getLogger(__name__)


def _cosine100(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine of a zero vector is undefined")
    return float(np.clip(100.0 * (a @ b) / (na * nb), -100.0, 100.0))


def proxy_clip_i2(gen, truth):
    """100 x cosine between generated and ground-truth image features."""
    return _cosine100(gen, truth)


class SharedEmbedder:
    """Maps text into image-feature space as the mean of per-word vectors.

    Images pass through unchanged. Words without a vector are ignored.
    """

    def __init__(self, word_vectors, d_img):
        self.word_vectors = {w: np.asarray(v, dtype=np.float64) for w, v in word_vectors.items()}
        self.d_img = d_img

    @classmethod
    def fit(cls, graph, node_ids):
        """Each word's vector is the mean image feature of the nodes whose text uses it."""
        sums, counts = {}, {}
        for i in node_ids:
            node = graph.nodes[i]
            for w in tokenize(node.text):
                sums[w] = sums.get(w, 0.0) + node.image_feat.astype(np.float64)
                counts[w] = counts.get(w, 0) + 1
        return cls({w: sums[w] / counts[w] for w in sorted(sums)}, graph.d_img)

    @classmethod
    def random(cls, words, d_img, seed=0):
        rng = np.random.default_rng(seed)
        return cls({w: rng.standard_normal(d_img) for w in sorted(set(words))}, d_img)

    def embed_text(self, text):
        words = tokenize(text)
        if not words:
            raise ValueError("cannot embed empty text")
        vecs = [self.word_vectors[w] for w in words if w in self.word_vectors]
        if not vecs:
            return np.zeros(self.d_img)
        return np.mean(vecs, axis=0)

    def embed_image(self, feat):
        return np.asarray(feat, dtype=np.float64)


def proxy_clip_it(image_feat, text, embedder):
    """100 x cosine between an image and a text in the shared space (0 if no word is known)."""
    t = embedder.embed_text(text)
    if not np.any(t):
        return 0.0
    return _cosine100(embedder.embed_image(image_feat), t)


def sequence_nll(model, text, context=None):
    """Per-word NLL of ``text`` after ``context`` (default: just ``<bos>``)."""
    words = model.vocab.word_tokens(text)
    if not words:
        raise ValueError("perplexity of empty text is undefined")
    prefix = (BOS,) if context is None else context.tokens
    soft = None if context is None else context.soft_tokens
    seq = PromptSequence(prefix + tuple(words), (len(prefix), len(prefix) + len(words)), soft)
    return model.token_nll(seq)


def perplexity(model, text, context=None):
    return math.exp(float(np.mean(sequence_nll(model, text, context))))


def kl_dv(neighbor_scores, generated_scores, bins=20, lo=-100.0, hi=100.0, eps=1e-6):
    """KL(P_neighbors || P_generated) between smoothed fixed-bin histograms of scores."""
    p_raw = np.asarray(neighbor_scores, dtype=np.float64)
    q_raw = np.asarray(generated_scores, dtype=np.float64)
    if p_raw.size == 0 or q_raw.size == 0:
        raise ValueError("kl_dv needs non-empty score lists")
    out = (p_raw < lo) | (p_raw > hi)
    out_q = (q_raw < lo) | (q_raw > hi)
    if out.any() or out_q.any():
        logger.warning("clamping %d score(s) outside [%g, %g]", int(out.sum() + out_q.sum()), lo, hi)
    edges = np.linspace(lo, hi, bins + 1)
    p = np.histogram(np.clip(p_raw, lo, hi), bins=edges)[0] + eps
    q = np.histogram(np.clip(q_raw, lo, hi), bins=edges)[0] + eps
    p /= p.sum()
    q /= q.sum()
    return float(max(0.0, np.sum(p * np.log(p / q))))


@dataclass
class ScoreReport:
    clip_i2: float
    perplexity: float
    clip_it: float
    kl_dv: float
    n_samples: int

    def record(self, **labels):
        return json.dumps({**labels, **asdict(self)}, sort_keys=True)


COLUMNS = ("CLIP-I2", "Perplexity", "CLIP-IT", "KL-DV")


def format_table(rows, label_cols):
    """Aligned text table. ``rows`` are ``(labels: dict, report or None, note)`` triples."""
    header = [*label_cols, *COLUMNS, "note"]
    body = []
    for labels, rep, note in rows:
        vals = (
            ["-"] * 4
            if rep is None
            else [f"{rep.clip_i2:.2f}", f"{rep.perplexity:.1f}", f"{rep.clip_it:.2f}", f"{rep.kl_dv:.4f}"]
        )
        body.append([str(labels.get(c, "")) for c in label_cols] + vals + [note])
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
