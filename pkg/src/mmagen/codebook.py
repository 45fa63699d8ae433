"""Per-position vector-quantization codebook for image feature vectors."""

from __future__ import annotations

import numpy as np


def _sq_dists(x, c):
    return (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]


def kmeans(x, k, seed=0, iters=10):
    """Lloyd's algorithm from ``k`` distinct random rows; empty clusters move to the farthest point."""
    x = np.asarray(x, dtype=np.float64)
    if k > len(x):
        raise ValueError(f"k={k} exceeds the number of training vectors ({len(x)})")
    rng = np.random.default_rng(seed)
    cent = x[rng.choice(len(x), size=k, replace=False)].copy()
    for _ in range(iters):
        d = _sq_dists(x, cent)
        assign = d.argmin(axis=1)
        for j in range(k):
            members = assign == j
            if members.any():
                cent[j] = x[members].mean(axis=0)
            else:
                far = int(d[np.arange(len(x)), assign].argmax())
                cent[j] = x[far]
                assign[far] = j
                d[far] = _sq_dists(x[far : far + 1], cent)[0]
    return cent


class ImageCodebook:
    """``centroids[p]`` is a ``(n_codes, chunk)`` matrix for position ``p``."""

    def __init__(self, centroids):
        self.centroids = [np.asarray(c, dtype=np.float64) for c in centroids]
        shapes = {c.shape for c in self.centroids}
        if len(shapes) != 1:
            raise ValueError("all positions need the same centroid shape")
        self.n_codes, self.chunk = self.centroids[0].shape
        if self.n_codes < 2:
            raise ValueError("need at least 2 codes per position")
        if not all(np.all(np.isfinite(c)) for c in self.centroids):
            raise ValueError("non-finite centroid")

    @property
    def n_positions(self):
        return len(self.centroids)

    @property
    def d_img(self):
        return self.n_positions * self.chunk

    @classmethod
    def build(cls, feats, n_positions=4, n_codes=64, seed=0, iters=10):
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or len(feats) == 0:
            raise ValueError("need a non-empty (n, d_img) feature matrix")
        if feats.shape[1] % n_positions:
            raise ValueError(f"d_img {feats.shape[1]} not divisible by {n_positions} positions")
        if n_codes > len(feats):
            raise ValueError(f"{n_codes} codes requested from {len(feats)} training vectors")
        chunks = np.split(feats, n_positions, axis=1)
        return cls([kmeans(c, n_codes, seed=seed + p, iters=iters) for p, c in enumerate(chunks)])

    def quantize(self, feat):
        feat = np.asarray(feat, dtype=np.float64)
        if feat.shape != (self.d_img,):
            raise ValueError(f"expected feature of length {self.d_img}, got {feat.shape}")
        codes = []
        for p, chunk in enumerate(np.split(feat, self.n_positions)):
            d = ((self.centroids[p] - chunk) ** 2).sum(axis=1)
            codes.append(int(d.argmin()))
        return codes

    def decode(self, codes):
        if len(codes) != self.n_positions:
            raise ValueError(f"expected {self.n_positions} codes, got {len(codes)}")
        return np.concatenate([self.centroids[p][c] for p, c in enumerate(codes)])

    def state(self):
        return {f"codebook.pos{p}": c for p, c in enumerate(self.centroids)}

    @classmethod
    def from_state(cls, state):
        keys = sorted((k for k in state if k.startswith("codebook.pos")), key=lambda k: int(k[12:]))
        return cls([state[k] for k in keys])
