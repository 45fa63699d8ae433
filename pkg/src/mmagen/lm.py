"""Decoder-only model over the joint word / image-code / special vocabulary."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .linearize import PromptSequence
from .nn import LayerNorm, Linear, Module, SelfAttentionBlock, normal_param
from .vocab import IMG_END, IMG_START, Kind, Special

IMAGE_LOSS_WEIGHT = 5.0


@dataclass(frozen=True)
class LmConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    max_len: int = 1024
    graph_dim: int = 0  # width of incoming graph tokens; 0 disables the adapter


class InterleavedLm(Module):
    def __init__(self, vocab, cfg, rng):
        self._vocab = vocab
        self._cfg = cfg
        d = cfg.d_model
        self.tok_emb = normal_param(rng, (vocab.size, d))
        self.pos_emb = normal_param(rng, (cfg.max_len, d))
        self.blocks = [SelfAttentionBlock(d, cfg.n_heads, rng, causal=True) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(d)
        self.head = Linear(d, vocab.size, rng)
        if cfg.graph_dim:
            self.adapter = Linear(cfg.graph_dim, d, rng)

    @property
    def vocab(self):
        return self._vocab

    @property
    def cfg(self):
        return self._cfg

    def _inputs(self, seq):
        ids = self._vocab.encode(seq.tokens)
        soft = np.flatnonzero(ids < 0)
        if len(ids) > self._cfg.max_len:
            raise ValueError(f"sequence length {len(ids)} exceeds max_len {self._cfg.max_len}")
        if not len(soft):
            x = T.embedding(self.tok_emb, ids)
        else:
            if seq.soft_tokens is None:
                raise ValueError("sequence has soft graph tokens but no soft_tokens matrix")
            if not hasattr(self, "adapter"):
                raise ValueError("model was built without a graph-token adapter")
            lo, hi = int(soft[0]), int(soft[-1]) + 1
            rows = [seq.tokens[i].value for i in range(lo, hi)]
            g = self.adapter(seq.soft_tokens)
            if rows != list(range(g.shape[0])):
                raise ValueError(f"{hi - lo} soft positions for {g.shape[0]} graph tokens")
            parts = [g]
            if lo:
                parts.insert(0, T.embedding(self.tok_emb, ids[:lo]))
            if hi < len(ids):
                parts.append(T.embedding(self.tok_emb, ids[hi:]))
            x = T.concat_rows(parts)
        return T.add(x, T.rows(self.pos_emb, 0, len(ids)))

    def forward(self, seq):
        """Logits ``(len(seq), vocab.size)``; row ``t`` scores the token at ``t + 1``."""
        h = self._inputs(seq)
        for block in self.blocks:
            h = block(h)
        return self.head(self.ln_f(h))

    def target_weights(self, seq, image_weight=IMAGE_LOSS_WEIGHT):
        lo, hi = seq.target_span
        return np.array([image_weight if t.kind is Kind.IMAGE else 1.0 for t in seq.tokens[lo:hi]])

    def loss(self, seq, image_weight=IMAGE_LOSS_WEIGHT):
        """Weighted next-token cross-entropy over the target span only."""
        lo, hi = seq.target_span
        if hi <= lo:
            raise ValueError("empty target span")
        if lo < 1:
            raise ValueError("target span cannot start at position 0")
        logits = self.forward(seq)
        targets = self._vocab.encode(seq.tokens[lo:hi])
        if (targets < 0).any():
            raise ValueError("soft graph tokens cannot be prediction targets")
        return T.cross_entropy(T.rows(logits, lo - 1, hi - 1), targets, self.target_weights(seq, image_weight))

    def token_nll(self, seq):
        """Per-position negative log-likelihood over the target span (no gradient)."""
        lo, hi = seq.target_span
        with T.no_grad():
            logits = self.forward(seq).data[lo - 1 : hi - 1].astype(np.float64)
        targets = self._vocab.encode(seq.tokens[lo:hi])
        return -T.log_softmax_np(logits)[np.arange(hi - lo), targets]


def _grammar_state(tokens, image_tokens):
    """Return the image position to emit next, or ``None`` outside an image block."""
    pos = None
    for t in tokens:
        if t == IMG_START:
            pos = 0
        elif t == IMG_END:
            pos = None
        elif t.kind is Kind.IMAGE and pos is not None:
            pos += 1
    return pos


def outside_mask(vocab, allow=None):
    """Boolean mask of ids allowed outside image blocks (image codes always excluded)."""
    mask = np.zeros(vocab.size, dtype=bool)
    if allow is None:
        mask[: vocab.image_offset] = True
        mask[[Special.BOS, Special.PAD, Special.NODE, Special.GEN]] = False
    else:
        mask[np.asarray(list(allow), dtype=np.int64)] = True
    return mask


def text_mask(vocab):
    return outside_mask(vocab, [*vocab.word_ids(), Special.UNK, Special.TXT_END])


def generate(prefix, model, stop_specials=(Special.EOS,), max_new=64, temperature=0.0, seed=0, allow=None):
    """Autoregressive continuation of ``prefix``.

    Inside an image block only codes of the current position are eligible, and
    ``IMG_END`` is forced once the block is full. Outside, ``allow`` (a boolean id mask)
    restricts the choice and ``IMG_END`` is never eligible. Greedy decoding (temperature 0) breaks ties toward the lowest
    id. Returns ``(new_tokens, truncated)``; a hit stop token is included.
    """
    vocab = model.vocab
    allow = outside_mask(vocab) if allow is None else allow
    stops = {int(s) for s in stop_specials}
    rng = np.random.default_rng(seed)
    tokens = list(prefix.tokens)
    new = []
    for _ in range(max_new):
        pos = _grammar_state(tokens, vocab.image_tokens)
        if pos is not None and pos >= vocab.image_tokens:
            nxt = IMG_END
        else:
            if pos is not None:
                mask = np.zeros(vocab.size, dtype=bool)
                mask[vocab.image_ids(pos)] = True
            else:
                mask = allow.copy()
                mask[Special.IMG_END] = False  # no block is open
            seq = PromptSequence(tuple(tokens), (len(tokens), len(tokens)), prefix.soft_tokens)
            with T.no_grad():
                logits = model.forward(seq).data[-1].astype(np.float64)
            logits = np.where(mask, logits, -np.inf)
            if temperature <= 0:
                idx = int(np.argmax(logits))
            else:
                z = logits / temperature
                p = np.exp(z - z.max())
                p /= p.sum()
                idx = int(rng.choice(vocab.size, p=p))
            nxt = vocab.from_id(idx)
        tokens.append(nxt)
        new.append(nxt)
        if nxt.kind is Kind.SPECIAL and nxt.value in stops:
            return new, False
    return new, True
