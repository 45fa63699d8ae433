"""Sequential and parallel generation of a node's text and image."""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .lm import generate, outside_mask, text_mask
from .linearize import PromptSequence
from .vocab import GEN, IMG_END, IMG_START, TXT_END, Kind, Special


class Strategy(str, enum.Enum):
    TEXT_FIRST = "text-first"
    IMAGE_FIRST = "image-first"
    PARALLEL = "parallel"


@dataclass
class GeneratedNode:
    text: str
    image_feat: np.ndarray
    text_tokens: list
    image_tokens: list
    strategy: Strategy
    seed: int
    truncated: bool = False
    target_id: int = -1
    meta: dict = field(default_factory=dict)

    def record(self):
        return {
            "target_id": self.target_id,
            "strategy": self.strategy.value,
            "text": self.text,
            "image_feat": [float(x) for x in self.image_feat],
            "seed": self.seed,
        }


def stage_seed(seed, stage):
    """Reproducible per-stage seed derived from ``(seed, stage)``."""
    digest = hashlib.sha256(f"{int(seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _extend(seq, tokens):
    return PromptSequence(seq.tokens + tuple(tokens), seq.target_span, seq.soft_tokens)


def text_stage(prefix, model, seed, temperature, max_new):
    """Words until ``</txt>``. Returns the word tokens (stop excluded) and a truncation flag."""
    out, trunc = generate(
        prefix, model, (Special.TXT_END,), max_new, temperature, stage_seed(seed, "text"), text_mask(model.vocab)
    )
    return [t for t in out if t != TXT_END], trunc


def image_stage(prefix, model, seed, temperature):
    """Force ``<img>``, then codes until ``</img>``. Returns the code tokens."""
    vocab = model.vocab
    out, trunc = generate(
        _extend(prefix, [IMG_START]),
        model,
        (Special.IMG_END,),
        vocab.image_tokens + 1,
        temperature,
        stage_seed(seed, "image"),
        outside_mask(vocab, []),
    )
    return [t for t in out if t.kind is Kind.IMAGE], trunc


def infer(context, model, codebook, strategy=Strategy.TEXT_FIRST, seed=0, temperature=0.7, max_new=64):
    """Generate ``(text, image)`` for the target whose prompt is ``context``.

    ``context`` must be in inference form (ending at ``<gen>``). Sequential strategies
    condition the second modality on the first; parallel runs both stages from the same
    context independently.
    """
    strategy = Strategy(strategy)
    if not context.tokens or context.tokens[-1] != GEN:
        raise ValueError("inference context must end with <gen>")
    if strategy is Strategy.TEXT_FIRST:
        words, t1 = text_stage(context, model, seed, temperature, max_new)
        codes, t2 = image_stage(_extend(context, [*words, TXT_END]), model, seed, temperature)
    elif strategy is Strategy.IMAGE_FIRST:
        codes, t1 = image_stage(context, model, seed, temperature)
        words, t2 = text_stage(_extend(context, [IMG_START, *codes, IMG_END]), model, seed, temperature, max_new)
    else:
        words, t1 = text_stage(context, model, seed, temperature, max_new)
        codes, t2 = image_stage(context, model, seed, temperature)
    if [t.pos for t in codes] != list(range(codebook.n_positions)):
        raise RuntimeError("image stage produced a malformed code block")
    if any(t.kind is Kind.IMAGE for t in words):
        raise RuntimeError("text stage produced image codes")
    feat = codebook.decode([t.value for t in codes])
    return GeneratedNode(
        text=model.vocab.detokenize(words),
        image_feat=feat,
        text_tokens=words,
        image_tokens=codes,
        strategy=strategy,
        seed=seed,
        truncated=t1 or t2,
    )


def write_generated(nodes, fh):
    for g in nodes:
        fh.write(json.dumps(g.record()) + "\n")
