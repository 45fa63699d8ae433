"""Tokens and the joint word / special / image-code vocabulary."""

from __future__ import annotations

import enum
from collections import Counter
from typing import NamedTuple

import numpy as np


class Special(enum.IntEnum):
    BOS = 0
    EOS = 1
    NODE = 2
    GEN = 3
    TXT_END = 4
    IMG_START = 5
    IMG_END = 6
    UNK = 7
    PAD = 8


SPECIAL_NAMES = {
    Special.BOS: "<bos>",
    Special.EOS: "<eos>",
    Special.NODE: "<node>",
    Special.GEN: "<gen>",
    Special.TXT_END: "</txt>",
    Special.IMG_START: "<img>",
    Special.IMG_END: "</img>",
    Special.UNK: "<unk>",
    Special.PAD: "<pad>",
}
_NAME_TO_SPECIAL = {v: k for k, v in SPECIAL_NAMES.items()}


class Kind(enum.Enum):
    WORD = "word"
    IMAGE = "image"
    SPECIAL = "special"
    SOFT = "soft"


class Token(NamedTuple):
    """``value`` is a word id, code id, special id or soft-row index; ``pos`` is the image position."""

    kind: Kind
    value: int
    pos: int = 0

    @classmethod
    def word(cls, i):
        return cls(Kind.WORD, int(i))

    @classmethod
    def image(cls, pos, code):
        return cls(Kind.IMAGE, int(code), int(pos))

    @classmethod
    def special(cls, s):
        return cls(Kind.SPECIAL, int(s))

    @classmethod
    def soft(cls, row):
        return cls(Kind.SOFT, int(row))


BOS = Token.special(Special.BOS)
EOS = Token.special(Special.EOS)
NODE = Token.special(Special.NODE)
GEN = Token.special(Special.GEN)
TXT_END = Token.special(Special.TXT_END)
IMG_START = Token.special(Special.IMG_START)
IMG_END = Token.special(Special.IMG_END)
UNK = Token.special(Special.UNK)
PAD = Token.special(Special.PAD)


def tokenize(text):
    return text.lower().split()


class Vocab:
    """Id layout: specials, then words, then ``image_tokens`` blocks of ``image_codes`` ids."""

    def __init__(self, words, image_tokens, image_codes):
        self.words = list(words)
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate words")
        self.word_index = {w: i for i, w in enumerate(self.words)}
        self.image_tokens = int(image_tokens)
        self.image_codes = int(image_codes)
        self.n_special = len(Special)
        self.word_offset = self.n_special
        self.image_offset = self.word_offset + len(self.words)
        self.size = self.image_offset + self.image_tokens * self.image_codes

    @classmethod
    def build(cls, texts, image_tokens=4, image_codes=64, min_freq=2):
        counts = Counter(w for t in texts for w in tokenize(t))
        if not counts:
            raise ValueError("cannot build a vocabulary from an empty corpus")
        words = sorted(w for w, c in counts.items() if c >= min_freq)
        return cls(words, image_tokens, image_codes)

    @property
    def n_words(self):
        return len(self.words)

    def word_tokens(self, text):
        return [Token.word(self.word_index[w]) if w in self.word_index else UNK for w in tokenize(text)]

    def token_id(self, tok):
        if tok.kind is Kind.SPECIAL:
            return tok.value
        if tok.kind is Kind.WORD:
            return self.word_offset + tok.value
        if tok.kind is Kind.IMAGE:
            return self.image_offset + tok.pos * self.image_codes + tok.value
        raise ValueError("soft graph tokens have no vocabulary id")

    def encode(self, tokens):
        """Vocabulary ids; soft graph positions map to -1."""
        return np.array([-1 if t.kind is Kind.SOFT else self.token_id(t) for t in tokens], dtype=np.int64)

    def from_id(self, i):
        i = int(i)
        if i < self.word_offset:
            return Token.special(i)
        if i < self.image_offset:
            return Token.word(i - self.word_offset)
        pos, code = divmod(i - self.image_offset, self.image_codes)
        if pos >= self.image_tokens:
            raise IndexError(f"id {i} outside vocabulary of size {self.size}")
        return Token.image(pos, code)

    def word_ids(self):
        return np.arange(self.word_offset, self.image_offset)

    def image_ids(self, pos):
        lo = self.image_offset + pos * self.image_codes
        return np.arange(lo, lo + self.image_codes)

    def render(self, tok):
        if tok.kind is Kind.SPECIAL:
            return SPECIAL_NAMES[Special(tok.value)]
        if tok.kind is Kind.WORD:
            return self.words[tok.value]
        if tok.kind is Kind.IMAGE:
            return f"#{tok.value}"
        return f"<g{tok.value}>"

    def parse(self, piece):
        """Inverse of :meth:`render` for words and specials."""
        if piece in _NAME_TO_SPECIAL:
            return Token.special(_NAME_TO_SPECIAL[piece])
        if piece in self.word_index:
            return Token.word(self.word_index[piece])
        raise KeyError(piece)

    def detokenize(self, tokens):
        return " ".join(self.render(t) for t in tokens if t.kind is Kind.WORD or t == UNK)

    def save(self, path):
        """``token<TAB>id`` lines. Image codes are written as ``<img{pos}:{code}>``."""
        with open(path, "w", encoding="utf-8") as fh:
            for i in range(self.size):
                tok = self.from_id(i)
                name = f"<img{tok.pos}:{tok.value}>" if tok.kind is Kind.IMAGE else self.render(tok)
                fh.write(f"{name}\t{i}\n")

    @classmethod
    def load(cls, path):
        words, max_pos, max_code = [], -1, -1
        with open(path, encoding="utf-8") as fh:
            entries = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
        for name, idx in entries:
            idx = int(idx)
            if name.startswith("<img") and ":" in name:
                pos, code = name[4:-1].split(":")
                max_pos, max_code = max(max_pos, int(pos)), max(max_code, int(code))
            elif name in _NAME_TO_SPECIAL:
                if _NAME_TO_SPECIAL[name] != idx:
                    raise ValueError(f"special {name} has id {idx}, expected {int(_NAME_TO_SPECIAL[name])}")
            else:
                words.append((idx, name))
        words.sort()
        vocab = cls([w for _, w in words], max_pos + 1, max_code + 1)
        if vocab.size != len(entries):
            raise ValueError("vocabulary file is inconsistent")
        return vocab
