"""Whitespace tokenizer over a fixed vocabulary file."""

from __future__ import annotations

from collections import Counter
from pathlib import Path
from typing import Iterable

import numpy as np

from flowvi.errors import DataError

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
PAD, BOS, EOS, UNK = range(4)


class Tokenizer:
    """Lowercase + whitespace split. Ids 0-3 are pad, bos, eos, unk."""

    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            raise DataError(f"vocabulary must start with {SPECIALS}, got {tokens[:4]}")
        if len(set(tokens)) != len(tokens):
            dup = [t for t, c in Counter(tokens).items() if c > 1]
            raise DataError(f"duplicate vocabulary entries: {dup[:5]}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_file(cls, path) -> "Tokenizer":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(line.strip() for line in lines if line.strip())

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int | None = None) -> "Tokenizer":
        """Vocabulary from corpus text, most frequent first (ties alphabetical)."""
        counts = Counter(tok for text in texts for tok in cls.split(text))
        for s in SPECIALS:
            counts.pop(s, None)
        words = sorted(counts, key=lambda w: (-counts[w], w))
        if max_size is not None:
            words = words[: max(0, max_size - len(SPECIALS))]
        return cls([*SPECIALS, *words])

    @staticmethod
    def split(text: str) -> list[str]:
        return text.lower().split()

    def encode(self, text: str, add_bos: bool = False, add_eos: bool = False) -> np.ndarray:
        ids = [self.index.get(t, UNK) for t in self.split(text)]
        if add_bos:
            ids.insert(0, BOS)
        if add_eos:
            ids.append(EOS)
        return np.array(ids, dtype=np.int64)

    def decode(self, ids, strip: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS:
                break
            if strip and i in (PAD, BOS):
                continue
            out.append(self.tokens[i])
        return " ".join(out)
