"""Padded id batches with bag-of-words counts of the untruncated source."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from flowvi import numcore as nc
from flowvi.errors import EmptyInputError, ShapeError
from flowvi.model.tokenizer import BOS, EOS, PAD, Tokenizer


@dataclass
class Batch:
    src: np.ndarray       # (B, m) source ids, right-padded
    src_mask: np.ndarray  # (B, m) True at real tokens
    tgt_in: np.ndarray    # (B, n) bos + summary, teacher-forcing input
    tgt_out: np.ndarray   # (B, n) summary + eos, prediction targets
    tgt_mask: np.ndarray  # (B, n)
    bow: np.ndarray       # (B, V) token counts over the full source

    def __len__(self) -> int:
        return self.src.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.src[idx], self.src_mask[idx], self.tgt_in[idx],
                     self.tgt_out[idx], self.tgt_mask[idx], self.bow[idx])


def _pad(seqs: list[np.ndarray], width: int | None = None) -> np.ndarray:
    width = max(len(s) for s in seqs) if width is None else width
    out = np.full((len(seqs), max(width, 1)), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def make_batch(tok: Tokenizer, documents: Sequence[str], summaries: Sequence[str] | None = None,
               max_src: int = 64, max_tgt: int = 16) -> Batch:
    """Encode, truncate to ``max_src``/``max_tgt`` and pad. Without summaries
    the target fields are a lone bos/eos column (decode-only batches)."""
    if summaries is not None and len(summaries) != len(documents):
        raise ShapeError(f"{len(documents)} documents but {len(summaries)} summaries")
    full = [tok.encode(d) for d in documents]
    for i, ids in enumerate(full):
        if ids.size == 0:
            raise EmptyInputError(f"document {i} has no tokens")
    bow = np.zeros((len(full), tok.vocab_size))
    for i, ids in enumerate(full):
        np.add.at(bow[i], ids, 1.0)
    src = _pad([ids[:max_src] for ids in full])
    tgt_in, tgt_out = [], []
    for s in summaries if summaries is not None else [""] * len(full):
        y = tok.encode(s)[:max_tgt]
        tgt_in.append(np.concatenate([[BOS], y]))
        tgt_out.append(np.concatenate([y, [EOS]]))
    tgt_in, tgt_out = _pad(tgt_in), _pad(tgt_out)
    return Batch(src, src != PAD, tgt_in, tgt_out, tgt_out != PAD, bow)


def bow_embedding(b, E) -> nc.Tensor:
    """``xbar = (sum_v b_v E_v) / sum_v b_v`` for one count vector or a batch."""
    b = np.asarray(b, dtype=float)
    single = b.ndim == 1
    b2 = b.reshape(1, -1) if single else b
    E = nc.as_tensor(E)
    if b2.shape[1] != E.shape[0]:
        raise ShapeError(f"bow_embedding: counts over {b2.shape[1]} tokens, table has {E.shape[0]} rows")
    total = b2.sum(axis=1, keepdims=True)
    if np.any(total <= 0):
        raise EmptyInputError("bow_embedding: empty document (counts sum to 0)")
    out = nc.matmul(nc.Tensor(b2 / total), E)
    return nc.reshape(out, (-1,)) if single else out
