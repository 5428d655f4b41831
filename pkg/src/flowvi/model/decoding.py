"""Beam search over any next-token log-prob function, plus the model adapter."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from flowvi import numcore as nc
from flowvi.model.batch import Batch
from flowvi.model.sumodel import SumModel, decode_states, encode, gate_fuse, posterior
from flowvi.model.tokenizer import BOS, EOS, PAD

NextLogProbs = Callable[[np.ndarray], np.ndarray]  # (k, t) prefixes -> (k, V) log-probs


@dataclass
class Hypothesis:
    tokens: list[int]   # generated tokens, bos excluded, eos included when present
    logprob: float
    score: float        # logprob / len^length_penalty
    truncated: bool     # max_len reached without eos


def _normalize(logprob: float, length: int, length_penalty: float) -> float:
    return logprob / (max(length, 1) ** length_penalty)


def beam_search(next_logprobs: NextLogProbs, beam_size: int = 4, length_penalty: float = 2.0,
                max_len: int = 16, bos: int = BOS, eos: int = EOS,
                banned: Sequence[int] = (PAD, BOS)) -> Hypothesis:
    """Keep the ``beam_size`` best expansions by cumulative log-prob; those
    ending in eos retire. Returns the best retired (or max_len-truncated)
    hypothesis by length-normalized score. ``beam_size=1`` is greedy."""
    if beam_size < 1 or max_len < 1:
        raise ValueError(f"beam_size and max_len must be >= 1, got {beam_size}, {max_len}")
    live: list[tuple[list[int], float]] = [([], 0.0)]
    done: list[Hypothesis] = []
    banned = list(banned)
    for step in range(1, max_len + 1):
        prefixes = np.array([[bos, *toks] for toks, _ in live], dtype=np.int64)
        lp = np.array(next_logprobs(prefixes), dtype=float)
        lp[:, banned] = -np.inf
        total = lp + np.array([s for _, s in live])[:, None]
        flat = total.ravel()
        order = np.argsort(-flat, kind="stable")[:beam_size]
        order = order[np.isfinite(flat[order])]
        new_live = []
        for idx in order:
            b, tok = divmod(int(idx), lp.shape[1])
            toks, lpb = live[b][0] + [tok], float(flat[idx])
            if tok == eos:
                done.append(Hypothesis(toks, lpb, _normalize(lpb, len(toks), length_penalty), False))
            elif step == max_len:
                done.append(Hypothesis(toks, lpb, _normalize(lpb, len(toks), length_penalty), True))
            else:
                new_live.append((toks, lpb))
        live = new_live
        if not live:
            break
    # ties resolve to the earliest-found hypothesis
    return max(done, key=lambda h: h.score)


def greedy_decode(next_logprobs: NextLogProbs, max_len: int = 16, **kw) -> Hypothesis:
    return beam_search(next_logprobs, beam_size=1, max_len=max_len, **kw)


def model_scorer(model: SumModel, batch: Batch, i: int) -> NextLogProbs:
    """Next-token log-probs for document ``i``; the latent is fixed once per
    document at the transport of mu0 (eps = 0)."""
    one = batch.subset(slice(i, i + 1))
    with nc.no_grad():
        memory = encode(model, one.src, one.src_mask)
        zK = posterior(model, one, deterministic=True).zK

    def fn(prefixes: np.ndarray) -> np.ndarray:
        k = prefixes.shape[0]
        with nc.no_grad():
            mem = nc.Tensor(np.broadcast_to(memory.data, (k, *memory.shape[1:])))
            mask = np.broadcast_to(one.src_mask, (k, one.src_mask.shape[1]))
            h = decode_states(model, mem, mask, prefixes)
            h_last = nc.Tensor(h.data[:, -1:, :])
            z = nc.Tensor(np.broadcast_to(zK.data, (k, zK.shape[1])))
            logits = model.lm_head(gate_fuse(h_last, z, model.gate))
            return nc.log_softmax(logits, axis=-1).data[:, 0, :]

    return fn


def decode_batch(model: SumModel, batch: Batch, beam_size: int = 4, length_penalty: float = 2.0,
                 max_len: int = 16) -> list[Hypothesis]:
    was_training = model.training
    model.eval()
    try:
        return [beam_search(model_scorer(model, batch, i), beam_size, length_penalty, max_len)
                for i in range(len(batch))]
    finally:
        model.train(was_training)
