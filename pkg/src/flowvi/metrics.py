"""ROUGE-1/2/L F1, rep-w and average length on raw whitespace tokens."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from flowvi.model.tokenizer import SPECIALS

SCHEMA_VERSION = 1
DEFAULT_REP_WINDOW = 16
_NON_CONTENT = set(SPECIALS[:3])  # pad, bos, eos


def _tokens(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def _ngrams(toks: list[str], n: int) -> Counter:
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def rouge_n(candidate, reference, n: int) -> float:
    """Clipped n-gram overlap F1; 0 when either side has no n-grams."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    c, r = _ngrams(_tokens(candidate), n), _ngrams(_tokens(reference), n)
    if not c or not r:
        return 0.0
    overlap = sum((c & r).values())
    return _f1(overlap / sum(c.values()), overlap / sum(r.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> float:
    """Summary-level LCS F1 with P = LCS/|cand| and R = LCS/|ref|."""
    c, r = _tokens(candidate), _tokens(reference)
    if not c or not r:
        return 0.0
    lcs = lcs_length(c, r)
    return _f1(lcs / len(c), lcs / len(r))


def rep_w(tokens, w: int = DEFAULT_REP_WINDOW) -> float:
    """Fraction of positions t >= 2 whose token occurred in the previous w
    tokens, normalized by |s|."""
    s = _tokens(tokens)
    if not s:
        raise ValueError("rep_w needs a non-empty sequence")
    if w < 1:
        raise ValueError(f"window must be >= 1, got {w}")
    hits = sum(s[t] in s[max(t - w, 0):t] for t in range(1, len(s)))
    return hits / len(s)


def content_length(tokens) -> int:
    return sum(t not in _NON_CONTENT for t in _tokens(tokens))


def avg_length(decoded: Sequence) -> float:
    if not decoded:
        raise ValueError("avg_length of an empty set")
    return float(np.mean([content_length(d) for d in decoded]))


@dataclass
class ExampleScores:
    rouge1: float
    rouge2: float
    rougeL: float
    rep_w: float
    length: int
    empty: bool  # candidate or reference had no tokens


@dataclass
class EvalReport:
    rouge1: float
    rouge2: float
    rougeL: float
    rep_w: float
    avg_length: float
    rep_window: int
    n_examples: int
    examples: list[ExampleScores] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION
    tokenization: str = "raw lowercase whitespace tokens, no stemming or stopword removal"

    def to_json(self, path=None, indent: int = 2) -> str:
        text = json.dumps(asdict(self), indent=indent)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        d["examples"] = [ExampleScores(**e) for e in d.get("examples", [])]
        return cls(**d)


def evaluate_corpus(candidates: Sequence, references: Sequence, w: int = DEFAULT_REP_WINDOW) -> EvalReport:
    """Unweighted means of per-example scores. A reference may be a string
    or a list of reference strings; the latter scores as the max."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("evaluate_corpus needs at least one example")
    rows = []
    for cand, ref in zip(candidates, references):
        refs = [ref] if isinstance(ref, str) else list(ref)
        c = [t for t in _tokens(cand) if t not in _NON_CONTENT]
        rows.append(ExampleScores(
            rouge1=max(rouge_n(c, r, 1) for r in refs),
            rouge2=max(rouge_n(c, r, 2) for r in refs),
            rougeL=max(rouge_l(c, r) for r in refs),
            rep_w=rep_w(c, w) if c else 0.0,
            length=len(c),
            empty=not c or any(not _tokens(r) for r in refs),
        ))
    mean = lambda key: float(np.mean([getattr(r, key) for r in rows]))  # noqa: E731
    return EvalReport(mean("rouge1"), mean("rouge2"), mean("rougeL"), mean("rep_w"),
                      mean("length"), w, len(rows), rows)
