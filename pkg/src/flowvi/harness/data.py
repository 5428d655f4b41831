"""JSONL corpora and the synthetic salient-copy task."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from flowvi.errors import DataError
from flowvi.model.tokenizer import SPECIALS, Tokenizer

SPLITS = ("train", "val", "test")
MARKER = "<sal>"


class SchemaError(DataError):
    pass


@dataclass
class Example:
    document: str
    summary: str
    source: str = ""  # "path:line" or "synthetic:seed:index"


@dataclass
class Corpus:
    examples: list[Example]
    split: str = "train"
    provenance: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def documents(self) -> list[str]:
        return [e.document for e in self.examples]

    @property
    def summaries(self) -> list[str]:
        return [e.summary for e in self.examples]


def _load_one(path: Path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"malformed JSON ({exc.msg})", str(path), lineno) from None
            if not isinstance(obj, dict):
                raise SchemaError("expected a JSON object", str(path), lineno)
            for key in ("document", "summary"):
                if key not in obj:
                    raise SchemaError(f"missing key {key!r}", str(path), lineno)
                if not isinstance(obj[key], str):
                    raise SchemaError(f"{key!r} must be a string", str(path), lineno)
            if not obj["document"].split():
                raise DataError("empty document", str(path), lineno)
            out.append(Example(obj["document"], obj["summary"], f"{path}:{lineno}"))
    return out


def load_corpus(*paths, split: str = "train") -> Corpus:
    """Read one or more JSONL files (keys ``document``, ``summary``) and
    concatenate them in order, e.g. original data plus pseudo-labels."""
    if not paths:
        raise ValueError("load_corpus needs at least one path")
    examples = []
    for p in paths:
        examples.extend(_load_one(Path(p)))
    return Corpus(examples, split, [str(p) for p in paths])


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in corpus.examples:
            fh.write(json.dumps({"document": e.document, "summary": e.summary}) + "\n")


# --- synthetic generator ----------------------------------------------------

@dataclass
class SyntheticConfig:
    vocab_size: int = 200
    doc_min_len: int = 16
    doc_max_len: int = 64
    summary_min_len: int = 2
    summary_max_len: int = 16
    n_train: int = 1000
    n_val: int = 100
    n_test: int = 100


def synthetic_words(cfg: SyntheticConfig) -> list[str]:
    n = cfg.vocab_size - len(SPECIALS) - 1
    if n < 2:
        raise ValueError(f"vocab_size {cfg.vocab_size} leaves no room for content words")
    return [f"w{i:03d}" for i in range(n)]


def synthetic_tokenizer(cfg: SyntheticConfig) -> Tokenizer:
    return Tokenizer([*SPECIALS, MARKER, *synthetic_words(cfg)])


def _make_doc(rng: np.random.Generator, words: list[str], cfg: SyntheticConfig) -> tuple[str, str]:
    n_sal = int(rng.integers(cfg.summary_min_len, cfg.summary_max_len + 1))
    # each salient word costs two tokens (marker + word)
    length = int(rng.integers(max(cfg.doc_min_len, 2 * n_sal), cfg.doc_max_len + 1))
    n_plain = length - 2 * n_sal
    slots = np.sort(rng.choice(n_plain + n_sal, size=n_sal, replace=False))
    toks, summary = [], []
    is_sal = np.zeros(n_plain + n_sal, dtype=bool)
    is_sal[slots] = True
    for flag in is_sal:
        w = words[int(rng.integers(len(words)))]
        if flag:
            toks += [MARKER, w]
            summary.append(w)
        else:
            toks.append(w)
    return " ".join(toks), " ".join(summary)


def salient_summary(document: str) -> str:
    """The summary rule: every word immediately after a marker, in order."""
    toks = document.split()
    return " ".join(toks[i + 1] for i in range(len(toks) - 1) if toks[i] == MARKER)


def gen_synthetic(cfg: SyntheticConfig | None = None, seed: int = 0) -> dict[str, Corpus]:
    """Deterministic train/val/test corpora with pairwise-distinct documents."""
    cfg = cfg or SyntheticConfig()
    if cfg.doc_max_len < 2 * cfg.summary_min_len or cfg.summary_min_len < 1:
        raise ValueError("doc_max_len must fit summary_min_len marked words")
    if cfg.doc_min_len > cfg.doc_max_len or cfg.summary_min_len > cfg.summary_max_len:
        raise ValueError("minimum lengths must not exceed maximum lengths")
    rng = np.random.default_rng(seed)
    words = synthetic_words(cfg)
    sizes = dict(zip(SPLITS, (cfg.n_train, cfg.n_val, cfg.n_test)))
    seen: set[str] = set()
    out = {}
    idx = 0
    for split, n in sizes.items():
        examples = []
        while len(examples) < n:
            doc, summ = _make_doc(rng, words, cfg)
            if doc in seen:
                continue
            seen.add(doc)
            examples.append(Example(doc, summ, f"synthetic:{seed}:{idx}"))
            idx += 1
        out[split] = Corpus(examples, split, [f"synthetic(seed={seed})"])
    return out


def corpus_texts(corpora: Iterable[Corpus]) -> Iterable[str]:
    for c in corpora:
        for e in c.examples:
            yield e.document
            yield e.summary
