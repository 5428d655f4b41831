"""Run orchestration: data -> model -> training -> decoding -> artifacts."""

from __future__ import annotations

import csv
import json
import logging
import time
import traceback
from dataclasses import asdict
from pathlib import Path

import numpy as np

from flowvi import numcore as nc
from flowvi.errors import FlowVIError
from flowvi.harness.config import RunConfig, load_config
from flowvi.harness.data import Corpus, corpus_texts, gen_synthetic, load_corpus, synthetic_tokenizer
from flowvi.latent import infer_posterior, sample_latent
from flowvi.metrics import EvalReport, evaluate_corpus
from flowvi.model import Batch, SumModel, Tokenizer, bow_embedding, decode_batch, make_batch
from flowvi.trainer import (StepLog, collapse_monitor, evaluate_lm, train, warm_start_backbone,
                            write_steplog_csv)

log = logging.getLogger(__name__)

ARTIFACTS = {
    "config": "config.yaml",
    "vocab": "vocab.txt",
    "backbone": "backbone.csv",
    "steps": "steps.csv",
    "evals": "evals.csv",
    "params": "params.npz",
    "report": "report.json",
    "decoded": "decoded.txt",
    "summary": "summary.json",
    "latents": "latents.csv",
    "error": "error.json",
}


def prepare_data(cfg: RunConfig) -> tuple[dict[str, Corpus], Tokenizer]:
    if cfg.train_path:
        corpora = {"train": load_corpus(cfg.train_path, split="train")}
        for split, path in (("val", cfg.val_path), ("test", cfg.test_path)):
            if path:
                corpora[split] = load_corpus(path, split=split)
        if cfg.vocab_path:
            tok = Tokenizer.from_file(cfg.vocab_path)
        else:
            tok = Tokenizer.build(corpus_texts([corpora["train"]]), cfg.vocab_max_size)
    else:
        corpora = gen_synthetic(cfg.synthetic_config(), cfg.data_seed)
        tok = Tokenizer.from_file(cfg.vocab_path) if cfg.vocab_path else synthetic_tokenizer(cfg.synthetic_config())
    return corpora, tok


def to_batch(corpus: Corpus, tok: Tokenizer, cfg: RunConfig) -> Batch:
    return make_batch(tok, corpus.documents, corpus.summaries, cfg.max_src, cfg.max_tgt)


def build_model(cfg: RunConfig, tok: Tokenizer) -> SumModel:
    return SumModel(cfg.model_config(tok.vocab_size), np.random.default_rng([cfg.seed, 2]))


def decode_corpus(model: SumModel, corpus: Corpus, tok: Tokenizer, cfg: RunConfig) -> list[str]:
    docs = corpus.documents[: cfg.n_decode or None]
    batch = make_batch(tok, docs, None, cfg.max_src, cfg.max_tgt)
    hyps = decode_batch(model, batch, cfg.beam_size, cfg.length_penalty, cfg.decode_max_len)
    return [tok.decode(h.tokens) for h in hyps]


def _fmt(x) -> str:
    return repr(float(x))  # shortest round-trip text, never "np.float64(...)"


def dump_latents(model: SumModel, batch: Batch, n_samples: int, path, rng: np.random.Generator,
                 full: bool = False) -> int:
    """Write ``doc_id, sample_id, z0_*, zK_*`` rows; two coordinates unless
    ``full``. Returns the row count."""
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    was = model.training
    model.eval()
    dims = model.cfg.latent_dim if full else min(2, model.cfg.latent_dim)
    rows = 0
    try:
        with nc.no_grad(), open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["doc_id", "sample_id", *[f"z0_{i}" for i in range(dims)],
                        *[f"zK_{i}" for i in range(dims)]])
            mu, ls = infer_posterior(model.infer, bow_embedding(batch.bow, model.embed))
            for doc in range(len(batch)):
                s = sample_latent(np.repeat(mu.data[doc:doc + 1], n_samples, axis=0),
                                  np.repeat(ls.data[doc:doc + 1], n_samples, axis=0), model.flows, rng)
                for j in range(n_samples):
                    w.writerow([doc, j, *map(_fmt, s.z0.data[j, :dims]), *map(_fmt, s.zK.data[j, :dims])])
                    rows += 1
    finally:
        model.train(was)
    return rows


def save_params(model: SumModel, path) -> None:
    np.savez(path, **model.state_dict())


def load_run(run_dir) -> tuple[RunConfig, Tokenizer, SumModel]:
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / ARTIFACTS["config"], environ={})
    tok = Tokenizer.from_file(run_dir / ARTIFACTS["vocab"])
    model = build_model(cfg, tok)
    with np.load(run_dir / ARTIFACTS["params"]) as state:
        model.load_state_dict(dict(state))
    model.eval()
    return cfg, tok, model


def evaluate_run(run_dir, corpus_path) -> EvalReport:
    cfg, tok, model = load_run(run_dir)
    corpus = load_corpus(corpus_path, split="test")
    decoded = decode_corpus(model, corpus, tok, cfg)
    return evaluate_corpus(decoded, corpus.summaries[: len(decoded)], cfg.rep_window)


def _write_manifest(run_dir: Path, stage: str, exc: BaseException) -> None:
    present = sorted(p.name for p in run_dir.iterdir() if p.name != ARTIFACTS["error"])
    manifest = {
        "stage": stage,
        "type": type(exc).__name__,
        "message": str(exc),
        "step": getattr(exc, "step", None),
        "phase": getattr(exc, "phase", None),
        "param": getattr(exc, "param", None),
        "artifacts": present,
        "traceback": traceback.format_exception_only(type(exc), exc),
    }
    (run_dir / ARTIFACTS["error"]).write_text(json.dumps(manifest, indent=2) + "\n")


def run_experiment(config, run_dir=None) -> dict:
    """Execute one run and persist its artifacts. ``config`` is a path or a
    RunConfig. On failure the partial artifacts stay and ``error.json``
    names the failing stage before the exception propagates."""
    cfg = load_config(config) if not isinstance(config, RunConfig) else config.validate()
    run_dir = Path(run_dir) if run_dir is not None else Path(cfg.out_dir) / cfg.name
    run_dir.mkdir(parents=True, exist_ok=True)
    stale = run_dir / ARTIFACTS["error"]
    if stale.exists():
        stale.unlink()
    cfg.save(run_dir / ARTIFACTS["config"])
    logs: list[StepLog] = []
    stage = "data"
    t0 = time.perf_counter()
    try:
        corpora, tok = prepare_data(cfg)
        tok.save(run_dir / ARTIFACTS["vocab"])
        train_b = to_batch(corpora["train"], tok, cfg)
        val_b = to_batch(corpora["val"], tok, cfg) if "val" in corpora else None

        stage = "model"
        model = build_model(cfg, tok)

        if cfg.backbone_steps:
            stage = "warm_start"
            losses = warm_start_backbone(model, train_b, cfg.backbone_steps, cfg.backbone_lr,
                                         cfg.batch_size, cfg.seed, cfg.clip_norm, cfg.warmup_frac)
            with open(run_dir / ARTIFACTS["backbone"], "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["step", "ce"])
                w.writerows((i + 1, repr(v)) for i, v in enumerate(losses))

        stage = "train"
        tcfg = cfg.train_config()
        result = train(model, train_b, tcfg, val_b, on_step=lambda rec, _: logs.append(rec))
        write_steplog_csv(logs, run_dir / ARTIFACTS["steps"])
        with open(run_dir / ARTIFACTS["evals"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "nll", "ppl", "accuracy"])
            for e in result.evals:
                w.writerow([e.step, repr(float(e.nll)), repr(float(e.ppl)), repr(float(e.accuracy))])
        save_params(model, run_dir / ARTIFACTS["params"])
        collapse = collapse_monitor(logs, tcfg.collapse_window, tcfg.collapse_threshold)

        stage = "evaluate"
        summary = {
            "name": cfg.name,
            "preset": cfg.preset,
            "backbone_steps": cfg.backbone_steps,
            "steps_run": result.steps_run,
            "n_max": tcfg.n_max,
            "n_agg": tcfg.n_agg,
            "stopped_early": result.stopped_early,
            "collapse": asdict(collapse),
            "evals": [{k: float(v) if k != "step" else v for k, v in asdict(e).items()} for e in result.evals],
        }
        if "test" in corpora and len(corpora["test"]):
            decoded = decode_corpus(model, corpora["test"], tok, cfg)
            (run_dir / ARTIFACTS["decoded"]).write_text("\n".join(decoded) + "\n", encoding="utf-8")
            report = evaluate_corpus(decoded, corpora["test"].summaries[: len(decoded)], cfg.rep_window)
            report.to_json(run_dir / ARTIFACTS["report"])
            summary.update(rouge1=report.rouge1, rouge2=report.rouge2, rougeL=report.rougeL,
                           rep_w=report.rep_w, avg_length=report.avg_length)
            if cfg.n_latent_samples:
                test_b = to_batch(corpora["test"], tok, cfg)
                dump_latents(model, test_b, cfg.n_latent_samples, run_dir / ARTIFACTS["latents"],
                             np.random.default_rng([cfg.seed, 3]))
        summary["seconds"] = time.perf_counter() - t0
        (run_dir / ARTIFACTS["summary"]).write_text(json.dumps(summary, indent=2) + "\n")
        return summary
    except (FlowVIError, OSError, ValueError) as exc:
        if logs and not (run_dir / ARTIFACTS["steps"]).exists():
            write_steplog_csv(logs, run_dir / ARTIFACTS["steps"])
        _write_manifest(run_dir, stage, exc)
        raise


__all__ = ["ARTIFACTS", "build_model", "decode_corpus", "dump_latents", "evaluate_lm", "evaluate_run",
           "load_run", "prepare_data", "run_experiment", "save_params", "to_batch"]
