"""Command-line entry point: ``flowvi {train,evaluate,gen-data,sample-latents,grad-check}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from flowvi.errors import CapabilityError, ConfigError, ContractError, DataError, NumericError, ShapeError
from flowvi.flows import INVERTIBLE_KINDS, KINDS

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


def _cmd_train(args) -> int:
    from flowvi.harness.run import run_experiment

    summary = run_experiment(args.config, args.run_dir)
    print(json.dumps({k: v for k, v in summary.items() if k != "evals"}, indent=2))
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    from flowvi.harness.run import evaluate_run

    report = evaluate_run(args.run_dir, args.corpus)
    text = report.to_json(args.out)
    if args.out is None:
        print(text)
    else:
        print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_gen_data(args) -> int:
    from flowvi.harness.config import load_config
    from flowvi.harness.data import gen_synthetic, save_corpus, synthetic_tokenizer

    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, corpus in gen_synthetic(cfg.synthetic_config(), cfg.data_seed).items():
        save_corpus(corpus, out / f"{split}.jsonl")
        print(f"{split}: {len(corpus)} examples -> {out / f'{split}.jsonl'}")
    synthetic_tokenizer(cfg.synthetic_config()).save(out / "vocab.txt")
    return EXIT_OK


def _cmd_sample_latents(args) -> int:
    from flowvi.harness.data import load_corpus
    from flowvi.harness.run import dump_latents, load_run, to_batch

    cfg, tok, model = load_run(args.run_dir)
    batch = to_batch(load_corpus(args.corpus, split="test"), tok, cfg)
    out = args.out or str(Path(args.run_dir) / "latents.csv")
    rows = dump_latents(model, batch, args.n, out, np.random.default_rng(args.seed), full=args.full)
    print(f"wrote {rows} rows to {out}")
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    from flowvi.harness.gradcheck import model_grad_check

    worst = 0.0
    for kind in args.flow:
        rep = model_grad_check(kind, seed=args.seed, n_coords=args.coords)
        worst = max(worst, rep.max_rel_error)
        status = "ok" if rep.max_rel_error <= args.tol else "FAIL"
        print(f"{kind:10s} max_rel_error={rep.max_rel_error:.3e} checked={rep.n_checked} "
              f"kinks={len(rep.flagged)} {status}")
    return EXIT_OK if worst <= args.tol else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowvi", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run an experiment from a YAML config")
    t.add_argument("config")
    t.add_argument("--run-dir", default=None, help="default: <out_dir>/<name>")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("evaluate", help="decode a JSONL corpus with a trained run and score it")
    e.add_argument("run_dir")
    e.add_argument("corpus")
    e.add_argument("--out", default=None, help="write the report JSON here instead of stdout")
    e.set_defaults(fn=_cmd_evaluate)

    g = sub.add_parser("gen-data", help="write the synthetic corpus splits as JSONL")
    g.add_argument("config")
    g.add_argument("--out", default="data")
    g.set_defaults(fn=_cmd_gen_data)

    s = sub.add_parser("sample-latents", help="dump z0/zK draws for each document to CSV")
    s.add_argument("run_dir")
    s.add_argument("corpus")
    s.add_argument("n", type=int)
    s.add_argument("--out", default=None)
    s.add_argument("--full", action="store_true", help="all latent coordinates, not just two")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=_cmd_sample_latents)

    c = sub.add_parser("grad-check", help="finite-difference check of the total loss on a tiny model")
    c.add_argument("--flow", nargs="+", default=list(INVERTIBLE_KINDS), choices=KINDS)
    c.add_argument("--tol", type=float, default=1e-3)
    c.add_argument("--coords", type=int, default=40, help="coordinates sampled per parameter group")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=_cmd_grad_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except NumericError as exc:  # includes aborted training
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError, ContractError, ShapeError, CapabilityError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
