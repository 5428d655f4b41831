"""End-to-end gradient check of the total loss through a tiny model."""

from __future__ import annotations

import numpy as np

from flowvi import numcore as nc
from flowvi.flows import perturb_parameters
from flowvi.model import ModelConfig, SumModel, forward, make_batch, posterior
from flowvi.model.tokenizer import SPECIALS, Tokenizer
from flowvi.numcore import GradCheckReport
from flowvi.objective import cross_entropy, total_loss, vi_loss

TINY_WORDS = [f"t{i}" for i in range(8)]


def tiny_model(kind: str, seed: int = 0, d: int = 8, latent_dim: int = 4, n_flows: int = 2,
               gate_init: str = "standard") -> tuple[SumModel, Tokenizer]:
    tok = Tokenizer([*SPECIALS, *TINY_WORDS])
    cfg = ModelConfig(vocab_size=len(tok), d_model=d, n_heads=2, n_enc=1, n_dec=1, d_ff=16,
                      dropout=0.0, latent_dim=latent_dim, flow=kind, n_flows=n_flows,
                      infer_hidden=8, infer_dropout=0.0, gate_init=gate_init)
    rng = np.random.default_rng(seed)
    model = SumModel(cfg, rng)
    # move the flows and gate off their near-identity initialisation
    perturb_parameters(model.flows, rng, 0.3)
    perturb_parameters(model.gate, rng, 0.3)
    return model, tok


def tiny_batch(tok: Tokenizer):
    docs = ["t0 t1 t2 t3 t1", "t4 t5 t6 t7 t2 t2"]
    sums = ["t1 t3", "t5 t2 t7"]
    return make_batch(tok, docs, sums)


def loss_fn(model: SumModel, batch, seed: int = 1, strategy: str = "standard", beta=1.0, C=0.0):
    """Deterministic total loss: the reparameterization noise is redrawn from
    the same seed on every call."""

    def fn(_=None):
        rng = np.random.default_rng(seed)
        sample = posterior(model, batch, rng)
        logits = forward(model, batch, sample, rng)
        loss, _ = total_loss(cross_entropy(logits, batch.tgt_out, batch.tgt_mask), vi_loss(sample),
                             strategy=strategy, beta=beta, C=C)
        return loss

    return fn


def model_grad_check(kind: str, seed: int = 0, n_coords: int = 40, h: float = 1e-5) -> GradCheckReport:
    """Check up to ``n_coords`` coordinates of every parameter tensor and
    merge the results into one report."""
    model, tok = tiny_model(kind, seed)
    batch = tiny_batch(tok)
    fn = loss_fn(model, batch)
    rng = np.random.default_rng(seed + 1)
    worst, worst_idx, n, flagged = 0.0, None, 0, []
    an, nu = [], []
    for name, p in model.named_parameters():
        coords = nc.sample_coords(p.shape, n_coords, rng)
        rep = nc.grad_check(fn, p, h=h, coords=coords)
        n += rep.n_checked
        an.append(rep.analytic)
        nu.append(rep.numeric)
        flagged += [(name, *c) for c in rep.flagged]
        if rep.max_rel_error >= worst:
            worst, worst_idx = rep.max_rel_error, (name, *(rep.worst_index or ()))
    return GradCheckReport(worst, worst_idx, n, np.concatenate(an), np.concatenate(nu), flagged)
