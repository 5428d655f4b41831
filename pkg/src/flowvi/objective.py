"""Training losses: token cross-entropy, the flow KL term, beta_C and the ELBO."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from flowvi import numcore as nc
from flowvi.errors import EmptyInputError, NumericError, ShapeError
from flowvi.latent import LatentSample, kl_monte_carlo
from flowvi.numcore import Tensor

vi_loss = kl_monte_carlo  # one definition of the KL estimate, shared with latent


def _target_logprobs(logits, targets, mask):
    logits = nc.as_tensor(logits)
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}")
    if not mask.any(axis=-1).all():
        raise EmptyInputError("cross_entropy: a target sequence is all padding")
    lp = nc.log_softmax(logits, axis=-1)
    picked = nc.take_along_axis(lp, targets[..., None], axis=-1)
    return nc.reshape(picked, targets.shape) * mask


def cross_entropy(logits, targets, pad_mask) -> Tensor:
    """Summed NLL over non-pad target tokens; per sequence when batched
    (logits ``(B, n, V)`` gives shape ``(B,)``), a scalar for ``(n, V)``."""
    return -nc.tsum(_target_logprobs(logits, targets, pad_mask), axis=-1)


def token_nll_mean(logits, targets, pad_mask) -> float:
    """Per-token mean NLL, the quantity behind perplexity."""
    with nc.no_grad():
        lp = _target_logprobs(logits, targets, pad_mask).data
    return float(-lp.sum() / np.asarray(pad_mask).sum())


def beta_c_transform(vi, beta: float, C: float):
    """``beta * |vi - C|``; works on floats, arrays and tensors."""
    if beta < 0 or C < 0:
        raise ValueError(f"beta_c_transform needs beta >= 0 and C >= 0, got {beta}, {C}")
    if isinstance(vi, Tensor):
        return beta * nc.abs(vi - C)
    return beta * np.abs(np.asarray(vi, dtype=float) - C) if np.ndim(vi) else beta * abs(float(vi) - C)


def elbo_estimate(ce, vi):
    """Single-draw ELBO integrand ``-(ce + vi)``."""
    return -(ce + vi)


@dataclass
class LossBreakdown:
    ce: float
    vi: float
    vi_transformed: float
    total: float

    @property
    def kl_estimate(self) -> float:
        return self.vi

    def as_dict(self) -> dict:
        return {**asdict(self), "kl_estimate": self.vi}


def total_loss(ce_per_ex: Tensor, vi_per_ex: Tensor, strategy: str = "standard",
               beta: float = 1.0, C: float = 0.0) -> tuple[Tensor, LossBreakdown]:
    """Batch loss = mean over examples of (token-summed CE + transformed vi).

    Under ``standard`` the vi term enters as is, so ``total = -ELBO`` even for
    a negative single-draw estimate; ``beta_c`` applies ``beta|vi - C|`` per
    example before the batch mean. ``caat`` uses the standard loss.
    """
    if strategy == "beta_c":
        vt = beta_c_transform(vi_per_ex, beta, C)
    elif strategy in ("standard", "caat"):
        vt = vi_per_ex
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    ce, vi, vt = nc.mean(ce_per_ex), nc.mean(vi_per_ex), nc.mean(vt)
    total = ce + vt
    if not np.isfinite(total.data).all():
        raise NumericError(f"non-finite loss: ce={ce.item()}, vi={vi.item()}")
    return total, LossBreakdown(ce.item(), vi.item(), vt.item(), total.item())


def sample_loss(logits, targets, pad_mask, sample: LatentSample, **kw) -> tuple[Tensor, LossBreakdown]:
    return total_loss(cross_entropy(logits, targets, pad_mask), vi_loss(sample), **kw)


def token_accuracy(logits, targets, pad_mask) -> float:
    pred = np.asarray(nc.as_tensor(logits).data).argmax(axis=-1)
    mask = np.asarray(pad_mask, dtype=bool)
    return float((pred == np.asarray(targets))[mask].mean())


def perplexity(mean_token_nll: float) -> float:
    return float(np.exp(mean_token_nll))
