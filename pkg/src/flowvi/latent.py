"""Amortized flow posterior: inference net, reparameterized draws, densities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from flowvi import numcore as nc
from flowvi.errors import ShapeError
from flowvi.flows import FlowStack, stack_forward, stack_inverse
from flowvi.numcore import MLP, Module, Tensor

LOG_SIGMA_MIN = -10.0
LOG_SIGMA_MAX = 10.0
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


class InferenceNet(Module):
    """Feedforward map from the document's mean embedding to (mu0, log sigma0)."""

    def __init__(self, embed_dim: int, latent_dim: int, rng: np.random.Generator,
                 hidden_dim: int = 300, n_hidden: int = 3, dropout: float = 0.1,
                 zero_init: bool = False):
        self.latent_dim = latent_dim
        self.mlp = MLP(embed_dim, [hidden_dim] * n_hidden, 2 * latent_dim, rng,
                       activation="tanh", dropout=dropout, last_std=0.01)
        if zero_init:
            for p in self.mlp.parameters():
                p.data = np.zeros_like(p.data)

    def __call__(self, xbar: Tensor, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        return infer_posterior(self, xbar, rng)


def infer_posterior(net: InferenceNet, xbar, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Return ``(mu0, log_sigma0)``; dropout is active only in training mode
    and then needs ``rng``."""
    xbar = nc.as_tensor(xbar)
    single = xbar.ndim == 1
    if single:
        xbar = nc.reshape(xbar, (1, -1))
    out = net.mlp(xbar, rng)
    mu, log_sigma = nc.split(out, [net.latent_dim, net.latent_dim], axis=1)
    log_sigma = nc.clip(log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    if single:
        return nc.reshape(mu, (-1,)), nc.reshape(log_sigma, (-1,))
    return mu, log_sigma


@dataclass
class LatentSample:
    """One posterior draw per row: base point, transported point, per-layer
    log-dets and the base-distribution parameters that produced them."""

    z0: Tensor
    zK: Tensor
    logdets: list[Tensor]
    mu0: Tensor
    log_sigma0: Tensor

    @property
    def n_layers(self) -> int:
        return len(self.logdets)


def sample_latent(mu0, log_sigma0, stack: FlowStack, rng: np.random.Generator | None,
                  deterministic: bool = False) -> LatentSample:
    """``z0 = mu0 + sigma0 * eps`` then transport through ``stack``.

    ``eps`` is drawn from ``rng`` and enters the tape as a constant. With
    ``deterministic`` the noise is zero, i.e. ``z0 = mu0``.
    """
    mu0, log_sigma0 = nc.as_tensor(mu0), nc.as_tensor(log_sigma0)
    if mu0.shape != log_sigma0.shape:
        raise ShapeError(f"sample_latent: mu0 {mu0.shape} and log_sigma0 {log_sigma0.shape} differ")
    if deterministic:
        eps = np.zeros(mu0.shape)
    else:
        if rng is None:
            raise ValueError("sample_latent needs an explicit rng unless deterministic")
        eps = rng.standard_normal(mu0.shape)
    z0 = mu0 + nc.exp(log_sigma0) * eps
    zK, logdets = stack_forward(stack, z0)
    return LatentSample(z0=z0, zK=zK, logdets=logdets, mu0=mu0, log_sigma0=log_sigma0)


def gaussian_logpdf(z, mu, log_sigma) -> Tensor:
    """Diagonal Gaussian log-density summed over the last axis."""
    z, mu, log_sigma = nc.as_tensor(z), nc.as_tensor(mu), nc.as_tensor(log_sigma)
    std = (z - mu) * nc.exp(-log_sigma)
    return nc.tsum(-HALF_LOG_2PI - log_sigma - 0.5 * std * std, axis=-1)


def standard_normal_logpdf(z) -> Tensor:
    z = nc.as_tensor(z)
    return nc.tsum(-HALF_LOG_2PI - 0.5 * z * z, axis=-1)


def kl_monte_carlo(sample: LatentSample) -> Tensor:
    """Single-draw estimate ``log q0(z0) - sum_k logdet_k - log p(zK)`` with a
    standard-normal prior; one value per row of the sample."""
    val = gaussian_logpdf(sample.z0, sample.mu0, sample.log_sigma0) - standard_normal_logpdf(sample.zK)
    for ld in sample.logdets:
        val = val - ld
    return val


def gaussian_kl(mu, log_sigma) -> np.ndarray:
    """Closed-form KL(N(mu, sigma^2) || N(0, I)) summed over the last axis."""
    mu, log_sigma = np.asarray(mu, float), np.asarray(log_sigma, float)
    s2 = np.exp(2.0 * log_sigma)
    return 0.5 * np.sum(s2 + mu * mu - 1.0 - 2.0 * log_sigma, axis=-1)


def log_density(stack: FlowStack, base: tuple, x) -> Tensor:
    """``log p_x(x) = log p_u(f^-1(x)) + log|det J_{f^-1}(x)|``.

    ``base`` is ``(mu, sigma)`` of the diagonal Gaussian base density. The
    inverse log-det is taken as minus the forward log-dets at the preimage.
    """
    mu, sigma = (np.asarray(b, dtype=float) for b in base)
    x = nc.as_tensor(x)
    z = stack_inverse(stack, x)
    _, logdets = stack_forward(stack, z)
    out = gaussian_logpdf(z, mu, np.log(sigma))
    for ld in logdets:
        out = out - ld
    return out
