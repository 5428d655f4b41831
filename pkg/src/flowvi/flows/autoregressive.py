"""MADE-conditioned Gaussian autoregressive flows (MAF and IAF)."""

from __future__ import annotations

import copy

import numpy as np

from flowvi import numcore as nc
from flowvi.flows.base import FlowLayer
from flowvi.numcore import MaskedLinear, Module, Tensor


def made_masks(dim: int, hidden: list[int]) -> list[np.ndarray]:
    """Masks (in, out) for a MADE net whose output ``i`` sees inputs ``< i``.

    Input and output degrees are 1..dim; hidden degrees cycle over
    1..max(dim-1, 1). Hidden units connect to degree <= their own; outputs
    connect only to strictly smaller degrees.
    """
    in_deg = np.arange(1, dim + 1)
    degs = [in_deg]
    for h in hidden:
        degs.append(np.arange(h) % max(dim - 1, 1) + 1)
    masks = [(d_out[None, :] >= d_in[:, None]).astype(float) for d_in, d_out in zip(degs[:-1], degs[1:])]
    out_deg = np.concatenate([in_deg, in_deg])  # mu and alpha heads
    masks.append((out_deg[None, :] > degs[-1][:, None]).astype(float))
    return masks


class MADE(Module):
    def __init__(self, dim: int, hidden: list[int], rng: np.random.Generator):
        masks = made_masks(dim, hidden)
        sizes = [dim, *hidden, 2 * dim]
        self.layers = [
            MaskedLinear(a, b, m, rng, zero=(i == len(masks) - 1))
            for i, (a, b, m) in enumerate(zip(sizes[:-1], sizes[1:], masks))
        ]
        self.dim = dim

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        for layer in self.layers[:-1]:
            x = nc.tanh(layer(x))
        out = self.layers[-1](x)
        return out[:, :self.dim], out[:, self.dim:]


class _Autoregressive(FlowLayer):
    has_inverse = True

    def __init__(self, dim: int, rng: np.random.Generator, hidden: list[int] | None = None):
        super().__init__(dim)
        self.made = MADE(dim, hidden if hidden is not None else [3 * dim + 1], rng)

    def constrained_copy(self):
        new = copy.deepcopy(self)
        new.constrain = False
        return new


class IAF(_Autoregressive):
    """``x_i = u_i exp(alpha_i) + mu_i`` with (mu, alpha) from the noise
    prefix ``u_<i``: parallel forward, sequential inverse."""

    kind = "iaf"

    def _forward(self, z):
        mu, alpha = self.made(z)
        return z * nc.exp(alpha) + mu, nc.tsum(alpha, axis=1)

    def _inverse(self, x):
        u = np.zeros_like(x.data)
        for i in range(self.dim):
            mu, alpha = self.made(nc.Tensor(u))
            u[:, i] = (x.data[:, i] - mu.data[:, i]) * np.exp(-alpha.data[:, i])
        return nc.Tensor(u)


class MAF(_Autoregressive):
    """``x_i = u_i exp(alpha_i) + mu_i`` with (mu, alpha) from the data
    prefix ``x_<i``: sequential forward, parallel inverse."""

    kind = "maf"

    def _forward(self, z):
        n = z.shape[0]
        cols: list[Tensor] = []
        for i in range(self.dim):
            prefix = nc.concat(cols + [nc.zeros((n, self.dim - i))], axis=1)
            mu, alpha = self.made(prefix)
            cols.append(z[:, i:i + 1] * nc.exp(alpha[:, i:i + 1]) + mu[:, i:i + 1])
        x = nc.concat(cols, axis=1)
        _, alpha = self.made(x)
        return x, nc.tsum(alpha, axis=1)

    def _inverse(self, x):
        mu, alpha = self.made(x)
        return (x - mu) * nc.exp(-alpha)
