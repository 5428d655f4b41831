"""Coupling layers: affine (RealNVP) and neural-spline (RQ / RL)."""

from __future__ import annotations

import copy

import numpy as np

from flowvi import numcore as nc
from flowvi.flows import splines
from flowvi.flows.base import FlowLayer
from flowvi.numcore import MLP, Tensor


class _Coupling(FlowLayer):
    """Keeps ``d = floor(dim/2)`` coordinates fixed and transforms the rest
    conditioned on them. With ``flip`` the layer acts on the reversed vector,
    so alternating layers update every coordinate."""

    has_inverse = True
    n_params_per_dim = 0

    def __init__(self, dim: int, rng: np.random.Generator, hidden: list[int], flip: bool = False):
        super().__init__(dim)
        self.split = dim // 2
        self.flip = flip
        self.net = MLP(self.split, hidden, (dim - self.split) * self.n_params_per_dim, rng,
                       activation="tanh", zero_last=True)
        self._perm = np.arange(dim)[::-1].copy() if flip else None

    def _permute(self, z: Tensor) -> Tensor:
        return z if self._perm is None else z[:, self._perm]

    def _params(self, cond: Tensor) -> Tensor:
        n = cond.shape[0]
        return nc.reshape(self.net(cond), (n, self.dim - self.split, self.n_params_per_dim))

    def _transform(self, x2: Tensor, params: Tensor, inverse: bool) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def _run(self, z: Tensor, inverse: bool) -> tuple[Tensor, Tensor]:
        zp = self._permute(z)
        x1, x2 = nc.split(zp, [self.split, self.dim - self.split], axis=1)
        y2, lad = self._transform(x2, self._params(x1), inverse)
        out = self._permute(nc.concat([x1, y2], axis=1))  # reversal is its own inverse
        return out, nc.tsum(lad, axis=1)

    def _forward(self, z):
        return self._run(z, inverse=False)

    def _inverse(self, x):
        return self._run(x, inverse=True)[0]

    def constrained_copy(self):
        new = copy.deepcopy(self)
        new.constrain = False
        return new


class AffineCoupling(_Coupling):
    """``y2 = x2 * exp(s(x1)) + t(x1)``; ``log det = sum s(x1)``."""

    kind = "realnvp"
    n_params_per_dim = 2

    def __init__(self, dim: int, rng: np.random.Generator, hidden: list[int] | None = None, flip: bool = False):
        super().__init__(dim, rng, hidden if hidden is not None else [10 * dim], flip)

    def _transform(self, x2, params, inverse):
        s, t = params[..., 0], params[..., 1]
        if inverse:
            return (x2 - t) * nc.exp(-s), s
        return x2 * nc.exp(s) + t, s


class RQSplineCoupling(_Coupling):
    kind = "rqnsf"

    def __init__(self, dim: int, rng: np.random.Generator, hidden: list[int] | None = None,
                 flip: bool = False, bins: int = 4, bound: float = 3.0):
        self.bins = bins
        self.bound = bound
        self.n_params_per_dim = 3 * bins - 1
        super().__init__(dim, rng, hidden if hidden is not None else [dim, dim], flip)

    def _transform(self, x2, params, inverse):
        k = self.bins
        w, h, d = params[..., :k], params[..., k:2 * k], params[..., 2 * k:]
        return splines.rational_quadratic(x2, w, h, d, self.bound, inverse)


class RLSplineCoupling(_Coupling):
    kind = "rlnsf"

    def __init__(self, dim: int, rng: np.random.Generator, hidden: list[int] | None = None,
                 flip: bool = False, bins: int = 4, bound: float = 3.0):
        self.bins = bins
        self.bound = bound
        self.n_params_per_dim = 4 * bins - 1
        super().__init__(dim, rng, hidden if hidden is not None else [dim, dim], flip)

    def _transform(self, x2, params, inverse):
        k = self.bins
        w, h = params[..., :k], params[..., k:2 * k]
        d, lam = params[..., 2 * k:3 * k - 1], params[..., 3 * k - 1:]
        return splines.rational_linear(x2, w, h, d, lam, self.bound, inverse)
