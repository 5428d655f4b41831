"""Planar, radial and Sylvester flows: residual maps with cheap determinants."""

from __future__ import annotations

import copy

import numpy as np

from flowvi import numcore as nc
from flowvi.errors import ContractError
from flowvi.flows.base import FlowLayer, activation
from flowvi.numcore import Tensor


class PlanarFlow(FlowLayer):
    """``f(z) = z + u h(w.z + b)`` with ``det J = 1 + h'(w.z + b) w.u``."""

    kind = "planar"

    def __init__(self, dim: int, rng: np.random.Generator, act: str = "tanh", init_scale: float = 0.01):
        super().__init__(dim)
        self.u = nc.parameter(rng.normal(0.0, init_scale, dim))
        self.w = nc.parameter(rng.normal(0.0, init_scale, dim))
        self.b = nc.parameter(np.zeros(1))
        self.act = act

    def u_hat(self) -> Tensor:
        if not self.constrain:
            return self.u
        wtw = float(self.w.data @ self.w.data)
        if wtw == 0.0:
            raise ContractError("planar flow: w = 0 leaves the constraint direction undefined")
        wtu = (self.w * self.u).sum()
        return self.u + (nc.softplus(wtu) - 1.0 - wtu) * self.w / (self.w * self.w).sum()

    def _forward(self, z):
        u = self.u_hat()
        a = nc.matmul(z, nc.reshape(self.w, (-1, 1))) + self.b  # (N, 1)
        h, dh = activation(self.act, a)
        out = z + h * u
        wtu = (self.w * u).sum()
        log_det = nc.log(nc.abs(1.0 + dh * wtu))
        return out, nc.reshape(log_det, (-1,))

    def constrained_copy(self):
        new = copy.deepcopy(self)
        new.u = nc.parameter(self.u_hat().data)
        new.constrain = False
        return new


class RadialFlow(FlowLayer):
    """``f(z) = z + beta h(alpha, r) (z - z_ref)``, ``h = 1/(alpha + r)``."""

    kind = "radial"

    def __init__(self, dim: int, rng: np.random.Generator, init_scale: float = 0.01):
        super().__init__(dim)
        self.z_ref = nc.parameter(rng.normal(0.0, 1.0, dim))
        self.alpha_raw = nc.parameter(rng.normal(0.0, init_scale, 1))
        self.beta_raw = nc.parameter(rng.normal(0.0, init_scale, 1))

    def alpha_beta(self) -> tuple[Tensor, Tensor]:
        if not self.constrain:
            return self.alpha_raw, self.beta_raw
        alpha = nc.softplus(self.alpha_raw)
        return alpha, nc.softplus(self.beta_raw) - alpha

    def _forward(self, z):
        alpha, beta = self.alpha_beta()
        diff = z - self.z_ref
        r = nc.sqrt(nc.tsum(diff * diff, axis=1, keepdims=True))
        h = 1.0 / (alpha + r)
        bh = beta * h
        out = z + bh * diff
        # d/dr of h is -h^2, so 1 + beta h + beta h' r = 1 + alpha beta h^2
        log_det = (self.dim - 1) * nc.log(1.0 + bh) + nc.log(1.0 + alpha * beta * h * h)
        return out, nc.reshape(log_det, (-1,))

    def constrained_copy(self):
        alpha, beta = self.alpha_beta()
        new = copy.deepcopy(self)
        new.alpha_raw = nc.parameter(alpha.data)
        new.beta_raw = nc.parameter(beta.data)
        new.constrain = False
        return new


def householder_q(vectors: Tensor, dim: int) -> Tensor:
    """First ``M`` columns of ``H_1 ... H_M`` for reflection vectors ``(M, dim)``."""
    m = vectors.shape[0]
    q = nc.Tensor(np.eye(dim)[:, :m])
    for i in reversed(range(m)):
        v = nc.reshape(vectors[i], (dim, 1))
        vtv = nc.tsum(v * v)
        q = q - (2.0 / vtv) * nc.matmul(v, nc.matmul(nc.transpose(v), q))
    return q


class SylvesterFlow(FlowLayer):
    """``f(z) = z + Q R h(R~ Q^T z + b)`` with orthonormal ``Q`` (dim x M).

    ``R`` and ``R~`` are upper triangular; their diagonals pass through tanh so
    ``R~_ii R_ii`` lies in (-1, 1), which keeps the map invertible for
    activations with ``sup h' = 1``.
    """

    kind = "sylvester"

    def __init__(self, dim: int, rng: np.random.Generator, n_hidden: int | None = None,
                 act: str = "tanh", init_scale: float = 0.01):
        super().__init__(dim)
        m = dim if n_hidden is None else n_hidden
        if not 1 <= m <= dim:
            raise ContractError(f"sylvester flow: hidden units M={m} must lie in [1, {dim}]")
        self.m = m
        self.act = act
        self.q_vectors = nc.parameter(rng.normal(0.0, 1.0, (m, dim)))
        self.r_upper = nc.parameter(rng.normal(0.0, init_scale, (m, m)))
        self.rt_upper = nc.parameter(rng.normal(0.0, init_scale, (m, m)))
        self.r_diag = nc.parameter(rng.normal(0.0, init_scale, m))
        self.rt_diag = nc.parameter(rng.normal(0.0, init_scale, m))
        self.b = nc.parameter(np.zeros(m))
        self._strict = np.triu(np.ones((m, m)), 1)

    def q(self) -> Tensor:
        return householder_q(self.q_vectors, self.dim)

    def triangular(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Return ``R, R~`` and their diagonals."""
        if self.constrain:
            rd, rtd = nc.tanh(self.r_diag), nc.tanh(self.rt_diag)
        else:
            rd, rtd = self.r_diag, self.rt_diag
        eye = np.eye(self.m)
        r = self.r_upper * self._strict + nc.reshape(rd, (1, -1)) * eye
        rt = self.rt_upper * self._strict + nc.reshape(rtd, (1, -1)) * eye
        return r, rt, rd, rtd

    def _forward(self, z):
        q = self.q()
        r, rt, rd, rtd = self.triangular()
        a = nc.matmul(nc.matmul(z, q), nc.transpose(rt)) + self.b  # (N, M)
        h, dh = activation(self.act, a)
        out = z + nc.matmul(nc.matmul(h, nc.transpose(r)), nc.transpose(q))
        # I + diag(h') R~ R is upper triangular: determinant is the diagonal product
        log_det = nc.tsum(nc.log(nc.abs(1.0 + dh * (rd * rtd))), axis=1)
        return out, log_det

    def constrained_copy(self):
        _, _, rd, rtd = self.triangular()
        new = copy.deepcopy(self)
        new.r_diag = nc.parameter(rd.data)
        new.rt_diag = nc.parameter(rtd.data)
        new.constrain = False
        return new
