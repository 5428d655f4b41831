"""Monotone rational-quadratic and rational-linear splines on [-B, B].

Inputs outside the interval pass through unchanged (log-det 0). Bin widths
and heights come from a softmax scaled to ``2B``; interior knot derivatives
from a shifted softplus so an all-zero parameter vector gives the identity;
boundary derivatives are fixed to 1 so the tails join with matching slope.
"""

from __future__ import annotations

import numpy as np

from flowvi import numcore as nc
from flowvi.numcore import Tensor

MIN_BIN = 1e-3
MIN_DERIVATIVE = 1e-3
_DERIV_SHIFT = float(np.log(np.expm1(1.0 - MIN_DERIVATIVE)))


def _knots(unnorm: Tensor, bound: float) -> tuple[Tensor, Tensor]:
    """Knot positions ``(..., K+1)`` and bin sizes ``(..., K)``."""
    k = unnorm.shape[-1]
    frac = MIN_BIN + (1.0 - MIN_BIN * k) * nc.softmax(unnorm, axis=-1)
    lead = unnorm.shape[:-1] + (1,)
    inner = nc.cumsum(frac[..., :-1], axis=-1)
    cum = nc.concat([nc.zeros(lead), inner, nc.ones(lead)], axis=-1)
    knots = 2.0 * bound * cum - bound
    return knots, knots[..., 1:] - knots[..., :-1]


def _derivatives(unnorm: Tensor) -> Tensor:
    lead = unnorm.shape[:-1] + (1,)
    inner = MIN_DERIVATIVE + nc.softplus(unnorm + _DERIV_SHIFT)
    return nc.concat([nc.ones(lead), inner, nc.ones(lead)], axis=-1)


def _bin_index(knots: np.ndarray, v: np.ndarray) -> np.ndarray:
    idx = (v[..., None] >= knots[..., 1:-1]).sum(axis=-1)
    return idx[..., None]


def _gather(t: Tensor, idx: np.ndarray) -> Tensor:
    return nc.take_along_axis(t, idx, axis=-1)[..., 0]


def rational_quadratic(x: Tensor, widths: Tensor, heights: Tensor, derivs: Tensor,
                       bound: float, inverse: bool = False) -> tuple[Tensor, Tensor]:
    """Elementwise RQ spline. Params have shape ``x.shape + (K,)`` for widths
    and heights and ``x.shape + (K-1,)`` for derivatives. Returns the output
    and the elementwise log|dy/dx| of the forward map (at the output point's
    preimage when ``inverse``)."""
    xk, w = _knots(widths, bound)
    yk, hgt = _knots(heights, bound)
    d = _derivatives(derivs)
    inside = (x.data >= -bound) & (x.data <= bound)
    v = nc.where(inside, x, 0.0)

    idx = _bin_index((yk if inverse else xk).data, v.data)
    x0, y0 = _gather(xk, idx), _gather(yk, idx)
    wk, hk = _gather(w, idx), _gather(hgt, idx)
    d0, d1 = _gather(d, idx), _gather(d, idx + 1)
    s = hk / wk
    slack = d0 + d1 - 2.0 * s

    if inverse:
        dy = v - y0
        a = hk * (s - d0) + dy * slack
        b = hk * d0 - dy * slack
        c = -s * dy
        disc = nc.maximum(b * b - 4.0 * a * c, 0.0)
        xi = (2.0 * c) / (-b - nc.sqrt(disc))
        out = xi * wk + x0
    else:
        xi = (v - x0) / wk
    t = xi * (1.0 - xi)
    den = s + slack * t
    if not inverse:
        out = y0 + hk * (s * xi * xi + d0 * t) / den
    lad = 2.0 * nc.log(s) + nc.log(d1 * xi * xi + 2.0 * s * t + d0 * (1.0 - xi) * (1.0 - xi)) - 2.0 * nc.log(den)
    return nc.where(inside, out, x), nc.where(inside, lad, 0.0)


def _rl_pieces(lam_raw: Tensor, s: Tensor, d0: Tensor, d1: Tensor, y0: Tensor, y1: Tensor):
    lam = 0.025 + 0.95 * nc.sigmoid(lam_raw)
    wb = nc.sqrt(d0 / d1)
    wc = (lam * d0 + (1.0 - lam) * wb * d1) / s
    yc = ((1.0 - lam) * y0 + lam * wb * y1) / ((1.0 - lam) + lam * wb)
    return lam, wb, wc, yc


def rational_linear(x: Tensor, widths: Tensor, heights: Tensor, derivs: Tensor, lambdas: Tensor,
                    bound: float, inverse: bool = False) -> tuple[Tensor, Tensor]:
    """Elementwise rational-linear spline: each bin is split at ``lambda`` into
    two linear-rational pieces meeting at an interior point ``yc``."""
    xk, w = _knots(widths, bound)
    yk, hgt = _knots(heights, bound)
    d = _derivatives(derivs)
    inside = (x.data >= -bound) & (x.data <= bound)
    v = nc.where(inside, x, 0.0)

    idx = _bin_index((yk if inverse else xk).data, v.data)
    x0, y0, y1 = _gather(xk, idx), _gather(yk, idx), _gather(yk, idx + 1)
    wk, hk = _gather(w, idx), _gather(hgt, idx)
    d0, d1 = _gather(d, idx), _gather(d, idx + 1)
    lam, wb, wc, yc = _rl_pieces(_gather(lambdas, idx), hk / wk, d0, d1, y0, y1)

    if inverse:
        left = v.data <= yc.data
        ya = nc.where(left, v, yc)          # left piece, clamped to its range
        yb = nc.where(left, yc, v)
        phi_a = lam * (y0 - ya) / ((y0 - ya) + wc * (ya - yc))
        phi_b = (wc * (yc - yb) + wb * lam * (yb - y1)) / (wc * (yc - yb) + wb * (yb - y1))
        phi = nc.where(left, phi_a, phi_b)
        out = x0 + phi * wk
    else:
        phi = (v - x0) / wk
        left = phi.data <= lam.data
    pa = nc.where(left, phi, lam)
    pb = nc.where(left, lam, phi)
    den_a = (lam - pa) + wc * pa
    den_b = wc * (1.0 - pb) + wb * (pb - lam)
    if not inverse:
        out_a = (y0 * (lam - pa) + wc * yc * pa) / den_a
        out_b = (wc * yc * (1.0 - pb) + wb * y1 * (pb - lam)) / den_b
        out = nc.where(left, out_a, out_b)
    lad_a = nc.log(wc * lam * (yc - y0)) - 2.0 * nc.log(den_a)
    lad_b = nc.log(wb * wc * (1.0 - lam) * (y1 - yc)) - 2.0 * nc.log(den_b)
    lad = nc.where(left, lad_a, lad_b) - nc.log(wk)
    return nc.where(inside, out, x), nc.where(inside, lad, 0.0)
