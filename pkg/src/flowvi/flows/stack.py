"""Layer factory, K-layer composition and the single-vector convenience API."""

from __future__ import annotations

import copy
from typing import Sequence

import numpy as np

from flowvi import numcore as nc
from flowvi.errors import CapabilityError, FlowVIError, NumericError, ShapeError
from flowvi.flows.autoregressive import IAF, MAF
from flowvi.flows.base import KINDS, FlowLayer
from flowvi.flows.coupling import AffineCoupling, RLSplineCoupling, RQSplineCoupling
from flowvi.flows.residual import PlanarFlow, RadialFlow, SylvesterFlow
from flowvi.numcore import Module, Tensor

_LAYERS = {
    "planar": PlanarFlow,
    "radial": RadialFlow,
    "sylvester": SylvesterFlow,
    "realnvp": AffineCoupling,
    "maf": MAF,
    "iaf": IAF,
    "rlnsf": RLSplineCoupling,
    "rqnsf": RQSplineCoupling,
}
_COUPLING = ("realnvp", "rlnsf", "rqnsf")


def build_layer(kind: str, dim: int, rng: np.random.Generator, index: int = 0, **opts) -> FlowLayer:
    """Construct one layer. ``index`` alternates the coupling orientation."""
    if kind not in _LAYERS:
        raise ValueError(f"unknown flow kind {kind!r}; expected one of {KINDS}")
    if kind in _COUPLING:
        opts.setdefault("flip", index % 2 == 1)
    return _LAYERS[kind](dim, rng, **opts)


class FlowStack(Module):
    """Ordered composition ``f_K o ... o f_1``; K = 0 is the identity."""

    def __init__(self, layers: Sequence[FlowLayer] = (), dim: int | None = None):
        layers = list(layers)
        dims = {layer.dim for layer in layers}
        if len(dims) > 1:
            raise ShapeError(f"flow stack layers disagree on dimension: {sorted(dims)}")
        if dim is None:
            if not layers:
                raise ShapeError("an empty flow stack needs an explicit dim")
            dim = layers[0].dim
        elif dims and dims != {dim}:
            raise ShapeError(f"flow stack dim {dim} does not match layer dim {dims.pop()}")
        self.layers = layers
        self.dim = dim

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def has_inverse(self) -> bool:
        return all(layer.has_inverse for layer in self.layers)

    def forward(self, z: Tensor) -> tuple[Tensor, list[Tensor]]:
        logdets = []
        for k, layer in enumerate(self.layers):
            try:
                z, ld = layer.forward(z)
            except FlowVIError as exc:
                raise type(exc)(f"flow layer {k}: {exc}") from exc
            logdets.append(ld)
        return z, logdets

    __call__ = forward

    def inverse(self, x: Tensor) -> Tensor:
        for k in reversed(range(len(self.layers))):
            try:
                x = self.layers[k].inverse(x)
            except FlowVIError as exc:
                raise type(exc)(f"flow layer {k}: {exc}") from exc
        return x


def build_stack(kind: str | None, n_layers: int, dim: int, rng: np.random.Generator, **opts) -> FlowStack:
    if kind is None or n_layers == 0:
        return FlowStack([], dim=dim)
    return FlowStack([build_layer(kind, dim, rng, index=k, **opts) for k in range(n_layers)], dim=dim)


def perturb_parameters(module: Module, rng: np.random.Generator, scale: float = 0.5) -> Module:
    """Overwrite every parameter with N(0, scale^2) draws (random test
    parameterizations); masks and structure are untouched."""
    for _, p in module.named_parameters():
        p.data = rng.normal(0.0, scale, p.shape)
    return module


# --- single-vector API ------------------------------------------------------

def _as_batch(z) -> tuple[Tensor, bool]:
    z = nc.as_tensor(z)
    if z.ndim == 1:
        return nc.reshape(z, (1, -1)), True
    return z, False


def flow_forward(layer: FlowLayer, z) -> tuple[Tensor, Tensor]:
    """Apply one layer to ``z`` of shape ``(dim,)`` or ``(N, dim)``."""
    zb, single = _as_batch(z)
    out, ld = layer.forward(zb)
    if single:
        return nc.reshape(out, (-1,)), nc.reshape(ld, ())
    return out, ld


def flow_inverse(layer: FlowLayer, x) -> Tensor:
    if not layer.has_inverse:
        raise CapabilityError(
            f"{layer.kind} flow has no closed-form inverse (not invertible in closed form)")
    xb, single = _as_batch(x)
    z = layer.inverse(xb)
    return nc.reshape(z, (-1,)) if single else z


def stack_forward(stack: FlowStack, z0) -> tuple[Tensor, list[Tensor]]:
    zb, single = _as_batch(z0)
    if zb.shape[1] != stack.dim:
        raise ShapeError(f"flow stack expects dim {stack.dim}, got input {tuple(nc.as_tensor(z0).shape)}")
    out, lds = stack.forward(zb)
    if single:
        return nc.reshape(out, (-1,)), [nc.reshape(ld, ()) for ld in lds]
    return out, lds


def stack_inverse(stack: FlowStack, x) -> Tensor:
    for k, layer in enumerate(stack.layers):
        if not layer.has_inverse:
            raise CapabilityError(
                f"flow layer {k} ({layer.kind}) has no closed-form inverse (not invertible in closed form)")
    xb, single = _as_batch(x)
    z = stack.inverse(xb)
    return nc.reshape(z, (-1,)) if single else z


def constrain_params(layer: FlowLayer) -> FlowLayer:
    """Return a copy whose stored parameters already satisfy the
    invertibility constraints (planar u-hat, radial beta > -alpha,
    Sylvester diagonal), with the in-forward constraint map switched off."""
    if not layer.constrain:
        return copy.deepcopy(layer)
    return layer.constrained_copy()


__all__ = [
    "FlowStack",
    "NumericError",
    "build_layer",
    "build_stack",
    "constrain_params",
    "flow_forward",
    "flow_inverse",
    "perturb_parameters",
    "stack_forward",
    "stack_inverse",
]
