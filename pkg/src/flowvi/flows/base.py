from __future__ import annotations

import numpy as np

from flowvi import numcore as nc
from flowvi.errors import CapabilityError, NumericError, ShapeError
from flowvi.numcore import Module, Tensor

KINDS = ("planar", "radial", "sylvester", "realnvp", "maf", "iaf", "rlnsf", "rqnsf")
INVERTIBLE_KINDS = ("realnvp", "maf", "iaf", "rlnsf", "rqnsf")


def activation(name: str, a: Tensor) -> tuple[Tensor, Tensor]:
    """Return ``h(a)`` and ``h'(a)``; every supported h has ``sup h' = 1``."""
    if name == "tanh":
        ha = nc.tanh(a)
        return ha, 1.0 - ha * ha
    if name == "relu":
        return nc.relu(a), Tensor((a.data > 0).astype(float))
    if name == "leakyrelu":
        return nc.leaky_relu(a, 0.01), Tensor(np.where(a.data > 0, 1.0, 0.01))
    raise ValueError(f"unsupported activation {name!r}; expected tanh, relu or leakyrelu")


class FlowLayer(Module):
    """One invertible map on R^dim.

    ``forward`` takes a batch ``(N, dim)`` and returns ``(z', log_det)`` with
    ``log_det`` of shape ``(N,)``. When ``constrain`` is set the raw
    parameters pass through the invertibility-guaranteeing map inside
    ``forward``; ``constrain_params`` bakes that map in and clears the flag.
    """

    kind: str = ""
    has_inverse: bool = False

    def __init__(self, dim: int):
        if dim < 1:
            raise ShapeError(f"flow dimension must be positive, got {dim}")
        self.dim = dim
        self.constrain = True

    def _forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def _inverse(self, x: Tensor) -> Tensor:
        raise CapabilityError(
            f"{self.kind} flow has no closed-form inverse (not invertible in closed form)")

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        z = nc.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ShapeError(f"{self.kind} layer expects (N, {self.dim}) input, got {z.shape}")
        try:
            return self._forward(z)
        except NumericError as exc:
            raise NumericError(f"{self.kind} layer: {exc}") from exc

    def inverse(self, x: Tensor) -> Tensor:
        x = nc.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"{self.kind} layer expects (N, {self.dim}) input, got {x.shape}")
        try:
            return self._inverse(x)
        except NumericError as exc:
            raise NumericError(f"{self.kind} layer inverse: {exc}") from exc

    def constrained_copy(self) -> "FlowLayer":
        raise NotImplementedError

    __call__ = forward
