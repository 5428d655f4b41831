"""Finite-difference Jacobian log-determinant, independent of any analytic
log-det code path: it only calls the forward map."""

from __future__ import annotations

import numpy as np

from flowvi import numcore as nc
from flowvi.errors import NumericError
from flowvi.flows.base import FlowLayer
from flowvi.flows.stack import FlowStack

MAX_DIM = 10


class SingularJacobianError(NumericError):
    def __init__(self, det: float, z: np.ndarray):
        self.det = det
        self.z = z
        super().__init__(f"finite-difference Jacobian is singular (|det| = {det:.3e}) at z = {z}")


def _map(f: FlowLayer | FlowStack, pts: np.ndarray) -> np.ndarray:
    out = f.forward(nc.Tensor(pts))[0]
    return out.data


def fd_jacobian(f: FlowLayer | FlowStack, z: np.ndarray, h: float = 1e-5) -> np.ndarray:
    z = np.asarray(z, dtype=float).reshape(-1)
    n = z.size
    pts = np.concatenate([z + h * np.eye(n), z - h * np.eye(n)])
    with nc.no_grad():
        vals = _map(f, pts)
    return ((vals[:n] - vals[n:]) / (2 * h)).T  # J[i, j] = d out_i / d z_j


def numeric_logdet_oracle(f: FlowLayer | FlowStack, z, h: float = 1e-5) -> float:
    """``log|det J|`` of the central-difference Jacobian at ``z`` (dim <= 10)."""
    z = np.asarray(z.data if isinstance(z, nc.Tensor) else z, dtype=float).reshape(-1)
    if z.size > MAX_DIM:
        raise ValueError(f"dense finite-difference oracle limited to dim <= {MAX_DIM}, got {z.size}")
    jac = fd_jacobian(f, z, h)
    sign, logabs = np.linalg.slogdet(jac)
    if sign == 0 or logabs < np.log(1e-300):
        raise SingularJacobianError(0.0 if sign == 0 else float(np.exp(logabs)), z)
    return float(logabs)
