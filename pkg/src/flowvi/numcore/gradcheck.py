"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from flowvi.numcore import tensor as T
from flowvi.numcore.tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple[int, ...] | None
    n_checked: int
    analytic: np.ndarray
    numeric: np.ndarray
    # coordinates whose one-sided difference quotients disagree, i.e. a kink
    # (relu at 0) sits inside the probe interval
    flagged: list[tuple[int, ...]] = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


class GradCheckError(RuntimeError):
    def __init__(self, index: tuple[int, ...], cause: Exception):
        self.index = index
        super().__init__(f"function raised at coordinate {index}: {cause!r}")


def _scalar(fn: Callable[[Tensor], Tensor], x: Tensor) -> float:
    out = fn(x)
    return out.item() if isinstance(out, Tensor) else float(out)


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               coords: Sequence[tuple[int, ...]] | None = None,
               kink_tol: float = 1e-2) -> GradCheckReport:
    """Compare backward of ``fn`` at ``x`` with central differences.

    ``fn`` must be deterministic and return a scalar tensor. ``x`` must be a
    leaf requiring grad; its data is perturbed in place and restored. The
    error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``coords`` restricts the check to a subset of coordinates.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if not x.requires_grad:
        raise ValueError("x must require grad")
    x.grad = None
    out = fn(x)
    T.backward(out)
    analytic_full = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    if coords is None:
        coords = [tuple(int(i) for i in idx) for idx in np.ndindex(*x.shape)]
    f0 = out.item()
    numeric = np.zeros(len(coords))
    analytic = np.zeros(len(coords))
    flagged = []
    with T.no_grad():
        for k, idx in enumerate(coords):
            orig = x.data[idx]
            try:
                x.data[idx] = orig + h
                fp = _scalar(fn, x)
                x.data[idx] = orig - h
                fm = _scalar(fn, x)
            except Exception as exc:  # re-raised with the coordinate attached
                raise GradCheckError(idx, exc) from exc
            finally:
                x.data[idx] = orig
            numeric[k] = (fp - fm) / (2 * h)
            analytic[k] = analytic_full[idx]
            right, left = (fp - f0) / h, (f0 - fm) / h
            if abs(right - left) > kink_tol * max(1.0, abs(numeric[k])):
                flagged.append(idx)

    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    worst = int(np.argmax(err)) if len(err) else None
    return GradCheckReport(
        max_rel_error=float(err.max()) if len(err) else 0.0,
        worst_index=coords[worst] if worst is not None else None,
        n_checked=len(coords),
        analytic=analytic,
        numeric=numeric,
        flagged=flagged,
    )


def sample_coords(shape: tuple[int, ...], k: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    """Up to ``k`` distinct random coordinates of an array of ``shape``."""
    n = int(np.prod(shape))
    flat = rng.choice(n, size=min(k, n), replace=False)
    return [tuple(int(i) for i in np.unravel_index(f, shape)) for f in flat]
