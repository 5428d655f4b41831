"""Minimal module system: parameter registration, train/eval mode, layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from flowvi.numcore import tensor as T
from flowvi.numcore.tensor import Tensor


class Module:
    """Parameters are Tensor attributes with ``requires_grad``; children are
    Module attributes or lists of Modules. Names follow attribute paths."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=T.DTYPE)
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: stored shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 init_std: float | None = None, zero: bool = False):
        std = init_std if init_std is not None else 1.0 / np.sqrt(max(n_in, 1))
        w = np.zeros((n_in, n_out)) if zero else rng.normal(0.0, std, size=(n_in, n_out))
        self.weight = T.parameter(w)
        self.bias = T.parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight) if x.ndim >= 2 else T.matmul(T.reshape(x, (1, -1)), self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class MaskedLinear(Linear):
    """Linear layer whose weight is multiplied by a fixed 0/1 mask."""

    def __init__(self, n_in: int, n_out: int, mask: np.ndarray, rng: np.random.Generator,
                 init_std: float | None = None, zero: bool = False):
        super().__init__(n_in, n_out, rng, bias=True, init_std=init_std, zero=zero)
        if mask.shape != (n_in, n_out):
            raise T.ShapeError(f"mask shape {mask.shape} != weight shape {(n_in, n_out)}")
        self.mask = np.asarray(mask, dtype=T.DTYPE)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight * self.mask) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = T.parameter(np.ones(dim))
        self.beta = T.parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


ACTIVATIONS = {
    "tanh": T.tanh,
    "relu": T.relu,
    "gelu": T.gelu,
    "leakyrelu": T.leaky_relu,
    "sigmoid": T.sigmoid,
    "softplus": T.softplus,
}


class MLP(Module):
    """Feedforward stack ``in -> hidden... -> out`` with optional dropout."""

    def __init__(self, n_in: int, hidden: list[int], n_out: int, rng: np.random.Generator,
                 activation: str = "tanh", dropout: float = 0.0, zero_last: bool = False,
                 last_std: float | None = None):
        dims = [n_in, *hidden]
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.out = Linear(dims[-1], n_out, rng, zero=zero_last, init_std=last_std)
        self.activation = activation
        self.dropout = dropout

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        act = ACTIVATIONS[self.activation]
        for layer in self.layers:
            x = act(layer(x))
            x = T.dropout(x, self.dropout, rng, self.training)
        return self.out(x)
