"""Parameters, module containers, and the basic learned layers."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable tensor with a dotted-path name assigned by its owner model.

    Names are unique within a model (attribute paths are unique) and are the
    keys used by the checkpoint format.
    """

    __slots__ = ("name", "trainable")

    def __init__(self, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = ""
        self.trainable = trainable


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0, dtype=T.DEFAULT_DTYPE) -> np.ndarray:
    """Normal(0, std) samples, resampled until within ``bound`` std devs."""
    vals = rng.standard_normal(shape)
    out_of_range = np.abs(vals) > bound
    while out_of_range.any():
        vals[out_of_range] = rng.standard_normal(int(out_of_range.sum()))
        out_of_range = np.abs(vals) > bound
    return (vals * std).astype(dtype)


class Module:
    """Minimal container: anything holding Parameters or other Modules."""

    def _items(self):
        for key, value in vars(self).items():
            yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._items():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path)
            elif isinstance(value, ModuleList):
                for i, sub in enumerate(value):
                    yield from sub.named_parameters(f"{path}.{i}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data) for name, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        own = OrderedDict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ShapeError(f"state dict mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


class ModuleList(list):
    """A plain list that named_parameters knows how to walk."""


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True, dtype=T.DEFAULT_DTYPE):
        self.weight = Parameter(trunc_normal(rng, (out_features, in_features), dtype=dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, T.transpose(self.weight, (1, 0)))
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=T.DEFAULT_DTYPE):
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True, dtype=T.DEFAULT_DTYPE):
        kh, kw = (kernel_size, kernel_size) if isinstance(kernel_size, int) else kernel_size
        self.weight = Parameter(trunc_normal(rng, (out_channels, in_channels, kh, kw), dtype=dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
