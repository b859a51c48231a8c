"""Layers with named parameters, built on :mod:`rfsep.tensor`."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import rng
from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameter container.

    Tensors with ``requires_grad`` and child modules assigned as attributes are
    discovered in assignment order, giving stable dotted names such as
    ``down1.conv.weight``.
    """

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters().items():
            arr = arrays[prefix + name]
            if arr.shape != p.shape:
                raise ValueError(f"{prefix + name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def arrays(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((prefix + k, v.data) for k, v in self.named_parameters().items())


def param_count(module: Module | None) -> int:
    if module is None:
        return 0
    return int(sum(p.data.size for p in module.parameters()))


def _init(seed: int, name: str, shape, fan_in: int) -> Tensor:
    std = np.sqrt(2.0 / max(fan_in, 1))
    data = rng.normal(rng.derive_seed(seed, name), int(np.prod(shape))).reshape(shape) * std
    return Tensor(data.astype(T.DEFAULT_DTYPE), requires_grad=True)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k=3, stride=1, padding=None, seed=0, name="conv", zero=False):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        if zero:
            self.weight = T.zeros((c_out, c_in, k, k), requires_grad=True)
        else:
            self.weight = _init(seed, name + ".weight", (c_out, c_in, k, k), c_in * k * k)
        self.bias = T.zeros((c_out,), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, d_in, d_out, seed=0, name="linear", zero=False):
        if zero:
            self.weight = T.zeros((d_out, d_in), requires_grad=True)
        else:
            self.weight = _init(seed, name + ".weight", (d_out, d_in), d_in)
        self.bias = T.zeros((d_out,), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class GroupNorm(Module):
    """One-group normalisation with a per-channel affine."""

    def __init__(self, channels):
        self.gamma = Tensor(np.ones(channels, T.DEFAULT_DTYPE), requires_grad=True)
        self.beta = T.zeros((channels,), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.gamma, self.beta)
