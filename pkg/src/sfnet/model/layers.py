"""Parameter containers and basic layers on top of the autodiff ops."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from sfnet.autodiff import Tensor, batchnorm2d, conv2d, get_default_dtype, matmul


class Module:
    """Base class: parameters are the ``requires_grad`` tensors found on attributes.

    Attribute insertion order fixes the parameter order, so naming and
    iteration are deterministic. Non-trainable state (batch-norm running
    statistics) lives in ``_buffers``.
    """

    def __init__(self):
        self.training = True
        self._buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self) -> Iterator[tuple]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for name, buf in self._buffers.items():
            yield prefix + name, buf
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, p.data) for name, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, target in own.items():
            src = np.asarray(state[name])
            if src.shape != target.shape:
                raise ValueError(f"{name}: shape {src.shape} != expected {target.shape}")
            target[...] = src


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    # gain sqrt(2) for ReLU: bound = gain * sqrt(3 / fan_in)
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: Optional[int] = None,
                 bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = parameter(kaiming_uniform(
            rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = parameter(np.zeros(out_channels)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = parameter(np.ones(channels))
        self.bias = parameter(np.zeros(channels))
        dt = get_default_dtype()
        self._buffers["running_mean"] = np.zeros(channels, dtype=dt)
        self._buffers["running_var"] = np.ones(channels, dtype=dt)

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self.weight, self.bias,
                           self._buffers["running_mean"], self._buffers["running_var"],
                           training=self.training, momentum=self.momentum, eps=self.eps)


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as ``in × out``."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        self.weight = parameter(kaiming_uniform(rng, (in_features, out_features), in_features))
        self.bias = parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y
