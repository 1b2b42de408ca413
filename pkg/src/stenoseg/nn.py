"""Parameter containers and the basic layers the blocks are assembled from."""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Iterator

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, default_dtype


_meta = threading.local()


@contextlib.contextmanager
def shape_only() -> Iterator[None]:
    """Create parameters as zero-strided placeholders (for counting huge configs)."""
    prev = getattr(_meta, "on", False)
    _meta.on = True
    try:
        yield
    finally:
        _meta.on = prev


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        if getattr(_meta, "on", False):
            self.data = np.broadcast_to(np.zeros((), self.data.dtype), self.data.shape)


class Module:
    """Base class with a stable, insertion-ordered parameter registry.

    Parameter names are the dotted attribute path, e.g. ``encoder.1.blocks.0.conv1.weight``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"parameter names differ: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=None) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype or default_dtype())


def zeros(shape, dtype=None) -> np.ndarray:
    return np.zeros(shape, dtype=dtype or default_dtype())


def ones(shape, dtype=None) -> np.ndarray:
    return np.ones(shape, dtype=dtype or default_dtype())


class Linear(Module):
    def __init__(self, rng, in_features: int, out_features: int, bias: bool = True, dtype=None):
        self.weight = Parameter(kaiming_uniform(rng, (in_features, out_features), in_features, dtype))
        self.bias = Parameter(zeros(out_features, dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, rng, in_channels, out_channels, kernel_size, stride=1, padding=0, groups=1,
                 bias=True, dtype=None):
        kh, kw = (kernel_size, kernel_size) if isinstance(kernel_size, int) else kernel_size
        fan_in = in_channels // groups * kh * kw
        self.weight = Parameter(kaiming_uniform(rng, (out_channels, in_channels // groups, kh, kw), fan_in, dtype))
        self.bias = Parameter(zeros(out_channels, dtype)) if bias else None
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class ConvTranspose2(Module):
    def __init__(self, rng, in_channels, out_channels, bias=True, dtype=None):
        self.weight = Parameter(kaiming_uniform(rng, (in_channels, out_channels, 2, 2), in_channels, dtype))
        self.bias = Parameter(zeros(out_channels, dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2(x, self.weight, self.bias)


class LayerNorm(Module):
    """Layer normalization over the last axis."""

    def __init__(self, channels: int, eps: float = 1e-5, dtype=None):
        self.weight = Parameter(ones(channels, dtype))
        self.bias = Parameter(zeros(channels, dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight.shape, self.weight, self.bias, self.eps)


class ChannelLayerNorm(LayerNorm):
    """Layer normalization over the channel axis of a B x C x H x W map."""

    def forward(self, x: Tensor) -> Tensor:
        y = ops.layer_norm(ops.transpose(x, (0, 2, 3, 1)), self.weight.shape, self.weight, self.bias, self.eps)
        return ops.transpose(y, (0, 3, 1, 2))


def to_channels_last(x: Tensor) -> Tensor:
    return ops.transpose(x, (0, 2, 3, 1))


def to_channels_first(x: Tensor) -> Tensor:
    return ops.transpose(x, (0, 3, 1, 2))
