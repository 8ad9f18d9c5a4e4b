"""A small module system over the autodiff primitives."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from ..autodiff import functional as F
from ..autodiff.tensor import Tensor
from ..errors import ShapeError


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=np.float32):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Base class: tracks parameters and submodules in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_rng(self, rng: np.random.Generator) -> None:
        """Share one generator among all stochastic layers."""
        for m in self.modules():
            if hasattr(m, "rng"):
                object.__setattr__(m, "rng", rng)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state, strict: bool = True) -> None:
        params = dict(self.named_parameters())
        for name, arr in state.items():
            if name not in params:
                if strict:
                    raise KeyError(f"unknown tensor name {name!r}")
                continue
            if tuple(arr.shape) != params[name].shape:
                raise ShapeError(
                    f"tensor {name!r}: shape {tuple(arr.shape)} does not match model shape {params[name].shape}"
                )
        if strict:
            missing = [n for n in params if n not in state]
            if missing:
                raise KeyError(f"missing tensors: {', '.join(missing)}")
        for name, arr in state.items():
            if name in params:
                params[name].data = np.array(arr, dtype=params[name].dtype)

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (float64 is used for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i):
        return list(self._modules.values())[i]

    def forward(self, x):
        for layer in self._modules.values():
            x = layer(x)
        return x


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel_size, stride=1, padding=0, bias=True, *, rng):
        super().__init__()
        fan_in = cin * kernel_size * kernel_size
        self.weight = Parameter(_uniform(rng, (cout, cin, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(_uniform(rng, (cout,), fan_in)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels, kernel_size, stride=1, padding=0, bias=True, *, rng):
        super().__init__()
        fan_in = kernel_size * kernel_size
        self.weight = Parameter(_uniform(rng, (channels, 1, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(_uniform(rng, (channels,), fan_in)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return F.depthwise_conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, din, dout, bias=True, *, rng):
        super().__init__()
        self.weight = Parameter(_uniform(rng, (dout, din), din))
        self.bias = Parameter(_uniform(rng, (dout,), din)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    """Normalises the trailing axis (channels-last layout)."""

    def __init__(self, dim, eps=1e-6):
        super().__init__()
        self.weight = Parameter(np.ones(dim, np.float32))
        self.bias = Parameter(np.zeros(dim, np.float32))
        self.eps = eps

    def forward(self, x):
        return F.layer_norm(x, self.weight.shape, self.weight, self.bias, self.eps)


class LayerNorm2d(LayerNorm):
    """LayerNorm over channels of an NCHW tensor."""

    def forward(self, x):
        h = F.transpose(x, (0, 2, 3, 1))
        h = F.layer_norm(h, self.weight.shape, self.weight, self.bias, self.eps)
        return F.transpose(h, (0, 3, 1, 2))


class GRN(Module):
    """Global response normalization; zero-initialised, so identity at start."""

    def __init__(self, dim, eps=1e-6, channel_axis=-1):
        super().__init__()
        self.gamma = Parameter(np.zeros(dim, np.float32))
        self.beta = Parameter(np.zeros(dim, np.float32))
        self.eps = eps
        self.channel_axis = channel_axis

    def forward(self, x):
        return F.global_response_norm(x, self.gamma, self.beta, self.eps, channel_axis=self.channel_axis)


class Dropout(Module):
    def __init__(self, p=0.0):
        super().__init__()
        self.p = p
        self.rng = np.random.default_rng(0)

    def forward(self, x):
        return F.dropout(x, self.p, self.rng, training=self.training)


class DropPath(Module):
    def __init__(self, p=0.0):
        super().__init__()
        self.p = p
        self.rng = np.random.default_rng(0)

    def forward(self, x):
        return F.drop_path(x, self.p, self.rng, training=self.training)


def count_parameters(model: Module) -> int:
    return int(np.sum([p.size for p in model.parameters()], dtype=np.int64))
