"""Minimal layer containers over :mod:`hrpvt.tensor`."""

from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base container: parameters, buffers and child modules are discovered
    from attributes in assignment order, which fixes serialisation order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        self._items: List[Module] = []
        for m in items:
            self.append(m)

    def append(self, m: Module) -> None:
        self._children[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def parameter(data: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples redrawn outside +-2 std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, dtype=np.float64, bias: bool = True):
        super().__init__()
        self.weight = parameter(trunc_normal(rng, (din, dout)), dtype)
        if bias:
            self.bias = parameter(np.zeros(dout), dtype)
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.gain = parameter(np.ones(dim), dtype)
        self.offset = parameter(np.zeros(dim), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.offset, self.eps)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float64, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gain = parameter(np.ones(channels), dtype)
        self.offset = parameter(np.zeros(channels), dtype)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(
            x, self.gain, self.offset, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


def _conv_init(rng, cout, cin_g, kh, kw, groups):
    # fan-out scaled normal, as used for PVT v2 convolutions
    fan_out = kh * kw * cout // groups
    return rng.standard_normal((cout, cin_g, kh, kw)) * np.sqrt(2.0 / fan_out)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, dilation=1, groups=1, dtype=np.float64, bias=True):
        super().__init__()
        kh, kw = T._pair(kernel)
        if cin % groups or cout % groups:
            raise ValueError(f"channels {cin}->{cout} not divisible by groups={groups}")
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups
        self.weight = parameter(_conv_init(rng, cout, cin // groups, kh, kw, groups), dtype)
        self.bias = parameter(np.zeros(cout), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)


class Deconv2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, dtype=np.float64, bias=True):
        super().__init__()
        kh, kw = T._pair(kernel)
        self.stride, self.padding = stride, padding
        self.weight = parameter(_conv_init(rng, cin, cout, kh, kw, 1), dtype)
        self.bias = parameter(np.zeros(cout), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.deconv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvBlock(Module):
    """Convolution (or transposed convolution), batch norm, ReLU."""

    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, dilation=1, dtype=np.float64, transposed=False):
        super().__init__()
        if transposed:
            self.conv = Deconv2d(cin, cout, kernel, rng, stride=stride, padding=padding, dtype=dtype)
        else:
            self.conv = Conv2d(cin, cout, kernel, rng, stride=stride, padding=padding, dilation=dilation, dtype=dtype)
        self.norm = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.norm(self.conv(x)))


def count_params(module: Module) -> int:
    return int(sum(p.size for p in module.parameters()))


def param_breakdown(module: Module, depth: int = 1) -> Dict[str, int]:
    """Parameter counts grouped by the first ``depth`` components of each path."""
    out: Dict[str, int] = OrderedDict()
    for name, p in module.named_parameters():
        key = ".".join(name.split(".")[:depth])
        out[key] = out.get(key, 0) + p.size
    return out


def zero_parameters(module: Module) -> None:
    for p in module.parameters():
        p.data[...] = 0.0


def load_arrays(module: Module, arrays: Dict[str, np.ndarray]) -> None:
    """Copy named arrays into parameters/buffers of matching shape."""
    params = dict(module.named_parameters())
    buffers = dict(module.named_buffers())
    for name, arr in arrays.items():
        if name in params:
            target = params[name].data
        elif name in buffers:
            target = buffers[name]
        else:
            raise KeyError(f"unexpected tensor {name!r}")
        if target.shape != arr.shape:
            raise ValueError(f"tensor {name!r}: shape {arr.shape} does not match model shape {target.shape}")
        target[...] = arr
    missing = (set(params) | set(buffers)) - set(arrays)
    if missing:
        raise KeyError(f"missing tensors: {sorted(missing)[:5]}")


def state_arrays(module: Module) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    for name, p in module.named_parameters():
        out[name] = p.data
    for name, b in module.named_buffers():
        out[name] = b
    return out
