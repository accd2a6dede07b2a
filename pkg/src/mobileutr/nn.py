"""Minimal module system: parameter registration, train/eval modes, layers."""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import ConfigurationError
from .tensor import Parameter, Tensor


class Module:
    """Base class. Parameters, buffers and sub-modules register on assignment."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for mod_name, mod in self.named_modules(prefix):
            for name, p in mod._params.items():
                yield (f"{mod_name}.{name}" if mod_name else name), p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules(prefix):
            for name, b in mod._buffers.items():
                yield (f"{mod_name}.{name}" if mod_name else name), b

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, p.data) for k, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        bufs = {}
        for mod_name, mod in self.named_modules():
            for name in mod._buffers:
                bufs[f"{mod_name}.{name}" if mod_name else name] = (mod, name)
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise ConfigurationError(f"state is missing entries: {sorted(missing)[:5]}")
        for key, p in own.items():
            arr = np.asarray(state[key])
            if arr.shape != p.shape:
                raise ConfigurationError(f"{key}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr
        for key, (mod, name) in bufs.items():
            mod._buffers[name][...] = np.asarray(state[key])


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        self._modules[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _kaiming(rng: np.random.Generator, shape, fan_in: int, dtype) -> Parameter:
    std = math.sqrt(2.0 / fan_in)
    return Parameter(rng.normal(0.0, std, size=shape).astype(dtype))


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> Parameter:
    w = rng.normal(0.0, std, size=shape)
    w = np.clip(w, -2 * std, 2 * std)
    return Parameter(w.astype(dtype))


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, padding: Optional[int] = None,
                 groups: int = 1, bias: bool = True, rng=None, dtype=np.float32):
        super().__init__()
        if cin % groups or cout % groups:
            raise ConfigurationError(f"Conv2d channels {cin}->{cout} not divisible by groups={groups}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cin, self.cout, self.kernel, self.groups = cin, cout, kernel, groups
        self.stride = stride
        self.padding = (kernel - 1) // 2 if padding is None else padding
        fan_in = cin // groups * kernel * kernel
        self.weight = _kaiming(rng, (cout, cin // groups, kernel, kernel), fan_in, dtype)
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding,
                          groups=self.groups)


class ConvTranspose2d(Module):
    """Transposed conv with kernel == stride."""

    def __init__(self, cin: int, cout: int, kernel: int, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kernel = kernel
        self.weight = _kaiming(rng, (cin, cout, kernel, kernel), cin, dtype)
        self.bias = Parameter(np.zeros(cout, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d_transpose(x, self.weight, self.bias, stride=self.kernel)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        if not 0 < momentum < 1 or eps <= 0:
            raise ConfigurationError("batchnorm needs 0 < momentum < 1 and eps > 0")
        self.momentum, self.eps = momentum, eps
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                               training=self.training, momentum=self.momentum, eps=self.eps)


class LayerNorm(Module):
    """Layer norm over one axis (axis=1 normalises channels of an N,C,H,W map)."""

    def __init__(self, features: int, axis: int = -1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.axis, self.eps = axis, eps
        self.weight = Parameter(np.ones(features, dtype=dtype))
        self.bias = Parameter(np.zeros(features, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, axis=self.axis, eps=self.eps)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = _trunc_normal(rng, (fin, fout), 0.02, dtype)
        self.bias = Parameter(np.zeros(fout, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.matmul(x, self.weight) + self.bias
