"""Minimal layer system: parameter registry, train/eval mode, state dicts."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, EntryShapeError, MissingEntryError, UnknownEntryError
from .tensor import Parameter, RunningStats, Tensor


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int,
                    dtype=T.DEFAULT_DTYPE) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base class; child modules and parameters register by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_stats", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        params = self.__dict__.get("_params")
        if params is not None:
            if isinstance(value, Parameter):
                params[key] = value
            elif isinstance(value, Module):
                self._children[key] = value
            elif isinstance(value, RunningStats):
                self._stats[key] = value
        object.__setattr__(self, key, value)

    # -- traversal --------------------------------------------------------
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for k, p in self._params.items():
            yield (f"{prefix}{k}", p)
        for k, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{k}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, rs in self._stats.items():
            yield (f"{prefix}{k}.running_mean", rs.mean)
            yield (f"{prefix}{k}.running_var", rs.var)
        for k, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{k}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    # -- mode / gradients ---------------------------------------------------
    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.grad = None

    def cast_(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for rs in m._stats.values():
                rs.mean = rs.mean.astype(dtype)
                rs.var = rs.var.astype(dtype)
        return self

    # -- state dict ---------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: buf for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own_params = dict(self.named_parameters())
        own_bufs = dict(self.named_buffers())
        known = set(own_params) | set(own_bufs)
        for name in known:
            if name not in state:
                raise MissingEntryError(f"state is missing entry {name!r}")
        if strict:
            for name in state:
                if name not in known:
                    raise UnknownEntryError(f"state contains unknown entry {name!r}")
        for name, p in own_params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise EntryShapeError(f"entry {name!r} has shape {arr.shape}, expected {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)
        for name, buf in own_bufs.items():
            arr = np.asarray(state[name])
            if arr.shape != buf.shape:
                raise EntryShapeError(f"entry {name!r} has shape {arr.shape}, expected {buf.shape}")
            buf[...] = arr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        self._items: list[Module] = []
        for m in items:
            self.append(m)

    def append(self, m: Module) -> None:
        self._children[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]


class Identity(Module):
    def __init__(self):
        super().__init__()

    def forward(self, x: Tensor) -> Tensor:
        return x


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, bias: bool = True, *,
                 rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(kaiming_uniform(
            rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, bias: bool = True, *,
                 rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = kernel_size * kernel_size
        self.weight = Parameter(kaiming_uniform(
            rng, (channels, 1, kernel_size, kernel_size), fan_in, dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.depthwise_conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.stats = RunningStats(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm2d(x, self.gamma, self.beta, self.stats,
                              training=self.training, momentum=self.momentum, eps=self.eps)


class GroupNorm(Module):
    def __init__(self, num_groups: int, channels: int, eps: float = 1e-5,
                 dtype=T.DEFAULT_DTYPE):
        super().__init__()
        if num_groups < 1 or channels % num_groups != 0:
            raise ConfigError(f"GroupNorm: {channels} channels not divisible by {num_groups} groups")
        self.num_groups = num_groups
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.num_groups, self.gamma, self.beta, eps=self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, *,
                 rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.weight = Parameter(kaiming_uniform(rng, (out_features, in_features), in_features, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


def default_gn_groups(channels: int, override: int | None = None) -> int:
    """Group count policy: 4 when divisible, else 1 (or an explicit override)."""
    if override is not None:
        if channels % override != 0:
            raise ConfigError(f"gn_groups={override} does not divide {channels} channels")
        return override
    return 4 if channels % 4 == 0 else 1
