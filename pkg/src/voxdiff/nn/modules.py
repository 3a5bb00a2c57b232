"""Parameterized layers on top of the autograd tape.

Modules hold ``Tensor`` parameters and submodules as plain attributes;
``parameters()`` and ``state_dict()`` discover them by walking ``__dict__``
recursively, so no registration calls are needed. All constructors take an
explicit ``numpy.random.Generator`` so initialization is reproducible from a
single seed.
"""

from __future__ import annotations

import numpy as np

from voxdiff.nn import autograd as ag
from voxdiff.nn.autograd import Tensor


class Module:
    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for value in self.__dict__.values():
            out.extend(_collect_params(value))
        return out

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, value in self.__dict__.items():
            _collect_state(value, prefix + name, out)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            parts = []
            if missing:
                parts.append(f"missing keys: {missing[:8]}")
            if unexpected:
                parts.append(f"unexpected keys: {unexpected[:8]}")
            raise ValueError("state dict mismatch; " + "; ".join(parts))
        for name, value in self.__dict__.items():
            _load_state(value, name, state)

    def astype(self, dtype) -> "Module":
        """Cast all parameters in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _collect_params(value) -> list[Tensor]:
    if isinstance(value, Tensor):
        return [value] if value.requires_grad else []
    if isinstance(value, Module):
        return value.parameters()
    if isinstance(value, (list, tuple)):
        out = []
        for item in value:
            out.extend(_collect_params(item))
        return out
    return []


def _collect_state(value, key: str, out: dict):
    if isinstance(value, Tensor):
        out[key] = value.data
    elif isinstance(value, Module):
        for name, sub in value.__dict__.items():
            _collect_state(sub, f"{key}.{name}", out)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _collect_state(item, f"{key}.{i}", out)


def _load_state(value, key: str, state: dict):
    if isinstance(value, Tensor):
        src = state[key]
        if src.shape != value.data.shape:
            raise ValueError(
                f"shape mismatch for '{key}': checkpoint {src.shape} vs model {value.data.shape}")
        value.data = src.astype(value.data.dtype, copy=True)
        value.grad = None
    elif isinstance(value, Module):
        for name, sub in value.__dict__.items():
            _load_state(sub, f"{key}.{name}", state)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _load_state(item, f"{key}.{i}", state)


class ModuleList(Module):
    def __init__(self, modules=()):
        self.items = list(modules)

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def append(self, m):
        self.items.append(m)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float32, zero_init: bool = False):
        if zero_init:
            w = np.zeros((in_features, out_features))
        else:
            bound = 1.0 / np.sqrt(in_features)
            w = rng.uniform(-bound, bound, size=(in_features, out_features))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = ag.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class Conv3d(Module):
    """Channels-last 3D convolution: input (B, X, Y, Z, C_in)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 bias: bool = True, dtype=np.float32, zero_init: bool = False):
        k = kernel_size
        fan_in = in_channels * k ** 3
        if zero_init:
            w = np.zeros((k, k, k, in_channels, out_channels))
        else:
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(k, k, k, in_channels, out_channels))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return ag.conv3d(x, self.weight, self.bias, stride=self.stride,
                         padding=self.padding)


def group_norm(x: Tensor, num_groups: int, weight: Tensor, bias: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize over (spatial, channels-within-group); x is (B, ..., C)."""
    shape = x.shape
    B, C = shape[0], shape[-1]
    spatial = int(np.prod(shape[1:-1], dtype=np.int64)) if len(shape) > 2 else 1
    g = ag.reshape(x, (B, spatial, num_groups, C // num_groups))
    mean = g.mean(axis=(1, 3), keepdims=True)
    centered = g - mean
    var = (centered * centered).mean(axis=(1, 3), keepdims=True)
    normed = centered * ag.power(var + eps, -0.5)
    out = ag.reshape(normed, shape)
    return out * weight + bias


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis only."""
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * ag.power(var + eps, -0.5) * weight + bias


class GroupNorm(Module):
    def __init__(self, num_groups: int, num_channels: int, dtype=np.float32,
                 eps: float = 1e-5):
        if num_channels % num_groups != 0:
            raise ValueError(
                f"channels ({num_channels}) must divide evenly into {num_groups} groups")
        self.num_groups = num_groups
        self.eps = eps
        self.weight = Tensor(np.ones(num_channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(num_channels, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return group_norm(x, self.num_groups, self.weight, self.bias, self.eps)


class LayerNorm(Module):
    def __init__(self, num_features: int, dtype=np.float32, eps: float = 1e-5):
        self.eps = eps
        self.weight = Tensor(np.ones(num_features, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(num_features, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, num_embeddings: int, dim: int, rng: np.random.Generator,
                 dtype=np.float32):
        w = rng.normal(0.0, 0.02, size=(num_embeddings, dim))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)

    def forward(self, indices: np.ndarray) -> Tensor:
        return ag.embedding(self.weight, indices)
