"""Small module system over the tensor library: named parameters, layers."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .tensor import Parameter, Tensor, conv2d, group_norm, matmul, silu


class Module:
    """Container with attribute-registered parameters and submodules.

    Parameter names are the dot-joined attribute paths, unique per model.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, ModuleList):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            p.name = f"{prefix}{name}"
            yield p.name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._list = []
        for m in mods:
            self.append(m)

    def append(self, m: Module):
        self._modules[str(len(self._list))] = m
        self._list.append(m)

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


def _he_weight(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)


class Linear(Module):
    """y = x W + b with W stored (in_dim, out_dim). Bias optional."""

    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int,
                 bias: bool = True, dtype=np.float32):
        super().__init__()
        self.w = Parameter(_he_weight(rng, (in_dim, out_dim), in_dim, dtype))
        self.b = Parameter(np.zeros(out_dim, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.w)
        if self.b is not None:
            y = y + self.b
        return y


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int, k: int,
                 stride: int = 1, pad: Optional[int] = None, dtype=np.float32):
        super().__init__()
        pad = k // 2 if pad is None else pad
        self.stride, self.pad = stride, pad
        self.w = Parameter(_he_weight(rng, (out_ch, in_ch, k, k), in_ch * k * k, dtype))
        self.b = Parameter(np.zeros(out_ch, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, dtype=np.float32):
        super().__init__()
        self.groups = groups
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return group_norm(x, self.groups, self.gamma, self.beta)


def norm_groups(channels: int, preferred: int = 8) -> int:
    """Largest group count <= preferred that divides the channel count."""
    g = min(preferred, channels)
    while channels % g != 0:
        g -= 1
    return g


__all__ = ["Module", "ModuleList", "Linear", "Conv2d", "GroupNorm", "norm_groups", "silu"]
