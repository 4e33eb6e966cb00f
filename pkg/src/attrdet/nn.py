"""Parameter containers and the small layers the model is assembled from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .ops import conv2d
from .tensor import Tensor


def xavier_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return T.parameter(rng.uniform(-bound, bound, size=shape))


def zeros(shape) -> Tensor:
    return T.parameter(np.zeros(shape))


def ones(shape) -> Tensor:
    return T.parameter(np.ones(shape))


class Module:
    """Walks attributes to find parameters (Tensors with requires_grad) and
    submodules, including lists of submodules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if strict and missing:
            raise KeyError(f"missing parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        for k, p in own.items():
            if k in state:
                arr = np.asarray(state[k])
                if arr.shape != p.shape:
                    raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
                p.data = arr.astype(p.dtype).copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = xavier_uniform(rng, (d_out, d_in), d_in, d_out)
        self.bias = zeros((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = ones((dim,))
        self.bias = zeros((dim,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, axis=-1, eps=self.eps)


class ChannelNorm(Module):
    """Layer norm across the channels of a C x H x W map, per pixel."""

    def __init__(self, channels: int, eps: float = 1e-5):
        self.gain = ones((channels, 1, 1))
        self.bias = zeros((channels, 1, 1))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, axis=0, eps=self.eps)


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int = 3, stride: int = 1):
        self.weight = xavier_uniform(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k)
        self.bias = zeros((c_out,))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride)


class MLP3(Module):
    """Three linear layers with ReLU between; output width equals input width."""

    def __init__(self, rng: np.random.Generator, dim: int, hidden: int | None = None):
        hidden = hidden or dim
        self.layers = [Linear(rng, dim, hidden), Linear(rng, hidden, hidden), Linear(rng, hidden, dim)]

    def __call__(self, x: Tensor) -> Tensor:
        return mlp3(x, self.layers)


def mlp3(x: Tensor, layers) -> Tensor:
    x = T.relu(layers[0](x))
    x = T.relu(layers[1](x))
    return layers[2](x)


class FFN(Module):
    def __init__(self, rng: np.random.Generator, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))
