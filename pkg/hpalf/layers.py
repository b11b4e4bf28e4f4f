"""Parameter containers built on the tensorcore ops."""

from __future__ import annotations

import math
from collections.abc import Iterator
from contextlib import contextmanager

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Tree of named parameters and buffers with a train/eval switch."""

    def __init__(self) -> None:
        self.training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{index}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        """Trainable tensors; frozen ones stay in the state dict only."""
        return [p for _, p in self.named_parameters() if p.requires_grad]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    @contextmanager
    def frozen_buffers(self) -> Iterator["Module"]:
        """Train-mode forwards inside the block leave running statistics as they were."""
        saved = {name: buffer.copy() for name, buffer in self.named_buffers()}
        try:
            yield self
        finally:
            for name, buffer in self.named_buffers():
                buffer[...] = saved[name]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            p.data = np.asarray(state[name], dtype=p.data.dtype).reshape(p.shape).copy()
        for name, buffer in self.named_buffers():
            buffer[...] = state[name]


def _param(values: np.ndarray, name: str) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        *,
        kernel: int = 3,
        stride: int = 1,
        padding: int = 1,
    ) -> None:
        super().__init__()
        fan_in = in_channels * kernel * kernel
        self.weight = _param(fan_in_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in), "weight")
        self.bias = _param(fan_in_uniform(rng, (out_channels,), fan_in), "bias")
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return tc.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    """Transposed convolution; weight layout (in, out, k, k) as the adjoint of Conv2d."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        *,
        kernel: int = 3,
        stride: int = 2,
        padding: int = 1,
        output_padding: int = 1,
    ) -> None:
        super().__init__()
        fan_in = in_channels * kernel * kernel
        self.weight = _param(fan_in_uniform(rng, (in_channels, out_channels, kernel, kernel), fan_in), "weight")
        self.bias = _param(fan_in_uniform(rng, (out_channels,), fan_in), "bias")
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding

    def __call__(self, x: Tensor) -> Tensor:
        return tc.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.weight = _param(fan_in_uniform(rng, (out_features, in_features), in_features), "weight")
        self.bias = _param(fan_in_uniform(rng, (out_features,), in_features), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return tc.dense(x, self.weight, self.bias)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, *, momentum: float = 0.1, eps: float = 1e-5) -> None:
        super().__init__()
        self.gamma = _param(np.ones(channels), "gamma")
        self.beta = _param(np.zeros(channels), "beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return tc.batchnorm2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )
