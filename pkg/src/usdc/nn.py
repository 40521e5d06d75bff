"""Small module system on top of :mod:`usdc.autograd`: layers and AdamW."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .autograd import RngState, Tensor, batchnorm, get_default_dtype, layernorm, matmul


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)


class Module:
    """Parameters are discovered by walking attributes (tensors, modules, lists, dicts)."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for name, value in vars(self).items():
            if not name.startswith("_"):
                yield from _walk_modules(value)

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk_buffers(value, f"{prefix}{name}")

    def n_params(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def _walk(value, path: str):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=path + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{path}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{path}.{k}")


def _walk_modules(value):
    if isinstance(value, Module):
        yield from value.modules()
    elif isinstance(value, (list, tuple)):
        for v in value:
            yield from _walk_modules(v)
    elif isinstance(value, dict):
        for v in value.values():
            yield from _walk_modules(v)


def _walk_buffers(value, path: str):
    if isinstance(value, Module):
        yield from value.buffers(prefix=path + ".")
    elif isinstance(value, np.ndarray) and path.rsplit(".", 1)[-1].startswith("running_"):
        yield path, value
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk_buffers(v, f"{path}.{i}")


class Linear(Module):
    """``y = x @ weight + bias`` with weight stored as [in, out]."""

    def __init__(self, d_in: int, d_out: int, rng: RngState | None = None, std: float = 0.02, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        init = rng.normal((d_in, d_out), scale=std) if rng is not None else np.zeros((d_in, d_out))
        self.weight = parameter(init)
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gain, self.bias, self.eps)


class BatchNorm(Module):
    """Batch normalization over every axis except the last (feature) axis."""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum, self.eps = momentum, eps
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.running_mean = np.zeros(dim, dtype=get_default_dtype())
        self.running_var = np.ones(dim, dtype=get_default_dtype())

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm(
            x, self.gain, self.bias, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class AdamW:
    """Adam with decoupled weight decay; a group may carry its own ``lr``."""

    def __init__(self, groups: list[dict], lr: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = groups
        self.lr = lr
        self.base_lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.state: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def params(self) -> list[Tensor]:
        return [p for g in self.groups for p in g["params"]]

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for group in self.groups:
            lr = group.get("lr", self.lr)
            wd = group.get("weight_decay", 0.0)
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                m, v = self.state.get(id(p), (np.zeros_like(p.data), np.zeros_like(p.data)))
                m = b1 * m + (1.0 - b1) * g
                v = b2 * v + (1.0 - b2) * g * g
                self.state[id(p)] = (m, v)
                if wd:
                    p.data *= 1.0 - lr * wd
                p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def cosine_lr(base_lr: float, step: int, total_steps: int, warmup: int = 0, min_lr: float = 0.0) -> float:
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    progress = min(max(progress, 0.0), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))
