"""Minimal parameter containers on top of the autodiff engine."""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..io import load_checkpoint, save_checkpoint


class Module:
    """Holds named parameters and child modules, in insertion order."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, ad.Tensor]]:
        out = []
        for name, value in vars(self).items():
            if isinstance(value, ad.Tensor) and value.requires_grad:
                out.append((prefix + name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(prefix + name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{prefix}{name}.{i}."))
        return out

    def parameters(self) -> list[ad.Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())

    def load(self, path) -> "Module":
        self.load_state_dict(load_checkpoint(path))
        return self


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape).astype(ad.get_dtype())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bound: float | None = None):
        bound = 1.0 / np.sqrt(n_in) if bound is None else bound
        self.weight = ad.Parameter(_uniform(rng, bound, (n_in, n_out)))
        self.bias = ad.Parameter(_uniform(rng, bound, (n_out,)))

    def __call__(self, x):
        return ad.matmul(x, self.weight) + self.bias


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None):
        fan_in = c_in * k * k
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        self.weight = ad.Parameter(_uniform(rng, np.sqrt(6.0 / fan_in), (c_out, c_in, k, k)))
        self.bias = ad.Parameter(np.zeros(c_out))

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    """4x4 stride-2 upsampling by default (doubles H and W)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, k: int = 4,
                 stride: int = 2, padding: int = 1):
        fan_in = c_in * k * k / (stride * stride)
        self.stride, self.padding = stride, padding
        self.weight = ad.Parameter(_uniform(rng, np.sqrt(6.0 / fan_in), (c_in, c_out, k, k)))
        self.bias = ad.Parameter(np.zeros(c_out))

    def __call__(self, x):
        return ad.conv_transpose2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
