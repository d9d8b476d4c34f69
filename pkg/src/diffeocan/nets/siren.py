"""Sinusoidal coordinate network that parametrises velocity fields."""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..diffeo import Svf, boundary_taper
from .layers import Linear, Module


class SirenNet(Module):
    """sin(w0 * (W x + b)) hidden layers followed by a linear head.

    ``zero_head=True`` zero-initialises the head so the represented field
    starts at exactly zero.
    """

    def __init__(self, widths=(2, 128, 128, 128, 2), omega0: float = 30.0,
                 seed: int = 0, zero_head: bool = True):
        if widths[0] != 2 or widths[-1] != 2:
            raise ValueError("SIREN maps 2-D coordinates to 2-D velocities")
        rng = np.random.default_rng(seed)
        self.widths = tuple(widths)
        self.omega0 = omega0
        hidden = []
        for i, (a, b) in enumerate(zip(widths[:-2], widths[1:-1])):
            bound = 1.0 / a if i == 0 else np.sqrt(6.0 / a) / omega0
            hidden.append(Linear(a, b, rng, bound=bound))
        self.hidden = hidden
        self.head = Linear(widths[-2], 2, rng, bound=np.sqrt(6.0 / widths[-2]) / omega0)
        if zero_head:
            self.head.weight.data[...] = 0.0
            self.head.bias.data[...] = 0.0

    def __call__(self, coords) -> ad.Tensor:
        h = ad.as_tensor(coords)
        for layer in self.hidden:
            h = ad.sin(layer(h) * self.omega0)
        return self.head(h)


def normalised_coords(h: int, w: int) -> np.ndarray:
    """(H*W, 2) pixel centres mapped to [-1, 1]^2, ordered row-major, (x, y)."""
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=-1).astype(ad.get_dtype())


def siren_field(net: SirenNet, shape: tuple, scale: float, taper: np.ndarray | None = None) -> ad.Tensor:
    """Tapered velocity (H, W, 2) on the tape: ``scale * net(coords) * taper``."""
    h, w = shape
    if taper is None:
        taper = boundary_taper(h, w)
    out = net(normalised_coords(h, w)).reshape(h, w, 2)
    return out * (np.asarray(taper, dtype=ad.get_dtype())[..., None] * scale)


def siren_velocity(net: SirenNet, shape: tuple, scale: float) -> Svf:
    """Evaluate the network on the grid; the returned Svf carries the boundary taper."""
    if scale <= 0:
        raise ValueError("velocity scale must be positive")
    h, w = shape
    raw = net(normalised_coords(h, w)).data.reshape(h, w, 2) * scale
    return Svf(raw, boundary_taper(h, w))
