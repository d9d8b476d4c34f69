"""Stationary velocity fields and their exponential map.

``exp(v)`` is computed by scaling and squaring: start from ``id + v / 2**n``
and compose the map with itself ``n`` times.  The inverse is ``exp(-v)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .grid import GridError, check_map, compose_displacements, identity_map

TAPER_MARGIN = 3.0
MIN_SQUARING_STEPS = 4
MAX_SQUARING_STEPS = 10


class DiffeoError(ValueError):
    pass


def taper_profile(d, margin: float = TAPER_MARGIN):
    """Cosine ramp of the distance ``d`` to the border: 0 at d=0, 1 for d >= margin."""
    t = np.clip(np.asarray(d, dtype=np.float64) / margin, 0.0, 1.0)
    return 0.5 * (1.0 - np.cos(np.pi * t))


def boundary_taper(h: int, w: int, margin: float = TAPER_MARGIN) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    d = np.minimum(np.minimum(ii, jj), np.minimum(h - 1 - ii, w - 1 - jj))
    return taper_profile(d, margin).astype(np.float32)


@dataclass
class Svf:
    """A velocity field plus the boundary taper that pins it to zero on the border."""

    velocity: np.ndarray
    taper: np.ndarray = None

    def __post_init__(self):
        self.velocity = np.asarray(self.velocity, dtype=np.float32)
        if self.velocity.ndim != 3 or self.velocity.shape[-1] != 2:
            raise DiffeoError(f"velocity must be (H, W, 2), got {self.velocity.shape}")
        if self.taper is None:
            self.taper = boundary_taper(*self.velocity.shape[:2])

    @property
    def shape(self) -> tuple:
        return self.velocity.shape[:2]

    def tapered(self) -> np.ndarray:
        return self.velocity * self.taper[..., None]

    def __neg__(self) -> "Svf":
        return Svf(-self.velocity, self.taper)

    @classmethod
    def zeros(cls, h: int, w: int) -> "Svf":
        return cls(np.zeros((h, w, 2), np.float32))


@dataclass
class Diffeo:
    forward: np.ndarray
    inverse: np.ndarray
    source: Svf
    squaring_steps: int


def choose_squaring_steps(v, cap: int = MAX_SQUARING_STEPS) -> int:
    """Smallest n with max|v| / 2**n < 0.5 px, clamped to [4, cap]."""
    field_ = v.tapered() if isinstance(v, Svf) else np.asarray(v)
    vmax = float(np.max(np.linalg.norm(field_, axis=-1))) if field_.size else 0.0
    n = 0
    while vmax / 2.0 ** n >= 0.5 and n < cap:
        n += 1
    return int(min(max(n, MIN_SQUARING_STEPS), cap))


def exp_displacement(vel, n: int) -> ad.Tensor:
    """Scaling and squaring on the tape: displacement field of exp(vel), vel already tapered."""
    vel = ad.as_tensor(vel)
    h, w = vel.shape[:2]
    ident = identity_map(h, w, dtype=vel.data.dtype)
    disp = vel * (1.0 / 2.0 ** n)
    for _ in range(n):
        disp = disp + compose_displacements(disp, disp + ident)
    return disp


def _check_velocity(v: Svf) -> None:
    if not np.all(np.isfinite(v.velocity)):
        raise DiffeoError("velocity field contains non-finite entries")


def exponentiate(v: Svf, n: int | None = None) -> np.ndarray:
    """Deformation map ``exp(v)`` (absolute coordinates)."""
    _check_velocity(v)
    if n is None:
        n = choose_squaring_steps(v)
    if n < 1:
        raise DiffeoError(f"need at least one squaring step, got {n}")
    h, w = v.shape
    return identity_map(h, w) + exp_displacement(v.tapered(), n).data


def invert(v: Svf, n: int | None = None) -> np.ndarray:
    """``exp(v)^-1 = exp(-v)``."""
    return exponentiate(-v, n)


def make_diffeo(v: Svf, n: int | None = None) -> Diffeo:
    if n is None:
        n = choose_squaring_steps(v)
    return Diffeo(exponentiate(v, n), invert(v, n), v, n)


def _fd(t: ad.Tensor, axis: int) -> ad.Tensor:
    # central differences inside, one-sided at the two ends (np.gradient, edge_order=1)
    def sl(a, b):
        idx = [slice(None)] * t.ndim
        idx[axis] = slice(a, b)
        return tuple(idx)

    first = t[sl(1, 2)] - t[sl(0, 1)]
    mid = (t[sl(2, None)] - t[sl(None, -2)]) * 0.5
    last = t[sl(-1, None)] - t[sl(-2, -1)]
    return ad.concat([first, mid, last], axis=axis)


def jacobian_det_tensor(g) -> ad.Tensor:
    """Per-pixel det of the Jacobian of an (H, W, 2) map, differentiable."""
    g = ad.as_tensor(g)
    gx, gy = g[..., 0], g[..., 1]
    return _fd(gx, 1) * _fd(gy, 0) - _fd(gx, 0) * _fd(gy, 1)


def jacobian_determinant(g: np.ndarray) -> np.ndarray:
    try:
        g = check_map(g)
    except GridError as exc:
        raise DiffeoError(str(exc)) from exc
    if g.shape[0] < 3 or g.shape[1] < 3:
        raise DiffeoError(f"grid {g.shape[:2]} is smaller than the 3x3 stencil")
    return jacobian_det_tensor(g).data


def max_displacement(m: np.ndarray) -> float:
    h, w = m.shape[:2]
    return float(np.max(np.linalg.norm(m - identity_map(h, w), axis=-1)))


def smooth_random_svf(rng: np.random.Generator, h: int, w: int, max_norm: float = 4.0,
                      sigma: float = 8.0) -> Svf:
    """Gaussian-filtered noise under a squared half-sine envelope, rescaled so the tapered
    field peaks at ``max_norm`` pixels.

    The envelope keeps the field's slope bounded near the border; without it the
    3-pixel taper alone would squeeze a full-amplitude field to zero too steeply.
    """
    from scipy.ndimage import gaussian_filter

    noise = rng.standard_normal((h, w, 2))
    sm = np.stack([gaussian_filter(noise[..., k], sigma, mode="wrap") for k in range(2)], axis=-1)
    yy, xx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    v = Svf(sm * ((np.sin(np.pi * yy) * np.sin(np.pi * xx)) ** 2)[..., None])
    peak = float(np.max(np.linalg.norm(v.tapered(), axis=-1)))
    return Svf(v.velocity * (max_norm / max(peak, 1e-12)), v.taper)
