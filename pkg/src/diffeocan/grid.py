"""Images, masks, vector fields and the warping action on the pixel grid.

Conventions: an image is an (H, W) array; vector fields and deformation maps
are (H, W, 2) arrays whose last axis holds (x, y) = (column, row).  Pixel
(i, j) sits at continuous coordinate (j, i).  A deformation map stores
absolute target coordinates, so warping is ``(g . x)(p) = x(g(p))``.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


class GridError(ValueError):
    pass


def identity_map(h: int, w: int, dtype=np.float32) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    return np.stack([xs, ys], axis=-1)


def translation_map(h: int, w: int, dx: float, dy: float) -> np.ndarray:
    return identity_map(h, w) + np.array([dx, dy], dtype=np.float32)


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2 or img.size == 0:
        raise GridError(f"image must be a non-empty 2-D array, got shape {img.shape}")
    if np.any(img < 0) or np.any(img > 1):
        raise GridError("image intensities must lie in [0, 1]")
    return img


def check_map(g: np.ndarray, shape: tuple | None = None) -> np.ndarray:
    g = np.asarray(g)
    if g.ndim != 3 or g.shape[-1] != 2:
        raise GridError(f"deformation map must have shape (H, W, 2), got {g.shape}")
    if shape is not None and g.shape[:2] != tuple(shape):
        raise GridError(f"map shape {g.shape[:2]} does not match {tuple(shape)}")
    if not np.all(np.isfinite(g)):
        raise GridError("deformation map contains non-finite entries")
    return g


# ------------------------------------------------------------- tape-level helpers

def sample_tensor(img, coords, padding: str = "border") -> ad.Tensor:
    """Bilinear sample of an (H, W) or (C, H, W) tensor at (Ho, Wo, 2) coordinates."""
    img = ad.as_tensor(img)
    coords = ad.as_tensor(coords)
    squeeze = img.ndim == 2
    c = 1 if squeeze else img.shape[0]
    batched = img.reshape(1, c, img.shape[-2], img.shape[-1])
    out = ad.grid_sample(batched, coords.reshape(1, *coords.shape), padding=padding)
    ho, wo = coords.shape[:2]
    return out.reshape(ho, wo) if squeeze else out.reshape(c, ho, wo)


def field_to_channels(field) -> ad.Tensor:
    """(H, W, 2) -> (2, H, W)."""
    return ad.transpose(ad.as_tensor(field), (2, 0, 1))


def channels_to_field(chans) -> ad.Tensor:
    return ad.transpose(ad.as_tensor(chans), (1, 2, 0))


def compose_displacements(outer_disp, inner_map) -> ad.Tensor:
    """Displacement of ``outer o inner`` given the outer displacement and the inner map.

    ``(outer o inner)(p) = inner(p) + u_outer(inner(p))`` with ``u_outer`` read
    with zero padding outside the domain.
    """
    u = field_to_channels(outer_disp)
    sampled = channels_to_field(sample_tensor(u, inner_map, padding="zeros"))
    return sampled


# ------------------------------------------------------------- public numpy API

def sample_bilinear(img: np.ndarray, coords: np.ndarray, out_shape: tuple | None = None) -> np.ndarray:
    """Bilinear interpolation of ``img`` at ``coords`` with border replication."""
    img = np.asarray(img)
    if img.ndim != 2 or img.size == 0:
        raise GridError(f"image must be a non-empty 2-D array, got shape {img.shape}")
    coords = check_map(coords, out_shape)
    return sample_tensor(img, coords, padding="border").data


def warp_image(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """The group action ``g . x``: ``out(p) = x(g(p))``."""
    x = np.asarray(x)
    check_map(g, x.shape)
    return sample_bilinear(x, g)


def compose_maps(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """``outer o inner`` for absolute-coordinate maps of equal shape."""
    outer = check_map(outer)
    inner = check_map(inner, outer.shape[:2])
    h, w = outer.shape[:2]
    disp = outer - identity_map(h, w)
    return (ad.as_tensor(inner) + compose_displacements(disp, inner)).data


def threshold_mask(img: np.ndarray, tau: float = 0.5) -> np.ndarray:
    if not 0.0 < tau < 1.0:
        raise GridError(f"threshold must lie in (0, 1), got {tau}")
    return (np.asarray(img) >= tau).astype(np.uint8)


def warp_mask(mask: np.ndarray, g: np.ndarray, tau: float = 0.5) -> np.ndarray:
    """Warp a binary mask as a float image and re-binarise it."""
    return threshold_mask(warp_image(np.asarray(mask, dtype=np.float32), g), tau)
