"""Datasets: nested squares, random RBF warps, MNIST ingestion and manifests."""

from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .diffeo import jacobian_determinant
from .grid import identity_map, warp_image, warp_mask
from .io import FormatError, read_mask_pgm, read_pgm, write_pgm
from .nets.genus import genus_oracle

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MAX_GENUS_CLASS = 2


class DataError(ValueError):
    pass


# ------------------------------------------------------------------ containers

@dataclass
class Sample:
    """One image with its label: a mask (segmentation) or an int class (classification)."""

    id: str
    image: np.ndarray
    label: object
    provenance: str = "canonical"
    seed: int | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def parts(self):
        return (("train", self.train), ("val", self.val), ("test", self.test))

    def __post_init__(self):
        seen = set()
        for _, part in self.parts():
            for s in part:
                if s.id in seen:
                    raise DataError(f"sample id {s.id!r} appears in more than one split")
                seen.add(s.id)


def images(samples) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32)


def labels(samples) -> np.ndarray:
    return np.stack([np.asarray(s.label) for s in samples])


# ------------------------------------------------------------------ nested squares

INTENSITY_RANGES = ((0.05, 0.25), (0.40, 0.60), (0.75, 0.95))


@dataclass(frozen=True)
class SquaresConfig:
    shape: tuple = (64, 64)
    outer_size: tuple = (28, 44)
    inner_size: tuple = (10, 20)
    gap: int = 4
    margin: int = 6
    noise_sigma: float = 0.05
    # shuffle which disjoint range goes to background / outer / inner
    permute_intensities: bool = False


@dataclass
class SquaresSample(Sample):
    params: dict = field(default_factory=dict)

    @property
    def mask(self) -> np.ndarray:
        return self.label


def _check_squares_config(cfg: SquaresConfig) -> None:
    h, w = cfg.shape
    lo_o, hi_o = cfg.outer_size
    lo_i, hi_i = cfg.inner_size
    if cfg.margin < 3:
        raise DataError("margin must be at least the taper width (3 px)")
    if not (0 < lo_o <= hi_o and 0 < lo_i <= hi_i):
        raise DataError("square size ranges must be positive and ordered")
    if hi_o + 2 * cfg.margin > min(h, w):
        raise DataError(f"outer square of side {hi_o} does not fit {cfg.shape} with margin {cfg.margin}")
    if hi_i + 2 * cfg.gap > lo_o:
        raise DataError("inner square must fit strictly inside the smallest outer square")
    if cfg.noise_sigma < 0:
        raise DataError("noise sigma must be non-negative")


def draw_square(rng: np.random.Generator, cfg: SquaresConfig, sid: str, seed: int) -> SquaresSample:
    h, w = cfg.shape
    so = int(rng.integers(cfg.outer_size[0], cfg.outer_size[1] + 1))
    si = int(rng.integers(cfg.inner_size[0], cfg.inner_size[1] + 1))
    oy = int(rng.integers(cfg.margin, h - cfg.margin - so + 1))
    ox = int(rng.integers(cfg.margin, w - cfg.margin - so + 1))
    iy = int(rng.integers(oy + cfg.gap, oy + so - cfg.gap - si + 1))
    ix = int(rng.integers(ox + cfg.gap, ox + so - cfg.gap - si + 1))
    order = rng.permutation(3) if cfg.permute_intensities else np.arange(3)
    levels = [float(rng.uniform(*INTENSITY_RANGES[k])) for k in order]
    img = np.full((h, w), levels[0])
    img[oy:oy + so, ox:ox + so] = levels[1]
    img[iy:iy + si, ix:ix + si] = levels[2]
    mask = np.zeros((h, w), np.uint8)
    mask[iy:iy + si, ix:ix + si] = 1
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    params = dict(outer=(oy, ox, so), inner=(iy, ix, si), intensities=levels,
                  noise_sigma=cfg.noise_sigma)
    return SquaresSample(sid, img, mask, "canonical", seed, params=params)


def gen_squares(n: int, cfg: SquaresConfig = SquaresConfig(), seed: int = 0,
                prefix: str = "sq") -> list:
    """``n`` nested-square images; sample ``k`` depends only on (seed, k, cfg)."""
    if n < 1:
        raise DataError("need at least one sample")
    _check_squares_config(cfg)
    out = []
    for k in range(n):
        rng = np.random.default_rng([seed, k])
        out.append(draw_square(rng, cfg, f"{prefix}{k:05d}", seed))
    return out


def squares_split(n_train: int = 200, n_val: int = 50, n_test: int = 100,
                  cfg: SquaresConfig = SquaresConfig(), seed: int = 0) -> DatasetSplit:
    parts = {}
    for i, (name, n) in enumerate((("train", n_train), ("val", n_val), ("test", n_test))):
        parts[name] = gen_squares(n, cfg, seed * 3 + i, prefix=f"sq-{name}-") if n else []
    return DatasetSplit(**parts)


# ------------------------------------------------------------------ RBF warps

@dataclass(frozen=True)
class RbfConfig:
    spacing: float = 16.0
    bandwidth: float = 8.0
    max_displacement: float = 6.0
    seed: int = 0
    min_det: float = 0.05
    max_attempts: int = 50
    inverse_iterations: int = 20
    taper_margin: float = 16.0
    inverse_tol: float = 0.05

    def __post_init__(self):
        if self.spacing <= 0 or self.bandwidth <= 0:
            raise DataError("RBF spacing and bandwidth must be positive")
        if not 0 <= self.max_displacement < self.spacing / 2:
            raise DataError("max displacement must lie in [0, spacing / 2)")
        if self.taper_margin <= 0:
            raise DataError("taper margin must be positive")


def control_points(shape: tuple, spacing: float) -> np.ndarray:
    """Cell-centred control grid, (K, 2) in (x, y)."""
    h, w = shape
    ys = np.arange(spacing / 2, h, spacing) - 0.5
    xs = np.arange(spacing / 2, w, spacing) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=-1)


_EDGE_NORMALS = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])


def rbf_displacement(pts: np.ndarray, centres: np.ndarray, weights: np.ndarray,
                     cfg: "RbfConfig", shape: tuple) -> tuple:
    """Tapered RBF displacement u at arbitrary points (..., 2) and its Jacobian du_i/dp_j."""
    h, w = shape
    b2 = cfg.bandwidth ** 2
    diff = pts[..., None, :] - centres
    phi = np.exp(-np.sum(diff ** 2, axis=-1) / (2.0 * b2))
    u = phi @ weights
    du = np.einsum("...kj,ki->...ij", -(phi[..., None] * diff) / b2, weights)
    x, y = pts[..., 0], pts[..., 1]
    dist = np.stack([x, y, w - 1 - x, h - 1 - y], axis=-1)
    side = np.argmin(dist, axis=-1)
    e = np.take_along_axis(dist, side[..., None], axis=-1)[..., 0]
    t = np.clip(e / cfg.taper_margin, 0.0, 1.0)
    s = 0.5 * (1.0 - np.cos(np.pi * t))
    inside = (e > 0) & (e < cfg.taper_margin)
    ds = np.where(inside, 0.5 * np.pi / cfg.taper_margin * np.sin(np.pi * t), 0.0)
    ds_dp = ds[..., None] * _EDGE_NORMALS[side]
    jac = du * s[..., None, None] + u[..., :, None] * ds_dp[..., None, :]
    return u * s[..., None], jac


def _draw_weights(rng: np.random.Generator, k: int, m: float) -> np.ndarray:
    wts = rng.uniform(-m, m, size=(k, 2))
    norm = np.linalg.norm(wts, axis=-1, keepdims=True)
    return wts * np.minimum(1.0, m / np.maximum(norm, 1e-12))


def rbf_maps(weights: np.ndarray, cfg: RbfConfig, shape: tuple, inverse: bool = True) -> tuple:
    """Forward map, fixed-point inverse, and the inverse residual in pixels.

    The inverse solves ``q + u(q) = p`` by Newton iteration with the analytic
    Jacobian; the plain iteration ``q <- p - u(q)`` diverges once |du| > 1.
    """
    h, w = shape
    centres = control_points(shape, cfg.spacing)
    ident = identity_map(h, w).astype(np.float64)
    u, _ = rbf_displacement(ident, centres, weights, cfg, shape)
    fwd = ident + u
    if not inverse:
        return fwd.astype(np.float32), None, 0.0
    inv = ident - u
    eye = np.eye(2)
    for _ in range(cfg.inverse_iterations):
        uq, jac = rbf_displacement(inv, centres, weights, cfg, shape)
        r = inv + uq - ident
        inv = inv - np.linalg.solve(jac + eye, r[..., None])[..., 0]
    uq, _ = rbf_displacement(inv, centres, weights, cfg, shape)
    residual = float(np.max(np.abs(inv + uq - ident)))
    return fwd.astype(np.float32), inv.astype(np.float32), residual


def sample_rbf_diffeo(cfg: RbfConfig, shape: tuple, rng: np.random.Generator | None = None,
                      inverse: bool = True) -> tuple:
    """Random orientation-preserving warp: (forward, inverse) maps.

    Resamples up to ``cfg.max_attempts`` times until min det J >= ``cfg.min_det``
    and the numeric inverse has converged.  ``inverse=False`` skips the inverse
    (returned as None).
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    k = len(control_points(shape, cfg.spacing))
    for _ in range(cfg.max_attempts):
        wts = _draw_weights(rng, k, cfg.max_displacement)
        fwd, inv, residual = rbf_maps(wts, cfg, shape, inverse)
        if residual <= cfg.inverse_tol and float(jacobian_determinant(fwd).min()) >= cfg.min_det:
            return fwd, inv
    raise DataError(f"no orientation-preserving RBF warp after {cfg.max_attempts} attempts")


def warp_sample(s: Sample, fwd: np.ndarray, seed: int | None = None) -> Sample:
    img = np.clip(warp_image(s.image, fwd), 0.0, 1.0).astype(np.float32)
    if isinstance(s.label, np.ndarray) and s.label.ndim == 2:
        lab = warp_mask(s.label, fwd)
    else:
        # genus is a topological invariant, so class labels carry over unchanged
        lab = s.label
    meta = dict(s.meta, source_id=s.id)
    return Sample(s.id + "-t", img, lab, "transformed", seed, meta)


def make_transformed_set(src: DatasetSplit | list, cfg: RbfConfig, keep_maps: bool = False):
    """Warp every image and its label with one sampled map per sample.

    Sample ``k`` of split part ``p`` uses the generator seeded by (cfg.seed, p, k).
    With ``keep_maps`` the forward/inverse maps are stored in ``meta``.
    """
    def run(part, samples):
        out = []
        for k, s in enumerate(samples):
            rng = np.random.default_rng([cfg.seed, part, k])
            fwd, inv = sample_rbf_diffeo(cfg, s.image.shape, rng)
            t = warp_sample(s, fwd, cfg.seed)
            if keep_maps:
                t.meta["forward"], t.meta["inverse"] = fwd, inv
            out.append(t)
        return out

    if isinstance(src, DatasetSplit):
        if not any(part for _, part in src.parts()):
            raise DataError("source split is empty")
        return DatasetSplit(*(run(i, part) for i, (_, part) in enumerate(src.parts())))
    if not src:
        raise DataError("source set is empty")
    return run(0, src)


# ------------------------------------------------------------------ MNIST IDX

def _open_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError("IDX file truncated before magic number")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"bad IDX magic: expected 0x{expected_magic:08x}, found 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError("IDX file truncated in dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = 1
    for d in dims:
        count *= d
        if count > 2 ** 31:
            raise FormatError(f"IDX dimensions {dims} overflow")
    if len(raw) - head < count:
        raise FormatError(f"IDX payload truncated: need {count} bytes, found {len(raw) - head}")
    return np.frombuffer(raw, np.uint8, count, head).reshape(dims)


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(f">I{arr.ndim}I", magic, *arr.shape))
        fh.write(arr.tobytes())


def genus_class(img: np.ndarray, tau: float = 0.5) -> int:
    return min(genus_oracle(img >= tau), MAX_GENUS_CLASS)


def load_mnist_idx(images_path, labels_path, limit: int | None = None,
                   prefix: str = "mnist") -> DatasetSplit:
    """All samples go to ``train``; labels are genus classes {0, 1, 2+}, digits kept in meta."""
    imgs = parse_idx(_open_bytes(images_path), IMAGE_MAGIC)
    digits = parse_idx(_open_bytes(labels_path), LABEL_MAGIC)
    if imgs.ndim != 3 or digits.ndim != 1:
        raise FormatError("expected a rank-3 image file and a rank-1 label file")
    if len(imgs) != len(digits):
        raise FormatError(f"{len(imgs)} images but {len(digits)} labels")
    n = len(imgs) if limit is None else min(limit, len(imgs))
    out = []
    for k in range(n):
        x = imgs[k].astype(np.float32) / 255.0
        out.append(Sample(f"{prefix}{k:05d}", x, genus_class(x), "canonical", None,
                          {"digit": int(digits[k])}))
    return DatasetSplit(train=out)


def partition(samples: list, sizes: dict, seed: int = 0) -> DatasetSplit:
    """Deterministically shuffle and cut ``samples`` into named parts."""
    need = sum(sizes.values())
    if need > len(samples):
        raise DataError(f"requested {need} samples, only {len(samples)} available")
    order = np.random.default_rng(seed).permutation(len(samples))
    parts, start = {}, 0
    for name in ("train", "val", "test"):
        n = sizes.get(name, 0)
        parts[name] = [samples[i] for i in order[start:start + n]]
        start += n
    return DatasetSplit(**parts)


# ------------------------------------------------------------------ manifests

def write_manifest(split: DatasetSplit, root, name: str = "manifest.jsonl") -> Path:
    """Write images (and mask labels) as PGM under ``root`` plus a JSON-lines manifest."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for part, samples in split.parts():
        for s in samples:
            img_rel = f"images/{s.id}.pgm"
            write_pgm(root / img_rel, s.image)
            if isinstance(s.label, np.ndarray):
                (root / "labels").mkdir(exist_ok=True)
                lab = f"labels/{s.id}.pgm"
                write_pgm(root / lab, s.label.astype(np.float32))
            else:
                lab = int(s.label)
            rec = {"id": s.id, "image_path": img_rel, "label_path_or_class": lab,
                   "split": part, "provenance": s.provenance, "seed": s.seed}
            lines.append(json.dumps(rec, sort_keys=True))
    path = root / name
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


def read_manifest(path) -> DatasetSplit:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    parts = {"train": [], "val": [], "test": []}
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            img = read_pgm(root / rec["image_path"])
            lab = rec["label_path_or_class"]
            lab = read_mask_pgm(root / lab) if isinstance(lab, str) else int(lab)
            parts[rec["split"]].append(Sample(rec["id"], img, lab, rec["provenance"], rec["seed"]))
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}:{ln}: bad manifest record ({exc})") from exc
    return DatasetSplit(**parts)


def relabel(samples: list, provenance: str) -> list:
    return [replace(s, provenance=provenance) for s in samples]


def mnist_paths_from_env() -> tuple | None:
    """(images, labels) from ``DIFFEOCAN_MNIST_DIR`` if that directory holds IDX files."""
    d = os.environ.get("DIFFEOCAN_MNIST_DIR")
    if not d:
        return None
    for stem in ("train", "t10k"):
        for ext in ("", ".gz"):
            imgs = Path(d) / f"{stem}-images-idx3-ubyte{ext}"
            labs = Path(d) / f"{stem}-labels-idx1-ubyte{ext}"
            if imgs.exists() and labs.exists():
                return imgs, labs
    return None
