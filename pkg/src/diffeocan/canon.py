"""Energy-minimising canonicalisation and the equivariant / invariant wrappers."""

from __future__ import annotations

import json
import logging
from contextlib import nullcontext
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .diffeo import MAX_SQUARING_STEPS, Svf, boundary_taper, choose_squaring_steps, exponentiate
from .energy import SYNTHETIC_WEIGHTS, EnergyBreakdown, EnergyNets, EnergyWeights, e_can_tensor
from .grid import check_image, identity_map, threshold_mask, warp_image
from .io import write_pfm, write_pgm
from .nets.models import InnerModel
from .nets.siren import SirenNet, siren_field

log = logging.getLogger(__name__)


class CanonError(RuntimeError):
    """Raised when the energy becomes non-finite; carries the offending breakdown."""

    def __init__(self, msg: str, breakdown: EnergyBreakdown | None = None):
        super().__init__(msg)
        self.breakdown = breakdown


@dataclass(frozen=True)
class CanonConfig:
    steps: int = 100
    lr: float = 1e-4
    weights: EnergyWeights = SYNTHETIC_WEIGHTS
    squaring_cap: int = MAX_SQUARING_STEPS
    seed: int = 0
    scale: float = 4.0
    widths: tuple = (2, 128, 128, 128, 2)
    omega0: float = 30.0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.scale <= 0:
            raise ValueError("velocity scale must be positive")


@dataclass
class CanonResult:
    g_forward: np.ndarray
    g_inverse: np.ndarray
    x_c: np.ndarray
    trace: list = field(default_factory=list)
    fell_back_to_identity: bool = False
    velocity: np.ndarray | None = None
    best_step: int = 0

    @property
    def initial(self) -> EnergyBreakdown:
        return self.trace[0]

    @property
    def best(self) -> EnergyBreakdown:
        return self.trace[self.best_step]


def _identity_result(x: np.ndarray, trace: list) -> CanonResult:
    h, w = x.shape
    ident = identity_map(h, w)
    return CanonResult(ident, ident.copy(), x.astype(np.float32).copy(), trace, True,
                       np.zeros((h, w, 2), np.float32), 0)


def canonicalise(x: np.ndarray, nets: EnergyNets, cfg: CanonConfig = CanonConfig()) -> CanonResult:
    """Minimise E_can over SIREN-parametrised velocity fields with Adam.

    The SIREN head starts at zero, so iterate 0 is the identity.  The lowest-energy
    iterate is kept; if none beats iterate 0 the identity is returned.
    """
    x = check_image(x).astype(ad.get_dtype())
    h, w = x.shape
    taper = boundary_taper(h, w)
    net = SirenNet(cfg.widths, cfg.omega0, seed=cfg.seed, zero_head=True)
    params = net.parameters()
    opt = ad.Adam(params, lr=cfg.lr)
    trace: list[EnergyBreakdown] = []
    best_total, best_v, best_step = np.inf, None, 0

    def evaluate(with_grad: bool):
        tape = ad.Tape() if with_grad else nullcontext()
        with tape:
            v = siren_field(net, (h, w), cfg.scale, taper)
            total, parts, _ = e_can_tensor(x, v, nets, cfg.weights, cap=cfg.squaring_cap)
        bd = EnergyBreakdown.assemble(cfg.weights, *(p.item() for p in parts))
        if not bd.is_finite():
            raise CanonError(f"non-finite energy at step {len(trace)}: {bd.to_json()}", bd)
        return tape, total, v, bd

    for step in range(cfg.steps + 1):
        tape, total, v, bd = evaluate(step < cfg.steps)
        trace.append(bd)
        if bd.total < best_total:
            best_total, best_v, best_step = bd.total, v.data.copy(), step
        if step < cfg.steps:
            opt.step(tape.gradient(total, params))

    if best_step == 0:
        return _identity_result(x, trace)
    svf = Svf(best_v, np.ones((h, w), np.float32))
    n = choose_squaring_steps(svf, cfg.squaring_cap)
    fwd = exponentiate(svf, n)
    inv = exponentiate(-svf, n)
    return CanonResult(fwd, inv, warp_image(x, fwd), trace, False, best_v, best_step)


def canonicalise_many(xs, nets: EnergyNets, cfg: CanonConfig = CanonConfig(), jobs: int = 1) -> list:
    """Independent canonicalisations, results in input order."""
    xs = list(xs)
    if jobs <= 1 or len(xs) <= 1:
        return [canonicalise(x, nets, cfg) for x in xs]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda x: canonicalise(x, nets, cfg), xs))


def reverse_segmentation(probs: np.ndarray, result: CanonResult, tau: float = 0.5) -> np.ndarray:
    """``g_x^-1`` applied to a probability map, then thresholded."""
    return threshold_mask(warp_image(np.asarray(probs, np.float32), result.g_inverse), tau)


def equivariant_segment(x: np.ndarray, inner: InnerModel, nets: EnergyNets,
                        cfg: CanonConfig = CanonConfig(), return_result: bool = False):
    """``g_x^-1 . f(g_x . x)`` for a segmenter ``f``."""
    if inner.kind != "segmenter":
        raise ValueError("equivariant_segment needs a segmenter")
    res = canonicalise(x, nets, cfg)
    mask = reverse_segmentation(inner(res.x_c), res)
    return (mask, res) if return_result else mask


def invariant_classify(x: np.ndarray, inner: InnerModel, nets: EnergyNets,
                       cfg: CanonConfig = CanonConfig(), return_result: bool = False):
    """``argmax f(g_x . x)``; ties go to the lowest class id."""
    if inner.kind != "classifier":
        raise ValueError("invariant_classify needs a classifier")
    res = canonicalise(x, nets, cfg)
    label = inner.predict_class(res.x_c)
    return (label, res) if return_result else label


def write_artefacts(result: CanonResult, out_dir, stem: str) -> dict:
    """x_c as PGM, forward/inverse maps as PFM, trace as JSON lines."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "x_c": out / f"{stem}_xc.pgm",
        "forward": out / f"{stem}_forward.pfm",
        "inverse": out / f"{stem}_inverse.pfm",
        "trace": out / f"{stem}_trace.jsonl",
    }
    write_pgm(paths["x_c"], result.x_c)
    write_pfm(paths["forward"], result.g_forward)
    write_pfm(paths["inverse"], result.g_inverse)
    lines = [json.dumps(dict(step=i, **bd.as_dict()), sort_keys=True) for i, bd in enumerate(result.trace)]
    paths["trace"].write_text("\n".join(lines) + "\n")
    return {k: str(p) for k, p in paths.items()}
