"""The canonicalisation energy: similarity to the training set plus a deformation regulariser.

Every spatial reduction is a mean, so the weights transfer between grid sizes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .diffeo import Svf, choose_squaring_steps, exp_displacement, jacobian_det_tensor
from .grid import identity_map, sample_tensor
from .nets.train import adv_energy_tensor, vae_energy_tensor


class EnergyError(ValueError):
    pass


@dataclass(frozen=True)
class EnergyWeights:
    lambda_vae: float = 1e-5
    lambda_adv: float = 0.01
    lambda_grad: float = 1.0
    lambda_jac: float = 10.0

    def __post_init__(self):
        for k, val in asdict(self).items():
            if not val >= 0:
                raise EnergyError(f"{k} must be non-negative, got {val}")


SYNTHETIC_WEIGHTS = EnergyWeights(1e-5, 0.01, 1.0, 10.0)
MNIST_WEIGHTS = EnergyWeights(0.01, 0.01, 1.0, 10.0)


@dataclass(frozen=True)
class EnergyBreakdown:
    e_vae: float
    e_adv: float
    e_grad: float
    e_jac: float
    total: float

    @classmethod
    def assemble(cls, w: EnergyWeights, e_vae, e_adv, e_grad, e_jac) -> "EnergyBreakdown":
        total = (w.lambda_vae * e_vae + w.lambda_adv * e_adv
                 + w.lambda_grad * e_grad + w.lambda_jac * e_jac)
        return cls(float(e_vae), float(e_adv), float(e_grad), float(e_jac), float(total))

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in asdict(self).values())


@dataclass
class EnergyNets:
    """Trained energy models; either may be None when its weight is zero."""

    vae: object = None
    disc: object = None


# ------------------------------------------------------------------ tape-level terms

def _tapered_velocity(v) -> ad.Tensor:
    if isinstance(v, Svf):
        return ad.as_tensor(v.tapered())
    return ad.as_tensor(v)


def grad_term(v) -> ad.Tensor:
    """Mean over the grid of sum_c |forward difference of v_c|^2, per direction."""
    v = _tapered_velocity(v)
    dx = v[:, 1:] - v[:, :-1]
    dy = v[1:] - v[:-1]
    return ad.mean(ad.sum(ad.square(dx), axis=-1)) + ad.mean(ad.sum(ad.square(dy), axis=-1))


def jac_term(g) -> ad.Tensor:
    """Mean over pixels of max(0, -det J_g)."""
    return ad.mean(ad.maximum(-jacobian_det_tensor(g), 0.0))


def similarity_terms(x_warped, nets: EnergyNets, w: EnergyWeights) -> tuple:
    zero = ad.as_tensor(0.0)
    e_vae = zero
    e_adv = zero
    if w.lambda_vae > 0:
        if nets.vae is None:
            raise EnergyError("lambda_vae > 0 but no VAE supplied")
        e_vae = vae_energy_tensor(nets.vae, x_warped)
    if w.lambda_adv > 0:
        if nets.disc is None:
            raise EnergyError("lambda_adv > 0 but no discriminator supplied")
        e_adv = adv_energy_tensor(nets.disc, x_warped)
    return e_vae, e_adv


def e_can_tensor(x, v, nets: EnergyNets, w: EnergyWeights, n: int | None = None,
                 cap: int | None = None) -> tuple:
    """Total energy and its four terms on the tape; ``v`` is the tapered velocity tensor.

    Returns ``(total, (e_vae, e_adv, e_grad, e_jac), g)`` with ``g`` the map tensor.
    """
    v = _tapered_velocity(v)
    x = np.asarray(x, dtype=ad.get_dtype())
    if v.shape != x.shape + (2,):
        raise EnergyError(f"velocity {v.shape} does not match image {x.shape}")
    if n is None:
        n = choose_squaring_steps(v.data) if cap is None else choose_squaring_steps(v.data, cap)
    h, wd = x.shape
    g = exp_displacement(v, n) + identity_map(h, wd, dtype=v.data.dtype)
    xw = sample_tensor(x, g, padding="border")
    e_vae, e_adv = similarity_terms(xw, nets, w)
    e_grad = grad_term(v)
    e_jac = jac_term(g)
    total = (e_vae * w.lambda_vae + e_adv * w.lambda_adv
             + e_grad * w.lambda_grad + e_jac * w.lambda_jac)
    return total, (e_vae, e_adv, e_grad, e_jac), g


# ------------------------------------------------------------------ public API

def e_reg(v, g: np.ndarray, w: EnergyWeights | None = None) -> tuple:
    """(e_grad, e_jac) for a velocity field and its deformation map.

    ``w`` is accepted for signature symmetry; the weights are applied in the total.
    """
    vt = _tapered_velocity(v)
    g = np.asarray(g)
    if vt.shape != g.shape:
        raise EnergyError(f"velocity {vt.shape} and map {g.shape} differ in shape")
    return float(grad_term(vt).item()), float(jac_term(g).item())


def e_similarity(x_warped: np.ndarray, vae, disc, w: EnergyWeights) -> tuple:
    """(e_vae, e_adv); a term whose weight is zero is reported as 0."""
    e_vae, e_adv = similarity_terms(np.asarray(x_warped), EnergyNets(vae, disc), w)
    return float(e_vae.item()), float(e_adv.item())


def e_can(x: np.ndarray, v: Svf, nets: EnergyNets, w: EnergyWeights,
          n: int | None = None) -> EnergyBreakdown:
    _, parts, _ = e_can_tensor(x, v, nets, w, n)
    return EnergyBreakdown.assemble(w, *(float(p.item()) for p in parts))


def e_template(x_warped: np.ndarray, template: np.ndarray) -> float:
    """Mean squared error to a fixed template image."""
    a, b = np.asarray(x_warped, np.float64), np.asarray(template, np.float64)
    if a.shape != b.shape:
        raise EnergyError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


class TemplatePrior:
    """Net-free stand-in for the VAE: energy is the MSE to a fixed template."""

    def __init__(self, template: np.ndarray):
        self.template = np.asarray(template, dtype=np.float64)
        self.shape = self.template.shape

    def terms(self, x):
        x = ad.as_tensor(x)
        if x.shape[-2:] != self.shape:
            raise EnergyError(f"shape mismatch {x.shape[-2:]} vs {self.shape}")
        mse = ad.mean(ad.square(x - self.template.astype(x.data.dtype)))
        return mse.reshape(1), ad.as_tensor(np.zeros(1))
