"""Training loops for the VAE, the critic and the inner task models."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .. import autodiff as ad
from ..grid import translation_map, warp_image
from .models import Classifier, Discriminator, InnerModel, Segmenter, VaeNet, as_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 1
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    flags: list = field(default_factory=list)


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch):
        yield order[start:start + batch]


def _fit(params, loss_fn, n: int, cfg: TrainConfig, rng: np.random.Generator, report: TrainReport):
    opt = ad.Adam(params, lr=cfg.lr)
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in _batches(n, cfg.batch_size, rng):
            with ad.Tape() as tape:
                loss = loss_fn(idx)
            grads = tape.gradient(loss, params)
            opt.step(grads)
            total += loss.item() * len(idx)
        report.losses.append(total / n)
        log.debug("epoch %d loss %.6g", epoch, report.losses[-1])


def _as_array(data) -> np.ndarray:
    x = np.asarray(data, dtype=ad.get_dtype())
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or len(x) == 0:
        raise ValueError("need a non-empty stack of (H, W) images")
    return x


# ------------------------------------------------------------------ VAE

def vae_energy_tensor(net: VaeNet, x) -> ad.Tensor:
    """Scalar VAE energy on the tape (mean latent, no sampling)."""
    mse, kl = net.terms(x)
    return ad.sum(mse + kl * getattr(net, "kl_weight", 1.0))


def vae_energy(net: VaeNet, x) -> float:
    """Reconstruction MSE plus the KL to the prior weighted as in training.

    Decodes the mean latent, so the value is deterministic.
    """
    x = np.asarray(x)
    if x.shape != net.shape:
        raise ValueError(f"VAE expects {net.shape} images, got {x.shape}")
    return float(vae_energy_tensor(net, x).item())


def train_vae(data, cfg: TrainConfig = TrainConfig(lr=5e-5, batch_size=1, epochs=50),
              latent_dim: int = 10, kl_weight: float = 1e-3, report: TrainReport | None = None) -> VaeNet:
    x = _as_array(data)
    report = TrainReport() if report is None else report
    rng = np.random.default_rng(cfg.seed)
    net = VaeNet(x.shape[1:], latent_dim=latent_dim, kl_weight=kl_weight, seed=cfg.seed)

    def loss_fn(idx):
        noise = rng.standard_normal((len(idx), latent_dim)).astype(x.dtype)
        return net.loss(x[idx], noise)

    _fit(net.parameters(), loss_fn, len(x), cfg, rng, report)
    return net


# ------------------------------------------------------------------ critic

def adv_energy_tensor(net: Discriminator, x) -> ad.Tensor:
    return -ad.sum(net(x))


def adv_energy(net: Discriminator, x) -> float:
    """Negative critic score: low for images that look like the training set."""
    x = np.asarray(x)
    if x.shape != net.shape:
        raise ValueError(f"critic expects {net.shape} images, got {x.shape}")
    return float(adv_energy_tensor(net, x).item())


def _warp_batch(x: np.ndarray, sampler, rng) -> np.ndarray:
    return np.stack([warp_image(img, sampler(rng)) for img in x]).astype(x.dtype)


def train_discriminator(real, deform_sampler, cfg: TrainConfig = TrainConfig(lr=1e-4, batch_size=16, epochs=50),
                        mu: float = 10.0, fd_step: float = 0.05, real_jitter: float = 0.5,
                        report: TrainReport | None = None) -> Discriminator:
    """Wasserstein-style critic: real = ``real``, fake = ``real`` warped on the fly.

    ``deform_sampler`` is an RbfConfig or a callable ``rng -> map``.

    Gradient penalty without second-order gradients: at a random real-fake
    interpolate a first backward pass gives the input gradient direction ``u``;
    the central difference of the score along the fixed ``u`` equals ``|grad f|``
    and has the same parameter gradient up to O(fd_step^2).

    Real images are resampled under a random shift of at most ``real_jitter`` px
    so both classes carry the same interpolation blur; otherwise the critic learns
    to spot smoothed noise instead of geometry.
    """
    x = _as_array(real)
    report = TrainReport() if report is None else report
    if mu < 0:
        raise ValueError("gradient penalty weight must be non-negative")
    if not 0 <= real_jitter <= 1:
        raise ValueError("real_jitter must lie in [0, 1]")
    if mu == 0:
        report.flags.append("gradient penalty disabled (mu=0)")
        log.warning("training critic without gradient penalty")
    sampler = _as_sampler(deform_sampler, x.shape[1:])
    rng = np.random.default_rng(cfg.seed)
    net = Discriminator(x.shape[1:], seed=cfg.seed)

    def jitter(rng_):
        h, w = x.shape[1:]
        return translation_map(h, w, *rng_.uniform(-real_jitter, real_jitter, 2))

    def loss_fn(idx):
        r = x[idx]
        f = _warp_batch(r, sampler, rng)
        if real_jitter > 0:
            r = _warp_batch(r, jitter, rng)
        loss = ad.mean(net(f)) - ad.mean(net(r))
        if mu > 0:
            eps = rng.uniform(size=(len(idx), 1, 1)).astype(x.dtype)
            mid = eps * r + (1 - eps) * f
            u = _unit_input_gradient(net, mid)
            slope = (net(mid + fd_step * u) - net(mid - fd_step * u)) * (1.0 / (2 * fd_step))
            loss = loss + ad.mean(ad.square(slope - 1.0)) * mu
        return loss

    _fit(net.parameters(), loss_fn, len(x), cfg, rng, report)
    return net


def _unit_input_gradient(net: Discriminator, x: np.ndarray) -> np.ndarray:
    """Per-sample ``grad_x f / |grad_x f|`` on its own tape; a constant for the caller."""
    xin = ad.Tensor(x, requires_grad=True)
    with ad.Tape() as tape:
        score = ad.sum(net(xin))
    (g,) = tape.gradient(score, [xin])
    norm = np.linalg.norm(g.reshape(len(x), -1), axis=1)
    return (g / np.maximum(norm, 1e-12)[:, None, None]).astype(x.dtype)


def _as_sampler(deform_sampler, shape):
    if callable(deform_sampler):
        return deform_sampler
    from ..data import sample_rbf_diffeo

    return lambda rng: sample_rbf_diffeo(deform_sampler, shape, rng, inverse=False)[0]


def critic_separation(net: Discriminator, real, deform_sampler, seed: int = 0) -> float:
    """Mean score on ``real`` minus mean score on warped copies."""
    x = _as_array(real)
    rng = np.random.default_rng(seed)
    fake = _warp_batch(x, _as_sampler(deform_sampler, x.shape[1:]), rng)
    return float(net(x).data.mean() - net(fake).data.mean())


# ------------------------------------------------------------------ inner models

def log_softmax(logits: ad.Tensor) -> ad.Tensor:
    # the shift is a constant, so it contributes no gradient
    shift = logits.data.max(axis=-1, keepdims=True)
    z = logits - shift
    return z - ad.log(ad.sum(ad.exp(z), axis=-1, keepdims=True))


def cross_entropy(logits: ad.Tensor, y: np.ndarray) -> ad.Tensor:
    onehot = np.eye(logits.shape[-1], dtype=logits.data.dtype)[np.asarray(y, dtype=int)]
    return -ad.mean(ad.sum(log_softmax(logits) * onehot, axis=-1))


def bce_with_logits(logits: ad.Tensor, target: np.ndarray) -> ad.Tensor:
    """Mean of softplus(z) - t z, written stably as relu(z) - t z + log(1 + exp(-|z|))."""
    z = logits
    absz = ad.relu(z) + ad.relu(-z)
    return ad.mean(ad.relu(z) - z * target + ad.log(ad.exp(-absz) + 1.0))


def train_inner(data, labels_, cfg: TrainConfig = TrainConfig(lr=5e-5, batch_size=2, epochs=10),
                kind: str = "segmenter", n_classes: int = 3, report: TrainReport | None = None) -> InnerModel:
    x = _as_array(data)
    y = np.asarray(labels_)
    report = TrainReport() if report is None else report
    if len(y) != len(x):
        raise ValueError(f"{len(x)} images but {len(y)} labels")
    rng = np.random.default_rng(cfg.seed)
    if kind == "segmenter":
        if y.shape != x.shape:
            raise ValueError("segmenter needs one mask per image with the image's shape")
        net = Segmenter(seed=cfg.seed)
        yt = y.astype(x.dtype)[:, None]

        def loss_fn(idx):
            return bce_with_logits(net(x[idx]), yt[idx])
    elif kind == "classifier":
        if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
            raise ValueError("classifier needs one integer class id per image")
        if y.min() < 0 or y.max() >= n_classes:
            raise ValueError(f"class ids must lie in [0, {n_classes})")
        net = Classifier(x.shape[1:], n_classes=n_classes, seed=cfg.seed)

        def loss_fn(idx):
            return cross_entropy(net(x[idx]), y[idx])
    else:
        raise ValueError(f"unknown inner model kind {kind!r}")
    _fit(net.parameters(), loss_fn, len(x), cfg, rng, report)
    return InnerModel(kind, net)


def predict_batched(model: InnerModel, x, batch: int = 32) -> np.ndarray:
    x = _as_array(x)
    outs = []
    for s in range(0, len(x), batch):
        out = model.net(as_batch(x[s:s + batch])).data
        outs.append(out)
    out = np.concatenate(outs)
    if model.kind == "segmenter":
        return expit(out[:, 0])
    return out
