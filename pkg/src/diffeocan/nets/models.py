"""Convolutional models: VAE, adversarial critic, and the inner task networks."""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from .layers import Conv2d, ConvTranspose2d, Linear, Module


def pyramid_levels(size: int, max_levels: int = 3, min_size: int = 7) -> int:
    """Number of stride-2 halvings that keep ``size`` even and >= ``min_size``."""
    levels = 0
    while levels < max_levels and size % 2 == 0 and size // 2 >= min_size:
        size //= 2
        levels += 1
    return levels


def as_batch(x) -> ad.Tensor:
    """(H, W) or (N, H, W) or (N, 1, H, W) -> (N, 1, H, W) tensor."""
    x = ad.as_tensor(x)
    if x.ndim == 2:
        return x.reshape(1, 1, *x.shape)
    if x.ndim == 3:
        return x.reshape(x.shape[0], 1, x.shape[1], x.shape[2])
    return x


def kl_divergence(mu, logvar) -> ad.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over the last axis."""
    mu, logvar = ad.as_tensor(mu), ad.as_tensor(logvar)
    terms = ad.square(mu) + ad.exp(logvar) - 1.0 - logvar
    return ad.sum(terms, axis=-1) * 0.5


class VaeNet(Module):
    """Conv encoder to a Gaussian latent, transposed-conv decoder to image logits."""

    def __init__(self, shape=(64, 64), latent_dim: int = 10, channels=(16, 32, 32),
                 kl_weight: float = 1e-3, seed: int = 0):
        rng = np.random.default_rng(seed)
        h, w = shape
        levels = min(pyramid_levels(h), pyramid_levels(w), len(channels))
        chans = tuple(channels[:levels])
        self.shape = (h, w)
        self.latent_dim = latent_dim
        self.kl_weight = kl_weight
        self.bottom = (chans[-1], h >> levels, w >> levels)
        flat = int(np.prod(self.bottom))
        c_prev = 1
        self.enc = []
        for c in chans:
            self.enc.append(Conv2d(c_prev, c, 4, rng, stride=2, padding=1))
            c_prev = c
        self.mu_head = Linear(flat, latent_dim, rng)
        self.logvar_head = Linear(flat, latent_dim, rng)
        self.dec_in = Linear(latent_dim, flat, rng)
        self.dec = []
        rev = list(chans[::-1][1:]) + [1]
        for c in rev:
            self.dec.append(ConvTranspose2d(c_prev, c, rng))
            c_prev = c

    def encode(self, x):
        h = as_batch(x)
        if h.shape[-2:] != self.shape:
            raise ValueError(f"VAE expects {self.shape} images, got {h.shape[-2:]}")
        for conv in self.enc:
            h = ad.leaky_relu(conv(h))
        h = h.reshape(h.shape[0], -1)
        return self.mu_head(h), self.logvar_head(h)

    def decode(self, z) -> ad.Tensor:
        z = ad.as_tensor(z)
        h = ad.leaky_relu(self.dec_in(z)).reshape(z.shape[0], *self.bottom)
        for i, deconv in enumerate(self.dec):
            h = deconv(h)
            if i < len(self.dec) - 1:
                h = ad.leaky_relu(h)
        return h

    def terms(self, x, noise: np.ndarray | None = None):
        """Per-sample (reconstruction MSE, KL).  ``noise=None`` decodes the mean latent."""
        xb = as_batch(x)
        mu, logvar = self.encode(xb)
        z = mu if noise is None else mu + ad.exp(logvar * 0.5) * noise
        recon = ad.sigmoid(self.decode(z))
        n = xb.shape[0]
        mse = ad.mean(ad.square(recon - xb).reshape(n, -1), axis=1)
        return mse, kl_divergence(mu, logvar)

    def loss(self, x, noise: np.ndarray | None = None) -> ad.Tensor:
        mse, kl = self.terms(x, noise)
        return ad.mean(mse + kl * self.kl_weight)


class Discriminator(Module):
    """Strided conv stack to a scalar score; trained to score real images high."""

    def __init__(self, shape=(64, 64), channels=(16, 32, 64), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.shape = tuple(shape)
        self.convs = []
        c_prev, h, w = 1, shape[0], shape[1]
        for c in channels:
            self.convs.append(Conv2d(c_prev, c, 4, rng, stride=2, padding=1))
            c_prev, h, w = c, (h + 2 - 4) // 2 + 1, (w + 2 - 4) // 2 + 1
        self.head = Linear(c_prev * h * w, 1, rng)

    def __call__(self, x) -> ad.Tensor:
        h = as_batch(x)
        for conv in self.convs:
            h = ad.leaky_relu(conv(h))
        return self.head(h.reshape(h.shape[0], -1)).reshape(-1)


class Segmenter(Module):
    """Three-resolution encoder-decoder with skip connections; emits logits."""

    def __init__(self, channels=(16, 32, 64), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.channels = tuple(channels)
        c1, c2, c3 = channels
        self.enc1a = Conv2d(1, c1, 3, rng)
        self.enc1b = Conv2d(c1, c1, 3, rng)
        self.down1 = Conv2d(c1, c2, 4, rng, stride=2, padding=1)
        self.enc2 = Conv2d(c2, c2, 3, rng)
        self.down2 = Conv2d(c2, c3, 4, rng, stride=2, padding=1)
        self.mid = Conv2d(c3, c3, 3, rng)
        self.up2 = ConvTranspose2d(c3, c2, rng)
        self.dec2 = Conv2d(2 * c2, c2, 3, rng)
        self.up1 = ConvTranspose2d(c2, c1, rng)
        self.dec1 = Conv2d(2 * c1, c1, 3, rng)
        self.out = Conv2d(c1, 1, 3, rng)

    def __call__(self, x) -> ad.Tensor:
        act = ad.leaky_relu
        x = as_batch(x)
        e1 = act(self.enc1b(act(self.enc1a(x))))
        e2 = act(self.enc2(act(self.down1(e1))))
        m = act(self.mid(act(self.down2(e2))))
        d2 = act(self.dec2(ad.concat([act(self.up2(m)), e2], axis=1)))
        d1 = act(self.dec1(ad.concat([act(self.up1(d2)), e1], axis=1)))
        return self.out(d1)


class Classifier(Module):
    """Conv stack to class logits."""

    def __init__(self, shape=(28, 28), n_classes: int = 3, channels=(16, 32, 64), seed: int = 0):
        rng = np.random.default_rng(seed)
        c1, c2, c3 = channels
        self.n_classes = n_classes
        self.conv1 = Conv2d(1, c1, 3, rng)
        self.conv2 = Conv2d(c1, c2, 4, rng, stride=2, padding=1)
        self.conv3 = Conv2d(c2, c3, 4, rng, stride=2, padding=1)
        h, w = shape[0] // 4, shape[1] // 4
        self.head = Linear(c3 * h * w, n_classes, rng)

    def __call__(self, x) -> ad.Tensor:
        act = ad.leaky_relu
        h = act(self.conv3(act(self.conv2(act(self.conv1(as_batch(x)))))))
        return self.head(h.reshape(h.shape[0], -1))


class InnerModel:
    """The task network ``f``: a segmenter (per-pixel probabilities) or a classifier (logits)."""

    def __init__(self, kind: str, net: Module):
        if kind not in ("segmenter", "classifier"):
            raise ValueError(f"unknown inner model kind {kind!r}")
        self.kind = kind
        self.net = net

    def __call__(self, x) -> np.ndarray:
        out = self.net(x)
        if self.kind == "segmenter":
            probs = ad.sigmoid(out).data
            return probs[:, 0] if probs.shape[0] > 1 else probs[0, 0]
        return out.data if out.shape[0] > 1 else out.data[0]

    def predict_mask(self, x, tau: float = 0.5) -> np.ndarray:
        return (self(x) >= tau).astype(np.uint8)

    def predict_class(self, x) -> int:
        # argmax returns the first maximal index, so ties go to the lowest class id
        return int(np.argmax(self(x)))
