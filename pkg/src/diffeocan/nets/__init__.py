"""Learned components and the genus oracle."""

from .genus import genus_oracle
from .layers import Conv2d, ConvTranspose2d, Linear, Module
from .models import Classifier, Discriminator, InnerModel, Segmenter, VaeNet, kl_divergence
from .siren import SirenNet, normalised_coords, siren_field, siren_velocity
from .train import (
    TrainConfig,
    TrainReport,
    adv_energy,
    adv_energy_tensor,
    critic_separation,
    train_discriminator,
    train_inner,
    train_vae,
    vae_energy,
    vae_energy_tensor,
)

__all__ = [
    "Classifier", "Conv2d", "ConvTranspose2d", "Discriminator", "InnerModel", "Linear",
    "Module", "Segmenter", "SirenNet", "TrainConfig", "TrainReport", "VaeNet",
    "adv_energy", "adv_energy_tensor", "critic_separation", "genus_oracle", "kl_divergence",
    "normalised_coords", "siren_field", "siren_velocity", "train_discriminator",
    "train_inner", "train_vae", "vae_energy", "vae_energy_tensor",
]
