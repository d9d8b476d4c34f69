import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffeocan.diffeo import Svf, exponentiate, smooth_random_svf
from diffeocan.energy import (
    SYNTHETIC_WEIGHTS,
    EnergyBreakdown,
    EnergyError,
    EnergyNets,
    EnergyWeights,
    TemplatePrior,
    e_can,
    e_reg,
    e_similarity,
    e_template,
)
from diffeocan.grid import identity_map
from diffeocan.nets import Discriminator, VaeNet, adv_energy, vae_energy


@pytest.fixture(scope="module")
def small_nets():
    return EnergyNets(VaeNet((32, 32), latent_dim=4, channels=(4, 8), seed=1),
                      Discriminator((32, 32), channels=(4, 8), seed=2))


@pytest.fixture(scope="module")
def image():
    return np.random.default_rng(0).uniform(size=(32, 32)).astype(np.float32)


def test_zero_field_has_zero_regulariser():
    v = Svf.zeros(16, 16)
    assert e_reg(v, exponentiate(v)) == (0.0, 0.0)


def test_constant_field_only_taper_ring_contributes():
    h = w = 64
    v = Svf(np.tile(np.array([1.0, -0.5], np.float32), (h, w, 1)))
    e_grad, e_jac = e_reg(v, exponentiate(v))
    # oracle: the ring's forward differences, computed directly from the taper
    t = v.taper.astype(np.float64)
    c2 = 1.0 ** 2 + 0.5 ** 2
    expected = c2 * (np.mean(np.diff(t, axis=1) ** 2) + np.mean(np.diff(t, axis=0) ** 2))
    assert e_grad == pytest.approx(expected, rel=1e-5)
    # the interior is flat: only pixels within the margin ever differ
    interior = t[4:-4, 4:-4]
    assert np.all(interior == 1.0)
    assert e_jac == 0.0


def test_folding_map_is_penalised():
    g = identity_map(12, 12).astype(np.float64)
    g[..., 0] = 11 - g[..., 0]
    _, e_jac = e_reg(Svf.zeros(12, 12), g)
    assert e_jac == pytest.approx(1.0)


def test_e_reg_shape_mismatch():
    with pytest.raises(EnergyError):
        e_reg(Svf.zeros(8, 8), identity_map(9, 8))


def test_weights_must_be_non_negative():
    with pytest.raises(ValueError):
        EnergyWeights(lambda_adv=-1.0)


def test_synthetic_defaults():
    w = SYNTHETIC_WEIGHTS
    assert (w.lambda_adv, w.lambda_vae, w.lambda_grad, w.lambda_jac) == (0.01, 1e-5, 1.0, 10.0)


def test_identity_energy_is_similarity_only(small_nets, image):
    w = EnergyWeights(0.3, 0.2, 1.0, 10.0)
    b = e_can(image, Svf.zeros(32, 32), small_nets, w)
    assert b.e_grad == 0.0 and b.e_jac == 0.0
    e_vae = vae_energy(small_nets.vae, image)
    e_adv = adv_energy(small_nets.disc, image)
    assert b.e_vae == pytest.approx(e_vae, rel=1e-6)
    assert b.e_adv == pytest.approx(e_adv, rel=1e-6)
    assert b.total == pytest.approx(0.3 * e_vae + 0.2 * e_adv, rel=1e-6)


def test_breakdown_identity_and_json(small_nets, image):
    w = EnergyWeights(0.3, 0.2, 1.0, 10.0)
    v = smooth_random_svf(np.random.default_rng(3), 32, 32, max_norm=3.0)
    b = e_can(image, v, small_nets, w)
    expected = 0.3 * b.e_vae + 0.2 * b.e_adv + b.e_grad + 10 * b.e_jac
    assert b.total == pytest.approx(expected, rel=1e-5)
    assert b.is_finite() and b.e_grad > 0
    assert set(b.as_dict()) == {"e_vae", "e_adv", "e_grad", "e_jac", "total"}
    assert '"total"' in b.to_json()


def test_similarity_zero_weights_ignore_nets(image):
    assert e_similarity(image, None, None, EnergyWeights(0, 0, 1, 10)) == (0.0, 0.0)
    b = e_can(image, Svf.zeros(32, 32), EnergyNets(), EnergyWeights(0, 0, 1, 10))
    assert b.total == 0.0


def test_missing_net_with_positive_weight(image):
    with pytest.raises(EnergyError):
        e_similarity(image, None, None, EnergyWeights(lambda_vae=1.0, lambda_adv=0.0))


def test_similarity_is_deterministic(small_nets, image):
    w = EnergyWeights(1.0, 1.0, 1.0, 10.0)
    a = e_similarity(image, small_nets.vae, small_nets.disc, w)
    b = e_similarity(image, small_nets.vae, small_nets.disc, w)
    assert a == b


def test_velocity_image_shape_mismatch(small_nets, image):
    with pytest.raises(EnergyError):
        e_can(image, Svf.zeros(16, 16), small_nets, SYNTHETIC_WEIGHTS)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.floats(0.5, 6.0))
def test_terms_non_negative_and_grad_monotone(seed, norm):
    v = smooth_random_svf(np.random.default_rng(seed), 24, 24, max_norm=norm)
    prev = -1.0
    for s in (0.0, 0.5, 1.0):
        vs = Svf(v.velocity * s, v.taper)
        e_grad, e_jac = e_reg(vs, exponentiate(vs))
        assert e_grad >= 0 and e_jac >= 0
        assert e_grad >= prev
        prev = e_grad


def test_assemble_uses_weights():
    w = EnergyWeights(2.0, 3.0, 4.0, 5.0)
    b = EnergyBreakdown.assemble(w, 1.0, 1.0, 1.0, 1.0)
    assert b.total == 14.0


def test_template_energy_examples():
    t = np.random.default_rng(1).uniform(size=(8, 8))
    assert e_template(t, t) == 0.0
    assert e_template(t + 0.1, t) == pytest.approx(0.01)
    x = np.random.default_rng(2).uniform(size=(8, 8))
    assert e_template(x, t) == e_template(t, x)
    with pytest.raises(EnergyError):
        e_template(x, t[:4])


def test_template_prior_matches_e_template(image):
    prior = TemplatePrior(image)
    shifted = np.roll(image, 1, axis=0)
    mse, kl = prior.terms(shifted)
    assert mse.item() == pytest.approx(e_template(shifted, image), rel=1e-6)
    assert kl.item() == 0.0
