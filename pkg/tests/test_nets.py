import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diffeocan import autodiff as ad
from diffeocan.diffeo import exponentiate, jacobian_determinant
from diffeocan.grid import identity_map
from diffeocan.nets import (
    Discriminator,
    SirenNet,
    TrainConfig,
    TrainReport,
    VaeNet,
    adv_energy,
    critic_separation,
    genus_oracle,
    kl_divergence,
    normalised_coords,
    siren_velocity,
    train_discriminator,
    train_inner,
    train_vae,
    vae_energy,
)
from diffeocan.nets.models import Classifier, InnerModel, Segmenter, pyramid_levels
from diffeocan.nets.train import bce_with_logits, cross_entropy

from .oracles import figure_eight, flood_fill_holes, ring


# ------------------------------------------------------------------ genus

def test_filled_disk_has_no_holes():
    yy, xx = np.mgrid[:15, :15]
    assert genus_oracle((yy - 7) ** 2 + (xx - 7) ** 2 <= 25) == 0


def test_ring_has_one_hole():
    m = ring(9)
    assert flood_fill_holes(m) == 1
    assert genus_oracle(m) == 1


def test_figure_eight_has_two_holes():
    assert genus_oracle(figure_eight()) == 2


def test_diagonal_background_gap_does_not_open_a_hole():
    # background pixels touching only diagonally stay separate (4-connectivity)
    m = np.array([[0, 0, 0, 0, 0],
                  [0, 1, 1, 0, 0],
                  [0, 1, 0, 1, 0],
                  [0, 0, 1, 1, 0],
                  [0, 0, 0, 0, 0]])
    assert genus_oracle(m) == 1 == flood_fill_holes(m)


def test_empty_mask_rejected():
    with pytest.raises(ValueError):
        genus_oracle(np.zeros((0, 3)))


@settings(max_examples=60, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 16), st.integers(1, 16)), elements=st.integers(0, 1)))
def test_genus_matches_flood_fill(m):
    assert genus_oracle(m) == flood_fill_holes(m)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 6), st.integers(0, 6))
def test_genus_invariant_under_translation(dy, dx):
    canvas = np.zeros((24, 24), np.uint8)
    canvas[dy:dy + 15, dx:dx + 9] = figure_eight()
    assert genus_oracle(canvas) == 2


# ------------------------------------------------------------------ SIREN

def test_zero_head_gives_zero_velocity():
    v = siren_velocity(SirenNet(seed=3), (16, 16), 4.0)
    assert np.all(v.velocity == 0)
    assert np.array_equal(exponentiate(v), identity_map(16, 16))


def test_siren_output_bounded_by_head_norm():
    net = SirenNet((2, 32, 32, 2), seed=1, zero_head=False)
    scale = 3.0
    v = siren_velocity(net, (20, 20), scale).velocity
    w, b = net.head.weight.data, net.head.bias.data
    bound = scale * (np.abs(w).sum(axis=0) + np.abs(b))
    assert np.all(np.abs(v) <= bound + 1e-5)


def test_siren_is_deterministic_per_seed():
    a = siren_velocity(SirenNet(seed=4, zero_head=False), (8, 8), 1.0).velocity
    b = siren_velocity(SirenNet(seed=4, zero_head=False), (8, 8), 1.0).velocity
    assert np.array_equal(a, b)


def test_siren_scale_must_be_positive():
    with pytest.raises(ValueError):
        siren_velocity(SirenNet(), (4, 4), 0.0)


def test_normalised_coords_corners():
    c = normalised_coords(3, 5)
    assert c.shape == (15, 2)
    assert tuple(c[0]) == (-1.0, -1.0) and tuple(c[-1]) == (1.0, 1.0)
    assert tuple(c[4]) == (1.0, -1.0)


def test_random_siren_fields_are_orientation_preserving():
    ok = 0
    for seed in range(20):
        net = SirenNet((2, 32, 32, 2), seed=seed, zero_head=False)
        raw = siren_velocity(net, (32, 32), 1.0)
        peak = np.abs(raw.tapered()).max()
        v = siren_velocity(net, (32, 32), 4.0 / max(peak, 1e-9))
        ok += jacobian_determinant(exponentiate(v)).min() > 0
    assert ok >= 19


# ------------------------------------------------------------------ VAE and critic

def test_kl_closed_form():
    assert kl_divergence(np.zeros((1, 3)), np.zeros((1, 3))).item() == 0.0
    assert kl_divergence(np.ones((1, 1)), np.zeros((1, 1))).item() == pytest.approx(0.5)


def test_vae_shapes_and_levels():
    assert pyramid_levels(64) == 3 and pyramid_levels(28) == 2
    for shape in ((64, 64), (28, 28)):
        net = VaeNet(shape, seed=0)
        mu, lv = net.encode(np.zeros(shape))
        assert mu.shape == (1, 10) and lv.shape == (1, 10)
        assert net.decode(mu).shape == (1, 1) + shape


def test_vae_energy_non_negative_and_shape_checked():
    net = VaeNet((28, 28), seed=0)
    x = np.random.default_rng(0).uniform(size=(28, 28))
    assert vae_energy(net, x) >= 0
    with pytest.raises(ValueError):
        vae_energy(net, np.zeros((27, 28)))


def test_vae_energy_zero_for_perfect_reconstruction():
    net = VaeNet((28, 28), seed=0)
    for p in net.parameters():
        p.data[...] = 0.0
    # zero logits decode to 0.5 everywhere, latent is exactly N(0, I)
    assert vae_energy(net, np.full((28, 28), 0.5)) == pytest.approx(0.0, abs=1e-12)


def test_zero_critic_has_zero_energy():
    net = Discriminator((28, 28))
    for p in net.parameters():
        p.data[...] = 0.0
    for x in (np.zeros((28, 28)), np.random.default_rng(0).uniform(size=(28, 28))):
        assert adv_energy(net, x) == 0.0


def test_critic_finite_on_noise():
    net = Discriminator((64, 64), seed=3)
    assert np.isfinite(adv_energy(net, np.random.default_rng(1).uniform(size=(64, 64))))


def _blobs(n, size=28, seed=0):
    rng = np.random.default_rng(seed)
    out = np.zeros((n, size, size), np.float32)
    for k in range(n):
        r, c = rng.integers(8, size - 8, 2)
        out[k, r - 4:r + 4, c - 4:c + 4] = 1.0
    return out


def test_vae_training_lowers_loss_and_is_deterministic():
    x = _blobs(12)
    rep = TrainReport()
    cfg = TrainConfig(lr=1e-3, batch_size=4, epochs=8, seed=1)
    a = train_vae(x, cfg, report=rep)
    b = train_vae(x, cfg)
    assert rep.losses[-1] < rep.losses[0]
    sa, sb = a.state_dict(), b.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_training_preconditions():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        train_vae(np.zeros((0, 28, 28)))
    with pytest.raises(ValueError):
        train_inner(np.zeros((0, 28, 28)), np.zeros((0, 28, 28)))


def test_critic_mu_zero_is_flagged():
    x = _blobs(4)
    sampler = lambda rng: np.stack(np.meshgrid(np.arange(28.0), np.arange(28.0))[::1], -1) + rng.uniform(-1, 1)
    rep = TrainReport()
    cfg = TrainConfig(lr=1e-4, batch_size=4, epochs=1)
    train_discriminator(x, sampler, cfg, mu=0.0, report=rep)
    assert any("mu=0" in f for f in rep.flags)
    with pytest.raises(ValueError):
        train_discriminator(np.zeros((0, 28, 28)), sampler, cfg)


def test_critic_is_deterministic_and_separates_shifted_images():
    x = _blobs(16, seed=2)

    def sampler(rng):
        g = np.stack(np.meshgrid(np.arange(28.0), np.arange(28.0)), -1)
        return (g + rng.choice([-6.0, 6.0], 2)).astype(np.float32)

    cfg = TrainConfig(lr=1e-3, batch_size=8, epochs=15, seed=0)
    a = train_discriminator(x, sampler, cfg)
    b = train_discriminator(x, sampler, cfg)
    assert all(np.array_equal(a.state_dict()[k], b.state_dict()[k]) for k in a.state_dict())
    assert critic_separation(a, x, sampler) > 0


# ------------------------------------------------------------------ inner models

def test_bce_and_ce_match_numpy():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((2, 1, 3, 3))
    t = (rng.uniform(size=z.shape) > 0.5).astype(float)
    with ad.precision(np.float64):
        ours = bce_with_logits(ad.as_tensor(z), t).item()
    p = 1 / (1 + np.exp(-z))
    assert ours == pytest.approx(np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p))))
    logits = rng.standard_normal((4, 3))
    y = np.array([0, 2, 1, 1])
    with ad.precision(np.float64):
        ce = cross_entropy(ad.as_tensor(logits), y).item()
    lse = np.log(np.exp(logits).sum(1))
    assert ce == pytest.approx(np.mean(lse - logits[np.arange(4), y]))


def test_segmenter_outputs_probabilities():
    m = InnerModel("segmenter", Segmenter(seed=0))
    p = m(np.random.default_rng(0).uniform(size=(32, 32)))
    assert p.shape == (32, 32) and p.min() >= 0 and p.max() <= 1


def test_classifier_tie_goes_to_lowest_index():
    net = Classifier((28, 28), n_classes=3)
    for p in net.parameters():
        p.data[...] = 0.0
    assert InnerModel("classifier", net).predict_class(np.zeros((28, 28))) == 0


def test_train_inner_label_checks():
    x = np.zeros((4, 28, 28), np.float32)
    with pytest.raises(ValueError):
        train_inner(x, np.zeros(4, int), kind="segmenter")
    with pytest.raises(ValueError):
        train_inner(x, np.zeros((4, 28, 28)), kind="classifier")
    with pytest.raises(ValueError):
        train_inner(x, np.array([0, 1, 2, 5]), kind="classifier")
    with pytest.raises(ValueError):
        train_inner(x, np.zeros(4, int), kind="regressor")


def test_classifier_training_improves_accuracy():
    rng = np.random.default_rng(0)
    x = _blobs(30, seed=1)
    y = rng.integers(0, 2, 30)
    x[y == 1] = 1.0 - x[y == 1]
    cfg = TrainConfig(lr=1e-3, batch_size=5, epochs=5, seed=0)
    m = train_inner(x, y, cfg, kind="classifier", n_classes=2)
    acc = np.mean([m.predict_class(img) == lab for img, lab in zip(x, y)])
    assert acc >= 0.9


def test_checkpoint_round_trip(tmp_path):
    net = Segmenter(seed=5)
    net.save(tmp_path / "s.dcnw")
    back = Segmenter(seed=9).load(tmp_path / "s.dcnw")
    x = np.random.default_rng(0).uniform(size=(16, 16))
    assert np.array_equal(net(x).data, back(x).data)
    with pytest.raises(KeyError):
        Classifier().load(tmp_path / "s.dcnw")
