import json

import numpy as np
import pytest

from diffeocan.canon import (
    CanonConfig,
    CanonError,
    canonicalise,
    canonicalise_many,
    equivariant_segment,
    invariant_classify,
    write_artefacts,
)
from diffeocan.energy import EnergyNets, EnergyWeights, TemplatePrior, e_template
from diffeocan.grid import compose_maps, identity_map, threshold_mask, translation_map, warp_image
from diffeocan.io import read_pfm, read_pgm
from diffeocan.nets import Discriminator
from diffeocan.nets.models import Classifier, InnerModel, Segmenter

PRIOR_ONLY = EnergyWeights(lambda_vae=1.0, lambda_adv=0.0, lambda_grad=1e-3, lambda_jac=10.0)
SMALL = dict(widths=(2, 64, 64, 2), scale=4.0)


def _blob(size=32, shift=(0.0, 0.0)):
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    c = size / 2 - 0.5
    r2 = (xx - c - shift[0]) ** 2 + (yy - c - shift[1]) ** 2
    return np.exp(-r2 / (2 * 4.0 ** 2)).astype(np.float32)


@pytest.fixture(scope="module")
def prior_nets():
    return EnergyNets(vae=TemplatePrior(_blob()))


def test_zero_steps_is_identity(prior_nets):
    x = _blob(shift=(2, 0))
    res = canonicalise(x, prior_nets, CanonConfig(steps=0, weights=PRIOR_ONLY, **SMALL))
    assert res.fell_back_to_identity
    assert np.array_equal(res.g_forward, identity_map(32, 32))
    assert np.array_equal(res.x_c, x)
    assert len(res.trace) == 1


def test_config_validation():
    with pytest.raises(ValueError):
        CanonConfig(steps=-1)
    with pytest.raises(ValueError):
        CanonConfig(lr=0.0)


def test_translation_is_undone_under_template_prior(prior_nets):
    x = _blob(shift=(2, 0))
    cfg = CanonConfig(steps=60, lr=1e-3, weights=PRIOR_ONLY, **SMALL)
    res = canonicalise(x, prior_nets, cfg)
    before = e_template(x, _blob())
    after = e_template(res.x_c, _blob())
    assert not res.fell_back_to_identity
    assert after < 0.25 * before
    # the recovered map moves the centre by roughly the applied shift
    dx = (res.g_forward - identity_map(32, 32))[14:18, 14:18, 0].mean()
    assert dx == pytest.approx(2.0, abs=0.6)


def test_result_invariants(prior_nets):
    x = _blob(shift=(1.5, -1.0))
    res = canonicalise(x, prior_nets, CanonConfig(steps=15, lr=1e-3, weights=PRIOR_ONLY, **SMALL))
    totals = [b.total for b in res.trace]
    assert len(res.trace) == 16
    assert min(totals) <= totals[0]
    assert res.best.total == min(totals)
    assert np.allclose(res.x_c, warp_image(x, res.g_forward), atol=1e-6)
    # inverse up to bilinear composition error at the policy's n=4 squarings
    err = np.abs(compose_maps(res.g_forward, res.g_inverse) - identity_map(32, 32)).max()
    assert err < 0.25


def test_canonical_input_falls_back_to_identity(prior_nets):
    # the template is already the minimum of the prior, and the regulariser only adds
    res = canonicalise(_blob(), prior_nets, CanonConfig(steps=10, lr=1e-3, weights=PRIOR_ONLY, **SMALL))
    assert res.fell_back_to_identity
    assert np.array_equal(res.x_c, _blob())


def test_canonicalise_is_deterministic(prior_nets):
    cfg = CanonConfig(steps=5, lr=1e-3, weights=PRIOR_ONLY, **SMALL)
    a = canonicalise(_blob(shift=(1, 1)), prior_nets, cfg)
    b = canonicalise(_blob(shift=(1, 1)), prior_nets, cfg)
    assert np.array_equal(a.g_forward, b.g_forward)


def test_parallel_batch_matches_serial(prior_nets):
    cfg = CanonConfig(steps=4, lr=1e-3, weights=PRIOR_ONLY, **SMALL)
    xs = [_blob(shift=(s, 0)) for s in (0.5, 1.0, 1.5)]
    serial = canonicalise_many(xs, prior_nets, cfg, jobs=1)
    threaded = canonicalise_many(xs, prior_nets, cfg, jobs=3)
    for a, b in zip(serial, threaded):
        assert np.array_equal(a.g_forward, b.g_forward)


def test_non_finite_energy_aborts_with_breakdown():
    disc = Discriminator((32, 32), channels=(4, 8))
    for p in disc.parameters():
        p.data[...] = np.inf
    with pytest.raises(CanonError) as err:
        canonicalise(_blob(), EnergyNets(disc=disc), CanonConfig(steps=2, weights=EnergyWeights(0, 1, 1, 10), **SMALL))
    assert err.value.breakdown is not None


def test_wrappers_collapse_to_naive_with_zero_steps(prior_nets):
    x = _blob(shift=(1, 0))
    cfg = CanonConfig(steps=0, weights=PRIOR_ONLY, **SMALL)
    seg = InnerModel("segmenter", Segmenter(channels=(4, 8, 8), seed=3))
    assert np.array_equal(equivariant_segment(x, seg, prior_nets, cfg), threshold_mask(seg(x), 0.5))
    clf = InnerModel("classifier", Classifier((32, 32), n_classes=3, seed=1))
    assert invariant_classify(x, clf, prior_nets, cfg) == clf.predict_class(x)
    with pytest.raises(ValueError):
        invariant_classify(x, seg, prior_nets, cfg)
    with pytest.raises(ValueError):
        equivariant_segment(x, clf, prior_nets, cfg)


def test_segmentation_follows_the_inverse_warp(prior_nets):
    # a segmenter that is exact on the template: the wrapper maps its mask back onto x
    x = _blob(shift=(2, 0))
    cfg = CanonConfig(steps=60, lr=1e-3, weights=PRIOR_ONLY, **SMALL)

    class Oracle:
        kind = "segmenter"

        def __call__(self, img):
            return (np.asarray(img) > 0.5).astype(np.float32)

    mask = equivariant_segment(x, Oracle(), prior_nets, cfg)
    truth = x > 0.5
    assert (mask.astype(bool) == truth).mean() > 0.98


def test_artefacts_written(tmp_path, prior_nets):
    res = canonicalise(_blob(shift=(1, 0)), prior_nets, CanonConfig(steps=3, lr=1e-3, weights=PRIOR_ONLY, **SMALL))
    paths = write_artefacts(res, tmp_path, "s0")
    assert np.abs(read_pgm(paths["x_c"]) - res.x_c).max() <= 0.5 / 255 + 1e-6
    assert np.array_equal(read_pfm(paths["forward"]), res.g_forward.astype(np.float32))
    assert read_pfm(paths["inverse"]).shape == (32, 32, 2)
    lines = [json.loads(s) for s in open(paths["trace"])]
    assert [r["step"] for r in lines] == [0, 1, 2, 3]
    assert lines[0]["total"] == pytest.approx(res.trace[0].total)


def test_translation_map_shift_matches_blob():
    # sanity for the fixture: pulling back by a +2 px map undoes a +2 px shift
    moved = warp_image(_blob(shift=(2, 0)), translation_map(32, 32, 2, 0))
    assert np.abs(moved - _blob())[4:-4, 4:-4].max() < 1e-5
