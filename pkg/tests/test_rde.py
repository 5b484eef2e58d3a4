import numpy as np
import pytest

from rwnet.errors import ContractError, InvalidInputError, NumericError
from rwnet.geometry import ViewSet
from rwnet.model import Backbone, ModelConfig
from rwnet.rde import (
    SIGMA_MIN,
    CoefficientMask,
    MaskStore,
    ObfuscationNoise,
    RDEConfig,
    apply_mask,
    apply_masks,
    estimate_noise,
    mask_objective,
    noise_seed,
    obfuscate,
    optimize_mask,
    optimize_masks,
)
from rwnet.wavelet import dwt2, idwt2

from conftest import TINY


@pytest.fixture
def target():
    return Backbone(ModelConfig(**TINY, seed=2)).freeze()


def test_config_invariants():
    for bad in (dict(lam=-1.0), dict(lr=0.0), dict(steps=0), dict(draws=0)):
        with pytest.raises(InvalidInputError):
            RDEConfig(**bad)
    assert RDEConfig().to_dict() == {"lam": 0.01, "lr": 0.1, "steps": 30, "draws": 4}


# -- noise ------------------------------------------------------------------------


def test_noise_constant_views():
    noise = estimate_noise(ViewSet(np.full((6, 8, 8), 0.25)))
    np.testing.assert_array_equal(noise.mean[:, 0], 0.5)
    assert not noise.mean[:, 1:].any()
    assert np.all(noise.std == SIGMA_MIN)


def test_noise_brute_force(rng):
    vs = ViewSet(rng.uniform(size=(6, 16, 16)))
    noise = estimate_noise(vs)
    for v in range(6):
        for b, band in enumerate(dwt2(vs.views[v])):
            assert abs(noise.mean[v, b] - band.mean()) <= 1e-12
            assert abs(noise.std[v, b] - max(band.std(), SIGMA_MIN)) <= 1e-12
    again = estimate_noise(vs)
    assert again.mean.tobytes() == noise.mean.tobytes() and again.std.tobytes() == noise.std.tobytes()


# -- obfuscation and masking ------------------------------------------------------


def test_obfuscate_all_ones_is_identity(shape_views):
    vs = shape_views[0]
    out = obfuscate(vs, CoefficientMask.ones(vs.views), estimate_noise(vs), seed=5)
    assert np.abs(out.views - vs.views).max() <= 1e-10


def test_obfuscate_zero_mask_mean(rng):
    vs = ViewSet(rng.uniform(size=(6, 8, 8)))
    sigma = 0.05
    noise = ObfuscationNoise(np.zeros((6, 4)), np.full((6, 4), sigma))
    zeros = np.zeros((6, 4, 4, 4))
    draws = [noise.draw(np.random.default_rng(s), 4) for s in range(400)]
    raw = np.stack([idwt2(tuple(d[:, i] for i in range(4))) for d in draws])
    # unclipped reconstructions average to the zero image
    assert np.abs(raw.mean(axis=0)).max() <= 4 * sigma / np.sqrt(len(draws))
    ys = np.stack([obfuscate(vs, zeros, noise, seed=s).views for s in range(400)])
    # clipping at 0 biases the mean upward by about sigma / sqrt(2 pi)
    assert ys.mean() == pytest.approx(sigma / np.sqrt(2 * np.pi), rel=0.1)


def test_obfuscate_deterministic(shape_views):
    vs = shape_views[3]
    mask = np.full((6, 4, 8, 8), 0.5)
    a = obfuscate(vs, mask, estimate_noise(vs), seed=9)
    b = obfuscate(vs, mask, estimate_noise(vs), seed=9)
    assert a.views.tobytes() == b.views.tobytes()
    c = obfuscate(vs, mask, estimate_noise(vs), seed=10)
    assert a.views.tobytes() != c.views.tobytes()
    assert c.views.min() >= 0 and c.views.max() <= 1


def test_obfuscate_shape_errors(shape_views):
    vs = shape_views[0]
    with pytest.raises(InvalidInputError):
        obfuscate(vs, np.ones((6, 4, 4, 4)), estimate_noise(vs), 0)
    with pytest.raises(InvalidInputError):
        obfuscate(vs, np.ones((6, 4, 8, 8)), ObfuscationNoise(np.zeros((5, 4)), np.ones((5, 4))), 0)


def test_apply_mask_examples(shape_views, rng):
    vs = shape_views[2]
    assert np.abs(apply_mask(vs, CoefficientMask.ones(vs.views)).views - vs.views).max() <= 1e-10
    assert not apply_mask(vs, np.zeros((6, 4, 8, 8))).views.any()
    const = ViewSet(np.full((6, 16, 16), 0.3))
    ll_only = np.zeros((6, 4, 8, 8))
    ll_only[:, 0] = 1.0
    np.testing.assert_allclose(apply_mask(const, ll_only).views, 0.3, atol=1e-15)


def test_apply_mask_ones_roundtrip_bitwise(shape_views):
    # projected views sit on a dyadic grid, so the round trip is exact
    for vs in shape_views:
        assert apply_mask(vs, CoefficientMask.ones(vs.views)).views.tobytes() == vs.views.tobytes()


def test_apply_masks_batched(shape_views, rng):
    x = np.stack([vs.views for vs in shape_views[:3]])
    m = rng.uniform(size=(3, 6, 4, 8, 8))
    out = apply_masks(x, m)
    for i in range(3):
        np.testing.assert_array_equal(out[i], apply_mask(shape_views[i], m[i]).views)


def test_mask_validation():
    with pytest.raises(InvalidInputError):
        CoefficientMask(np.full((6, 4, 2, 2), 1.5))
    with pytest.raises(InvalidInputError):
        CoefficientMask(np.ones((6, 3, 2, 2)))
    assert CoefficientMask(np.full((6, 4, 2, 2), 0.25)).density == 0.25


# -- store ------------------------------------------------------------------------


def test_store_semantics(tmp_path):
    store = MaskStore()
    assert store.get("x") is None and "x" not in store
    a = CoefficientMask(np.full((6, 4, 2, 2), 0.5), "x")
    b = CoefficientMask(np.full((6, 4, 2, 2), 0.25), "x")
    store.put("x", a)
    assert store.get("x").values.tobytes() == a.values.tobytes()
    store.put("x", b)
    assert store.get("x") is b and len(store) == 1
    store.put("a/y", a)
    store.save(str(tmp_path / "s"))
    back = MaskStore.load(str(tmp_path / "s"))
    assert sorted(back.ids()) == ["a/y", "x"]
    assert back.get("x").values.tobytes() == b.values.tobytes()


# -- optimisation -----------------------------------------------------------------


def test_zero_lambda_single_step_keeps_ones(shape_views, target):
    masks = optimize_masks(shape_views, target, RDEConfig(lam=0.0, steps=1))
    for m in masks:
        assert np.all(m.values == 1.0)


def test_mask_stays_in_unit_interval(shape_views, target):
    for steps in (1, 3, 6):
        for m in optimize_masks(shape_views[:3], target, RDEConfig(lam=1.0, lr=2.0, steps=steps)):
            assert m.values.min() >= 0.0 and m.values.max() <= 1.0


def test_optimisation_deterministic(shape_views, target):
    cfg = RDEConfig(steps=4)
    a = optimize_masks(shape_views[:2], target, cfg, seed=3, epoch=2)
    b = optimize_masks(shape_views[:2], target, cfg, seed=3, epoch=2)
    assert all(x.values.tobytes() == y.values.tobytes() for x, y in zip(a, b))
    c = optimize_masks(shape_views[:2], target, cfg, seed=3, epoch=3)
    assert any(x.values.tobytes() != y.values.tobytes() for x, y in zip(a, c))


def test_batch_composition_irrelevant(shape_views, target):
    cfg = RDEConfig(steps=3)
    alone = optimize_mask(shape_views[1], target, cfg, seed=1)
    batched = optimize_masks(shape_views[:4], target, cfg, seed=1)[1]
    np.testing.assert_allclose(alone.values, batched.values, atol=1e-9)


def test_warm_start_used(shape_views, target):
    vs = shape_views[4]
    warm = CoefficientMask(np.full((6, 4, 8, 8), 0.5))
    m = optimize_mask(vs, target, RDEConfig(lam=0.0, steps=1, lr=1e-12), warm_start=warm)
    np.testing.assert_allclose(m.values, 0.5, atol=1e-9)
    with pytest.raises(InvalidInputError):
        optimize_mask(vs, target, RDEConfig(steps=1), warm_start=np.ones((6, 4, 4, 4)))


def test_lambda_drives_mask_down(shape_views, target):
    dense = optimize_mask(shape_views[0], target, RDEConfig(lam=0.01))
    sparse = optimize_mask(shape_views[0], target, RDEConfig(lam=100.0))
    assert sparse.density < dense.density <= 1.0
    assert sparse.density == 0.0


def test_trace_records_each_step(shape_views, target):
    masks, trace = optimize_masks(shape_views[:2], target, RDEConfig(steps=5), return_trace=True)
    assert len(trace.losses) == 5 and trace.losses[0].shape == (2,)
    # at the all-ones start there is no distortion, only the rate term
    np.testing.assert_array_equal(trace.distortions[0], 0.0)
    assert trace.losses[0][0] == pytest.approx(0.01 * 6 * 4 * 8 * 8)


def test_requires_frozen_target(shape_views):
    with pytest.raises(ContractError):
        optimize_mask(shape_views[0], Backbone(ModelConfig(**TINY)), RDEConfig(steps=1))


def test_nan_loss_reports_step(shape_views):
    net = Backbone(ModelConfig(**TINY))
    net.params["mlp.out.bias"].data = np.full(4, np.nan)
    with pytest.raises(NumericError, match="step=0"):
        optimize_mask(shape_views[0], net.freeze(), RDEConfig(steps=2))


def test_noise_seed_material():
    a = noise_seed(1, "cube-0001", 2, 3)
    assert a == noise_seed(1, "cube-0001", 2, 3)
    assert a != noise_seed(1, "cube-0002", 2, 3)
    np.random.default_rng(a)


def test_mask_objective_at_ones(shape_views, target):
    vs = shape_views[5]
    est = mask_objective(vs, CoefficientMask.ones(vs.views), target, 0.01, seeds=range(4))
    assert est.distortion == 0.0 and est.distortion_se == 0.0
    assert est.objective == pytest.approx(0.01 * est.l1)
