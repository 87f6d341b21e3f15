import math

import numpy as np
import pytest

from srfn import diffmath as dm
from srfn.fusionnet import he_uniform
from srfn.observation import gaussian_psf
from srfn.scene import generate_scene
from srfn.selfreg import (
    ConfigError,
    NonFiniteLossError,
    SrfnConfig,
    ablation_config,
    fusion_names,
    init_state,
    learned_model,
    loss_lc,
    loss_spa,
    loss_spe,
    observation_names,
    three_stage_forward,
    total_loss,
    train,
)
from oracles import explicit_spatial, explicit_spectral

SMALL = dict(scale=2, features=4, n_blocks=1, kernel_size=3, lr=1e-3)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(8, 8, 4, 2, 2, psf_size=3, psf_sigma=1.0, seed=7)


def randomize_tails(state, seed=0, prefixes=("f1", "f2", "f3")):
    rng = np.random.default_rng(seed)
    for p in prefixes:
        t = state.store[f"{p}.tail"]
        t.value[...] = 0.3 * he_uniform(rng, t.shape)


def test_zero_later_stages_leave_first_estimate(scene):
    state = init_state(4, 2, SrfnConfig(**SMALL))
    randomize_tails(state, prefixes=("f1",))
    tr = three_stage_forward(scene.y, scene.z, state)
    assert np.any(tr.x1.value != 0)
    np.testing.assert_array_equal(tr.x.value, tr.x1.value)


def test_stage_identities_are_exact(scene):
    state = init_state(4, 2, SrfnConfig(**SMALL))
    randomize_tails(state)
    tr = three_stage_forward(scene.y, scene.z, state)
    np.testing.assert_array_equal(tr.x2.value, tr.x1.value + tr.dx2.value)
    np.testing.assert_array_equal(tr.x.value, tr.x2.value + tr.dx3.value)
    assert tr.x.shape == (1, 4, 8, 8)
    assert tr.y.shape == (1, 4, 4, 4)
    assert tr.z.shape == (1, 2, 8, 8)


def test_forward_rejects_inconsistent_shapes(scene):
    state = init_state(4, 2, SrfnConfig(**SMALL))
    with pytest.raises(dm.ShapeError):
        three_stage_forward(scene.y[:, :3, :3], scene.z, state)
    with pytest.raises(dm.ShapeError):
        three_stage_forward(scene.y[:3], scene.z, state)


def test_loss_spa_examples():
    rng = np.random.default_rng(0)
    y, z = rng.random((3, 4, 4)), rng.random((2, 8, 8))
    assert loss_spa(y, y, z, z).value == 0.0
    assert loss_spa(y + 0.1, y, z, z).value == pytest.approx(0.1, abs=1e-12)
    yh, zh = rng.random(y.shape), rng.random(z.shape)
    ref = sum(abs(a - b) for a, b in zip(yh.ravel(), y.ravel())) / y.size
    ref += sum(abs(a - b) for a, b in zip(zh.ravel(), z.ravel())) / z.size
    assert loss_spa(yh, y, zh, z).value == pytest.approx(ref, abs=1e-12)
    with pytest.raises(dm.ShapeError):
        loss_spa(yh[:2], y, zh, z)


def test_loss_spe_examples():
    y = np.array([1.0, 0.0]).reshape(2, 1, 1)
    assert loss_spe(np.array([0.0, 1.0]).reshape(2, 1, 1), y).value == pytest.approx(math.pi / 2, abs=1e-9)
    diag = np.array([1.0, 1.0]).reshape(2, 1, 1)
    assert loss_spe(y, diag).value == pytest.approx(math.pi / 4, abs=1e-9)
    same = np.random.default_rng(1).random((5, 3, 3)) + 0.1
    assert loss_spe(same, same).value <= 5e-4


def test_loss_spe_zero_spectrum_is_finite():
    v = loss_spe(np.zeros((3, 2, 2)), np.ones((3, 2, 2))).value
    assert np.isfinite(v)


def test_loss_lc_at_true_model(scene):
    assert loss_lc(scene.y, scene.z, scene.psf, scene.srf, 2).value <= 1e-10


def test_loss_lc_wrong_kernel_is_positive(scene):
    assert loss_lc(scene.y, scene.z, gaussian_psf(3, 3.0), scene.srf, 2).value > 1e-6


def test_loss_lc_explicit_oracle():
    rng = np.random.default_rng(4)
    y, z = rng.random((4, 3, 3)), rng.random((2, 6, 6))
    k = rng.random((3, 3))
    k /= k.sum()
    r = rng.random((2, 4))
    r /= r.sum(axis=1, keepdims=True)
    ref = np.mean(np.abs(explicit_spectral(y, r) - explicit_spatial(z, k, 2)))
    assert loss_lc(y, z, k, r, 2).value == pytest.approx(ref, abs=1e-10)


def test_total_loss_composition(scene):
    cfg = SrfnConfig(**SMALL, beta=0.3, gamma=2.0)
    state = init_state(4, 2, cfg)
    randomize_tails(state)
    tr = three_stage_forward(scene.y, scene.z, state)
    terms = total_loss(tr, scene.y, scene.z, cfg)
    manual = (loss_spa(tr.y, scene.y, tr.z, scene.z).value + 0.3 * loss_spe(tr.y, scene.y).value
              + 2.0 * loss_lc(scene.y, scene.z, tr.psf, tr.srf, 2).value)
    assert terms.total.value == pytest.approx(manual, abs=1e-12)
    plain = total_loss(tr, scene.y, scene.z, cfg.replace(beta=0.0, gamma=0.0))
    assert plain.total.value == pytest.approx(plain.spa.value, abs=1e-15)


def test_perfect_reconstruction_total_at_clamp_floor(scene):
    cfg = SrfnConfig(**SMALL, beta=0.01)
    state = init_state(4, 2, cfg)
    tr = three_stage_forward(scene.y, scene.z, state, psf=scene.psf, srf=scene.srf)
    tr.y, tr.z = dm.constant(scene.y[None]), dm.constant(scene.z[None])
    assert total_loss(tr, scene.y, scene.z, cfg).total.value <= 5e-4 * 0.01


def test_zero_iterations_returns_zero_cube(scene):
    res = train(scene.y, scene.z, SrfnConfig(**SMALL, iterations=0))
    assert res.history == []
    np.testing.assert_array_equal(res.xhat, np.zeros((4, 8, 8)))


def test_loss_lc_independent_of_fusion_weights(scene):
    state = init_state(4, 2, SrfnConfig(**SMALL))
    psf, srf = learned_model(state)
    before = loss_lc(scene.y, scene.z, psf, srf, 2).value
    for name in fusion_names(state.store):
        state.store[name].value += 0.5
    psf, srf = learned_model(state)
    assert loss_lc(scene.y, scene.z, psf, srf, 2).value == before


def test_loss_lc_gradient_only_reaches_observation_params(scene):
    state = init_state(4, 2, SrfnConfig(**SMALL))
    psf, srf = learned_model(state)
    state.store.zero_grad()
    dm.backward(loss_lc(scene.y, scene.z, psf, srf, 2))
    assert all(np.all(state.store[n].grad == 0) for n in fusion_names(state.store))
    assert any(np.any(state.store[n].grad != 0) for n in observation_names(state.store))


def test_frozen_true_model_keeps_lc_zero(scene):
    seen = []
    train(scene.y, scene.z, SrfnConfig(**SMALL, iterations=15), psf=scene.psf, srf=scene.srf,
          callback=lambda st, vals: seen.append(vals["lc"]))
    assert len(seen) == 15 and max(seen) <= 1e-10


def test_simplex_holds_every_iteration(scene):
    def check(state, vals):
        k, r = (a.value for a in learned_model(state))
        assert k.min() >= 0 and abs(k.sum() - 1) < 1e-9
        assert r.min() >= 0 and np.all(np.abs(r.sum(axis=1) - 1) < 1e-9)

    res = train(scene.y, scene.z, SrfnConfig(**SMALL, iterations=20).replace(lr=5e-2), callback=check)
    assert all(np.isfinite(list(row.values())).all() for row in res.history)


def test_parameter_count_constant(scene):
    state = init_state(4, 2, SrfnConfig(**SMALL))
    n = state.store.count()
    train(scene.y, scene.z, SrfnConfig(**SMALL, iterations=3), state=state)
    assert state.store.count() == n and state.iteration == 3


def test_nan_input_names_tensor(scene):
    cfg = SrfnConfig(**SMALL, iterations=2)
    state = init_state(4, 2, cfg)
    state.store["f2.head"].value[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLossError) as err:
        train(scene.y, scene.z, cfg, state=state)
    assert err.value.tensor == "f2.head"
    assert err.value.iteration == 0


def test_alternate_schedule_updates_one_group(scene):
    cfg = SrfnConfig(**SMALL, iterations=1, schedule="alternate")
    state = init_state(4, 2, cfg)
    obs_before = {n: state.store[n].value.copy() for n in observation_names(state.store)}
    train(scene.y, scene.z, cfg, state=state)
    assert all(np.array_equal(state.store[n].value, v) for n, v in obs_before.items())
    assert np.any(state.store["f1.tail"].value != 0)


def test_training_reduces_loss(scene):
    res = train(scene.y, scene.z, SrfnConfig(**SMALL, iterations=60).replace(lr=3e-3))
    assert res.final["total"] < res.history[0]["total"]


def test_config_validation():
    with pytest.raises(ConfigError):
        SrfnConfig(lambda_sn=1.5)
    with pytest.raises(ConfigError):
        SrfnConfig(beta=-1)
    with pytest.raises(ConfigError):
        SrfnConfig(schedule="sometimes")
    with pytest.raises(ConfigError):
        SrfnConfig.from_dict({"lr": 1e-3, "bogus": 1})
    cfg = SrfnConfig.from_dict(SrfnConfig(lr=3e-3).to_dict())
    assert cfg.lr == 3e-3


def test_ablation_ladder():
    assert not ablation_config("S").spectral_norm
    assert ablation_config("SN").gamma == 0.0
    assert ablation_config("SNL").gamma == 30.0 and ablation_config("SNL").beta == 0.0
    assert ablation_config("SNLA").beta == 0.01
    assert not ablation_config("baseline").obs_softmax
    with pytest.raises(ConfigError):
        ablation_config("XYZ")
