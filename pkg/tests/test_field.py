import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oscar import diffcore as dc
from oscar.diffcore import Tensor, check_gradient
from oscar.field import (FieldModel, FieldParams, eval_occupancy, init_latent_codebook, init_params,
                         mean_latent, zero_params)


@pytest.fixture(scope="module")
def small():
    return init_params(latent_dim=8, hidden=16, layers=3, seed=1)


def test_zero_weights_give_zero_features_and_constant_heads():
    p = zero_params()
    m = FieldModel(p)
    h = m.backbone(np.random.default_rng(0).uniform(-1, 1, (5, 3)), np.ones(128))
    assert h.shape == (5, 128)
    assert np.all(h.data == 0)
    np.testing.assert_allclose(m.acoustic(h).data, math.log(2), rtol=0, atol=1e-15)
    np.testing.assert_array_equal(m.occupancy(h).data, 0.5)


def test_default_architecture():
    p = init_params()
    assert p.depth == 8 and p.hidden == 128 and p.latent_dim == 128
    # no positional encoding: first layer reads exactly 3 + d inputs
    assert p.weights[0].shape == (3 + 128, 128)
    assert p.acoustic_w.shape == (128, 3) and p.occupancy_w.shape == (128, 1)
    assert all(np.all(b == 0) for b in p.biases)


def test_backbone_deterministic_and_batched(small):
    m = FieldModel(small)
    x = np.random.default_rng(2).uniform(-1, 1, (7, 3))
    z = np.random.default_rng(3).normal(size=8)
    a, b = m.backbone(x, z).data, m.backbone(x, z).data
    assert a.shape == (7, 16)
    assert np.array_equal(a, b)
    # batched rows equal one-at-a-time rows
    single = np.stack([m.backbone(x[i:i + 1], z).data[0] for i in range(7)])
    np.testing.assert_allclose(a, single, rtol=1e-12, atol=1e-12)


def test_backbone_latent_dimension_mismatch(small):
    with pytest.raises(dc.ShapeError):
        FieldModel(small).backbone(np.zeros((1, 3)), np.zeros(9))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 20.0))
def test_heads_respect_codomains(seed, scale):
    p = init_params(latent_dim=4, hidden=8, layers=2, seed=seed)
    m = FieldModel(p)
    rng = np.random.default_rng(seed)
    h = Tensor(np.abs(rng.normal(scale=scale, size=(6, 8))))
    assert np.all(m.acoustic(h).data >= 0)
    occ, logit = m.occupancy(h).data, m.occupancy_logit(h).data
    assert np.all((occ >= 0) & (occ <= 1))
    # float64 sigmoid only rounds to 0 or 1 beyond |logit| ~ 37
    inner = np.abs(logit) < 30
    assert np.all((occ[inner] > 0) & (occ[inner] < 1))


def test_occupancy_monotone_in_logit(small):
    m = FieldModel(small)
    h = Tensor(np.abs(np.random.default_rng(0).normal(size=(50, 16))))
    logit = m.occupancy_logit(h).data
    occ = m.occupancy(h).data
    order = np.argsort(logit)
    assert np.all(np.diff(occ[order]) >= 0)


def test_acoustic_head_gradient_wrt_features(small):
    m = FieldModel(small, trainable=False)
    h0 = np.abs(np.random.default_rng(4).normal(size=(3, 16)))
    rep = check_gradient(lambda h: m.acoustic(h)[:, 0].sum(), h0, rel_tol=1e-4)
    assert rep.passed, rep.max_rel_error


def test_shared_feature_coupling(small):
    # both heads read the same backbone activation, so moving z moves both outputs
    m = FieldModel(small)
    x = np.array([[0.1, -0.2, 0.3]])
    z = np.random.default_rng(5).normal(scale=0.5, size=8)
    h1, h2 = m.backbone(x, z), m.backbone(x, z + 0.3)
    assert not np.allclose(m.acoustic(h1).data, m.acoustic(h2).data)
    assert not np.isclose(m.occupancy(h1).data[0], m.occupancy(h2).data[0])


def test_full_model_gradients_four_points():
    p = init_params(latent_dim=4, hidden=6, layers=3, seed=7)
    x = np.random.default_rng(8).uniform(-1, 1, (4, 3))
    z0 = np.random.default_rng(9).normal(scale=0.3, size=4)
    target = np.array([0.0, 1.0, 1.0, 0.0])

    def loss_of(m, z):
        h = m.backbone(x, z)
        o = dc.clip(m.occupancy(h), 1e-7, 1 - 1e-7)
        bce = -(target * dc.log(o) + (1 - target) * dc.log(1 - o)).mean()
        return bce + m.acoustic(h).sum() * 0.1

    rep = check_gradient(lambda z: loss_of(FieldModel(p, trainable=False), z), z0, rel_tol=1e-4)
    assert rep.passed, ("z", rep.max_rel_error)
    for name, arr in p.arrays():
        def f(t, name=name):
            q = p.copy()
            m = FieldModel(q, trainable=False)
            m.tensors[name] = t
            return loss_of(m, z0)
        rep = check_gradient(f, arr, rel_tol=1e-4)
        assert rep.passed, (name, rep.max_rel_error)


def test_frozen_model_has_no_parameter_gradients(small):
    m = FieldModel(small, trainable=False)
    z = Tensor(np.zeros(8), requires_grad=True)
    dc.backward(m.occupancy(m.backbone(np.zeros((2, 3)), z)).sum())
    assert all(t.grad is None for t in m.parameter_tensors())
    assert z.grad is not None


def test_eval_occupancy_matches_differentiable_path(small):
    pts = np.random.default_rng(10).uniform(-1, 1, (100, 3))
    z = np.random.default_rng(11).normal(size=8)
    m = FieldModel(small, trainable=False)
    ref = m.occupancy(m.backbone(pts, z)).data
    np.testing.assert_allclose(eval_occupancy(small, pts, z, chunk=17), ref, rtol=1e-12, atol=1e-14)


def test_codebook_statistics():
    cb = init_latent_codebook(1000, 128, seed=0)
    std = math.sqrt(1e-3)
    assert cb.shape == (1000, 128)
    assert cb.std() == pytest.approx(std, rel=0.01)   # variance 1e-3, not std 1e-3
    assert np.array_equal(cb, init_latent_codebook(1000, 128, seed=0))
    assert init_latent_codebook(1, 128).shape == (1, 128)
    with pytest.raises(ValueError):
        init_latent_codebook(0, 128)


def test_codebook_mean_is_near_zero_per_entry():
    cb = init_latent_codebook(1000, 128, seed=3)
    # 3-sigma band per entry; allow the handful of expected excursions among 128 entries
    frac = np.mean(np.abs(mean_latent(cb)) < 3 * math.sqrt(1e-3) / math.sqrt(1000))
    assert frac > 0.98


def test_mean_latent():
    z = np.random.default_rng(0).normal(size=128)
    np.testing.assert_array_equal(mean_latent(np.stack([z, -z])), np.zeros(128))
    np.testing.assert_array_equal(mean_latent(z[None]), z)
    with pytest.raises(ValueError):
        mean_latent(np.zeros((0, 128)))


def test_params_checksum_and_roundtrip(small):
    named = dict(small.arrays())
    back = FieldParams.from_arrays(named, small.depth)
    assert back.checksum() == small.checksum()
    q = small.copy()
    q.weights[0][0, 0] += 1e-12
    assert q.checksum() != small.checksum()
