import math

import numpy as np
import pytest

from oscar import diffcore as dc
from oscar.diffcore import Tensor, check_gradient
from oscar.field import FieldModel, init_params, zero_params
from oscar.losses import photometric_loss
from oscar.render import (DIRECT, PoseError, ProbeSpec, generate_rays, render_frame, render_frame_numpy,
                          render_patch, render_rays, render_scanline, transmission, validate_pose)
from oscar.simdata.simulate import make_pose, oracle_scanlines, rotation


def const_field(beta=0.0, sigma=0.0, mu=0.0):
    def fn(pts):
        n = len(pts)
        return Tensor(np.tile([beta, sigma, mu], (n, 1)))
    return fn


def plate_field(depth, thickness, beta=1.0, mu_below=40.0, sigma=0.1):
    """Horizontal reflective plate at z = depth (probe at origin firing along +z)."""
    def np_fn(pts):
        z = pts[:, 2]
        out = np.zeros((len(pts), 3))
        out[:, 1] = sigma
        plate = (z >= depth) & (z < depth + thickness)
        out[plate, 0] = beta
        out[z >= depth, 2] = mu_below
        return out
    return np_fn


def test_probe_spec_validation():
    with pytest.raises(ValueError):
        ProbeSpec(scanlines=1)
    with pytest.raises(ValueError):
        ProbeSpec(depth=0.0)
    spec = ProbeSpec(4, 8, depth=2.0, width=1.0)
    np.testing.assert_allclose(spec.sample_depths(), (np.arange(8) + 0.5) * 0.25)
    assert np.all(np.diff(spec.sample_depths()) > 0)


def test_identity_pose_rays():
    o, d = generate_rays(np.eye(4), ProbeSpec(3, 4, 1.0, 1.0))
    np.testing.assert_allclose(o, [[-0.5, 0, 0], [0, 0, 0], [0.5, 0, 0]])
    np.testing.assert_allclose(d, np.tile([0, 0, 1.0], (3, 1)))


def test_translation_pose_rays():
    pose = make_pose(np.eye(3), [0.1, 0.2, 0.3])
    o, d = generate_rays(pose, ProbeSpec(3, 4, 1.0, 1.0))
    np.testing.assert_allclose(o, [[-0.4, 0.2, 0.3], [0.1, 0.2, 0.3], [0.6, 0.2, 0.3]])
    np.testing.assert_allclose(d, np.tile([0, 0, 1.0], (3, 1)))


def test_rotated_pose_rays():
    _, d = generate_rays(make_pose(rotation("x", 90.0), [0, 0, 0]), ProbeSpec(3, 4))
    np.testing.assert_allclose(d, np.tile([0, -1.0, 0], (3, 1)), atol=1e-15)
    assert np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-9)


@pytest.mark.parametrize("bad", [np.eye(3), np.diag([1.0, 1.0, 2.0, 1.0]), np.diag([1.0, 1.0, -1.0, 1.0])])
def test_invalid_pose_rejected(bad):
    with pytest.raises(PoseError):
        validate_pose(bad)


def test_transmission_zero_and_bounds():
    np.testing.assert_array_equal(transmission(np.zeros(10), 0.1).data, 1.0)
    losses = np.random.default_rng(0).uniform(0, 5, size=(4, 50))
    t = transmission(losses, 0.05).data
    assert np.all(t[:, 0] == 1.0)
    assert np.all((t > 0) & (t <= 1))
    assert np.all(np.diff(t, axis=1) <= 0)
    with pytest.raises(ValueError):
        transmission(-np.ones(3), 0.1)


def test_transmission_constant_matches_exponential():
    c, depth, h = 2.0, 1.0, 512
    spec = ProbeSpec(2, h, depth, 1.0)
    t = transmission(np.full(h, c), spec.dt).data
    analytic = np.exp(-c * spec.sample_depths())
    assert np.max(np.abs(t / analytic - 1)) < 0.01


def test_transmission_step_occluder():
    # c = 50 past t_bone, zero before: within 0.1 depth past the bone T < e^-5
    h, depth, t_bone = 400, 1.0, 0.4
    spec = ProbeSpec(2, h, depth, 1.0)
    ts = spec.sample_depths()
    t = transmission(np.where(ts > t_bone, 50.0, 0.0), spec.dt).data
    assert np.all(t[ts <= t_bone] == 1.0)
    # left-Riemann lags the analytic integral by at most one sample
    assert np.all(t[ts >= t_bone + 0.1 + spec.dt] < math.exp(-5))
    assert t[np.searchsorted(ts, t_bone + 0.1)] == pytest.approx(math.exp(-5), rel=0.15)


def test_scanline_trivial_fields():
    spec = ProbeSpec(2, 32, 1.0, 1.0)
    o, d = np.zeros(3), np.array([0, 0, 1.0])
    assert np.all(render_scanline(const_field(), o, d, spec).data == 0)
    np.testing.assert_allclose(render_scanline(const_field(sigma=0.3), o, d, spec).data, 0.3)
    with pytest.raises(ValueError):
        render_scanline(const_field(), o, np.array([0, 0, 2.0]), spec)


def test_scanline_reflector_then_spike_hand_computed():
    # 16-sample ray: reflector at sample 4, attenuation spike at 6
    n, dt = 16, 1.0 / 16
    ac = np.zeros((n, 3))
    ac[:, 1] = 0.05
    ac[4, 0] = 1.0
    ac[6, 2] = 150.0
    img, _ = render_rays(lambda p: Tensor(ac), np.zeros((1, 3)), np.array([[0, 0, 1.0]]),
                         (np.arange(n) + 0.5) * dt, dt)
    out = img.data[:, 0]
    loss = ac[:, 0] + ac[:, 2]
    expect = np.exp(-dt * np.concatenate([[0.0], np.cumsum(loss)[:-1]])) * (ac[:, 0] + ac[:, 1])
    np.testing.assert_allclose(out, expect, rtol=1e-14)
    assert out[4] == pytest.approx(1.05)           # own echo not attenuated
    assert np.all(out[7:] < 1e-2 * out[4])


def test_frame_layout_and_plate():
    spec = ProbeSpec(8, 64, 1.0, 0.5)
    np_fn = plate_field(0.5, spec.dt)

    def field(pts):
        return Tensor(np_fn(pts))

    img = render_frame(field, np.eye(4), spec).data
    assert img.shape == (64, 8)
    bright = np.argmax(img, axis=0)
    assert np.all(np.abs(bright - math.floor(0.5 * 64)) <= 1)
    below = img[int(0.5 * 64) + 4:]
    assert np.all(below < 1e-2 * img.max())
    # columns equal individual scanlines
    o, d = generate_rays(np.eye(4), spec)
    for j in (0, 5):
        np.testing.assert_array_equal(img[:, j], render_scanline(field, o[j], d[j], spec).data)


def test_zero_field_frame_is_black_and_deterministic():
    spec = ProbeSpec(6, 8, 1.0, 1.0)
    p = zero_params(latent_dim=4, hidden=5, layers=2)
    for a in (p.acoustic_b,):
        a[...] = -50.0   # softplus(-50) ~ 2e-22
    img = render_frame_numpy(p, np.zeros(4), np.eye(4), spec)
    assert np.all(img < 1e-20)
    q = init_params(latent_dim=4, hidden=5, layers=2, seed=0)
    z = np.ones(4)
    assert np.array_equal(render_frame_numpy(q, z, np.eye(4), spec), render_frame_numpy(q, z, np.eye(4), spec))


def test_direct_mode_ignores_transmission():
    spec = ProbeSpec(2, 16, 1.0, 1.0)
    img = render_frame(const_field(beta=0.2, sigma=0.1, mu=5.0), np.eye(4), spec, mode=DIRECT).data
    np.testing.assert_allclose(img, 0.3)
    with pytest.raises(ValueError):
        render_frame(const_field(), np.eye(4), spec, mode="bogus")


def test_patch_equals_frame_crop():
    spec = ProbeSpec(20, 24, 1.2, 1.0)
    p = init_params(latent_dim=4, hidden=8, layers=2, seed=3)
    fn = FieldModel(p, trainable=False).acoustic_field(np.full(4, 0.1))
    pose = make_pose(rotation("y", 10.0), [0.0, 0.1, 0.0])
    frame = render_frame(fn, pose, spec).data
    patch, ac = render_patch(fn, pose, spec, 5, 3, 11)
    np.testing.assert_allclose(patch.data, frame[5:16, 3:14], rtol=1e-12)
    assert ac.shape == (11, 16, 3)
    with pytest.raises(ValueError):
        render_patch(fn, pose, spec, 20, 0, 11)


def test_scanline_gradient_wrt_acoustic_samples():
    rng = np.random.default_rng(0)
    n = 16
    w = rng.normal(size=n)

    def f(ac):
        img, _ = render_rays(lambda p: ac, np.zeros((1, 3)), np.array([[0, 0, 1.0]]),
                             (np.arange(n) + 0.5) / n, 1.0 / n)
        return (img[:, 0] * w).sum()

    rep = check_gradient(f, rng.uniform(0, 2, size=(n, 3)), rel_tol=1e-4)
    assert rep.passed, rep.max_rel_error


def test_quadrature_converges_to_fine_oracle():
    # smooth attenuation: renderer deviation from the 8x trapezoid oracle halves when H doubles
    def acoustic(pts):
        z = pts[:, 2]
        return np.stack([0.3 + 0.2 * np.sin(4 * z), 0.1 + 0.0 * z, 1.5 + np.cos(3 * z)], axis=1)

    errs = []
    for h in (64, 128, 256):
        spec = ProbeSpec(2, h, 1.5, 1.0)
        o, d = generate_rays(np.eye(4), spec)
        ref = oracle_scanlines(acoustic, o, d, spec, fine_factor=8)
        img, _ = render_rays(lambda p: Tensor(acoustic(p)), o, d, spec.sample_depths(), spec.dt)
        errs.append(np.max(np.abs(img.data - ref) / ref))
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    assert all(1.5 <= r <= 2.5 for r in ratios), ratios


def test_shadowed_sigma_gradients_vanish():
    # 16x16 patch over unit depth; step occluder c = 50 past t_bone = 0.4
    p, dt = 16, 1.0 / 16
    ts = (np.arange(p) + 0.5) * dt
    rng = np.random.default_rng(2)
    sigma0 = rng.uniform(0.05, 0.3, size=(p, p))          # (rays, samples)
    target = rng.uniform(0, 1, size=(p, p))
    beta = np.zeros((p, p))
    mu = np.tile(np.where(ts > 0.4, 50.0, 0.0), (p, 1))

    def loss(sig):
        ac = dc.stack([Tensor(beta), sig, Tensor(mu)], axis=2)
        img, _ = render_rays(lambda pts: dc.reshape(ac, (-1, 3)), np.zeros((p, 3)),
                             np.tile([0, 0, 1.0], (p, 1)), ts, dt)
        return photometric_loss(img, target, 0.5)

    s = Tensor(sigma0, requires_grad=True)
    dc.backward(loss(s))
    g = np.abs(s.grad)
    shadow = transmission(beta + mu, dt).data < 1e-3
    assert shadow.any()
    assert g[shadow].max() < 1e-3 * np.median(g[:, ts <= 0.4])
