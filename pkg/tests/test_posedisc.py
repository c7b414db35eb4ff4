"""Skeleton, kinematic-chain features, and WGAN-GP discriminator tests."""

import numpy as np
import pytest

from ambiflow import ndcore as nd, posedisc
from ambiflow.errors import ShapeError
from fdcheck import fd_grad, rel_err


def _rand_poses(B, seed=0, scale=0.3):
    return nd.rng_from(seed, "poses").normal(scale=scale, size=(B, 48))


def test_default_skeleton_shape():
    s = posedisc.default_skeleton()
    assert s.n_joints == 16
    assert s.parents[0] == -1
    assert len(s.bones) == 15
    assert s.hips == (0, 1, 4)
    C = s.bone_matrix()
    assert C.shape == (16, 15)
    assert np.all(C.sum(axis=0) == 0)
    assert np.all(np.abs(C).sum(axis=0) == 2)


def test_skeleton_validation():
    with pytest.raises(ValueError):
        posedisc.Skeleton(names=("a", "b"), parents=(0, -1), hips=(0,))
    with pytest.raises(ValueError):
        posedisc.Skeleton(names=("a", "b", "c"), parents=(-1, 2, 1), hips=(0,))


def test_kcs_single_bone_value():
    """A lone offset of 0.5 along x gives a squared bone length of 0.25."""
    s = posedisc.Skeleton(names=("root", "tip"), parents=(-1, 0), hips=(0,))
    x = np.zeros((1, 6))
    x[0, 3] = 0.5
    psi = posedisc.kcs(nd.constant(x), s).data
    assert psi.shape == (1, 1, 1)
    assert psi[0, 0, 0] == pytest.approx(0.25, abs=1e-15)


def test_kcs_rotation_invariance():
    s = posedisc.default_skeleton()
    x = _rand_poses(3, seed=1)
    rng = nd.rng_from(2, "rot")
    A = rng.normal(size=(3, 3))
    Q, _ = np.linalg.qr(A)
    rotated = (x.reshape(3, 16, 3) @ Q.T).reshape(3, 48)
    a = posedisc.kcs(nd.constant(x), s).data
    b = posedisc.kcs(nd.constant(rotated), s).data
    assert np.abs(a - b).max() < 1e-10


def test_kcs_translation_invariance():
    s = posedisc.default_skeleton()
    x = _rand_poses(2, seed=3)
    shifted = (x.reshape(2, 16, 3) + np.array([0.7, -1.1, 0.4])).reshape(2, 48)
    a = posedisc.kcs(nd.constant(x), s).data
    b = posedisc.kcs(nd.constant(shifted), s).data
    assert np.abs(a - b).max() < 1e-12


def test_disc_score_shape_and_determinism():
    disc = posedisc.Discriminator(seed=5)
    x = nd.constant(_rand_poses(4, seed=4))
    s1 = disc.score(x).data
    s2 = disc.score(x).data
    assert s1.shape == (4,)
    assert np.array_equal(s1, s2)


def test_gradient_penalty_linear_unit_norm_is_zero():
    """f(x) = w.x with |w| = 1 has gradient norm 1 everywhere, so GP = 0."""
    w = np.zeros(48)
    w[7] = 1.0
    wt = nd.constant(w.reshape(48, 1))

    def score(x):
        return nd.reshape(nd.matmul(x, wt), (x.shape[0],))

    real = nd.constant(_rand_poses(6, seed=6))
    fake = nd.constant(_rand_poses(6, seed=7))
    gp = posedisc.gradient_penalty(score, real, fake, rng=nd.rng_from(0, "e"))
    assert float(gp.data) == pytest.approx(0.0, abs=1e-12)


def test_gradient_penalty_constant_score_is_lambda():
    def score(x):
        return nd.mul(nd.tsum(nd.mul(x, 0.0), axis=1), 1.0)

    real = nd.constant(_rand_poses(5, seed=8))
    fake = nd.constant(_rand_poses(5, seed=9))
    gp = posedisc.gradient_penalty(score, real, fake, lam_gp=10.0,
                                   rng=nd.rng_from(1, "e"))
    # |grad| = 0 everywhere, so every (|grad| - 1)^2 term is exactly 1
    assert float(gp.data) == pytest.approx(10.0, abs=1e-12)


def test_gradient_penalty_matches_fd_on_disc_params():
    disc = posedisc.Discriminator(seed=11)
    real = _rand_poses(3, seed=12)
    fake = _rand_poses(3, seed=13)

    def gp_value():
        return float(posedisc.gradient_penalty(
            disc.score, nd.constant(real), nd.constant(fake),
            rng=nd.rng_from(2, "e")).data)

    gp = posedisc.gradient_penalty(disc.score, nd.constant(real),
                                   nd.constant(fake), rng=nd.rng_from(2, "e"))
    grads = nd.grad(gp, disc.parameters())
    rng = nd.rng_from(3, "pick")
    checked = 0
    for p, g in zip(disc.parameters(), grads):
        flat = p.data.ravel()
        for _ in range(2):
            i = int(rng.integers(flat.size))
            eps = 1e-6
            old = flat[i]
            flat[i] = old + eps
            up = gp_value()
            flat[i] = old - eps
            down = gp_value()
            flat[i] = old
            fd = (up - down) / (2 * eps)
            if abs(fd) < 1e-10 and abs(g.data.ravel()[i]) < 1e-10:
                checked += 1
                continue
            assert rel_err(np.array([fd]), np.array([g.data.ravel()[i]])) < 1e-4
            checked += 1
    assert checked >= 24


def test_gradient_penalty_validation():
    disc = posedisc.Discriminator(seed=1)
    with pytest.raises(ValueError):
        posedisc.gradient_penalty(disc.score, nd.constant(np.zeros((0, 48))),
                                  nd.constant(np.zeros((0, 48))))
    with pytest.raises(ShapeError):
        posedisc.gradient_penalty(disc.score, nd.constant(np.zeros((2, 48))),
                                  nd.constant(np.zeros((3, 48))))


def test_disc_and_gen_losses_are_finite_and_opposed():
    disc = posedisc.Discriminator(seed=2)
    real = nd.constant(_rand_poses(4, seed=20))
    fake = nd.constant(_rand_poses(4, seed=21))
    dl = posedisc.disc_loss(disc, real, fake, rng=nd.rng_from(4, "e"))
    gl = posedisc.gen_loss(disc, fake)
    assert np.isfinite(dl.data)
    assert np.isfinite(gl.data)
    # generator loss is the negated fake score mean
    fake_mean = float(nd.tmean(disc.score(fake)).data)
    assert float(gl.data) == pytest.approx(-fake_mean, abs=1e-12)


def test_gen_loss_gradient_matches_fd():
    disc = posedisc.Discriminator(seed=7)
    fake = _rand_poses(2, seed=22)

    def f(v):
        return float(posedisc.gen_loss(disc, nd.constant(v.reshape(2, 48))).data)

    ft = nd.Tensor(fake.copy(), requires_grad=True)
    g = nd.grad(posedisc.gen_loss(disc, ft), ft)
    num = fd_grad(f, fake.ravel().copy())
    assert rel_err(num, g.data.ravel()) < 1e-4
