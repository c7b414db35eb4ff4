"""Coupling-flow tests: invertibility, clamping, structure, serialization."""

import os

import numpy as np
import pytest

from ambiflow import flow, ndcore as nd, posedisc
from ambiflow.errors import (ChecksumError, FileFormatError, ShapeError,
                             VersionMismatchError)


def _model(seed=0, randomized=True):
    from ambiflow.heatmap import condition_standardizer

    shift, scale = condition_standardizer((128.0, 128.0))
    m = flow.FlowModel(seed=seed, cond_shift=shift, cond_scale=scale)
    if randomized:
        m.randomize_weights(nd.rng_from(seed, "w"), scale=0.5)
    return m


def _inputs(model, B, seed=1):
    rng = nd.rng_from(seed, "inputs")
    x = rng.normal(scale=0.3, size=(B, model.dim_x))
    cond = np.zeros((B, model.cond_in))
    cond[:, 1::6] = rng.uniform(40, 210, size=(B, model.cond_in // 6))
    cond[:, 2::6] = rng.uniform(40, 210, size=(B, model.cond_in // 6))
    cond[:, 3::6] = rng.uniform(4, 90, size=(B, model.cond_in // 6))
    cond[:, 5::6] = rng.uniform(4, 90, size=(B, model.cond_in // 6))
    cond[:, 0::6] = 1.0
    return x, cond


def test_soft_clamp_bounds_and_slope():
    r = np.linspace(-500, 500, 2001)
    out = flow.soft_clamp(nd.constant(r), alpha=2.0).data
    assert np.all(np.abs(out) < 2.0)
    assert np.all(np.diff(out) > 0)
    near0 = flow.soft_clamp(nd.constant(np.array([1e-9])), alpha=2.0).data
    assert near0[0] == pytest.approx(1e-9 * 2 / np.pi * 2 / 2, rel=1e-6)


def test_soft_clamp_rejects_bad_alpha():
    with pytest.raises(ValueError):
        flow.soft_clamp(nd.constant(np.ones(3)), alpha=0.0)


def test_identity_at_init():
    """Zero-initialized subnets make every block the identity map."""
    m = _model(randomized=False)
    x, cond = _inputs(m, 4)
    with nd.no_grad():
        y, z = m.forward(nd.constant(x), nd.constant(cond))
    out = np.concatenate([y.data, z.data], axis=1)
    expect = x.copy().T
    for p in m.perms:
        expect = expect[p]
    assert np.abs(out - expect.T).max() < 1e-14


def test_forward_inverse_roundtrip():
    m = _model()
    x, cond = _inputs(m, 8)
    with nd.no_grad():
        y, z = m.forward(nd.constant(x), nd.constant(cond))
        back = m.inverse(y, z, nd.constant(cond))
    assert np.abs(back.data - x).max() < 1e-10


def test_inverse_forward_roundtrip():
    m = _model(seed=3)
    _, cond = _inputs(m, 8)
    rng = nd.rng_from(5, "yz")
    y = rng.normal(size=(8, m.dim_y))
    z = rng.normal(size=(8, m.dim_z))
    with nd.no_grad():
        x = m.inverse(nd.constant(y), nd.constant(z), nd.constant(cond))
        y2, z2 = m.forward(x, nd.constant(cond))
    assert np.abs(y2.data - y).max() < 1e-10
    assert np.abs(z2.data - z).max() < 1e-10


def test_logdet_matches_numerical_jacobian():
    m = _model(seed=2)
    x, cond = _inputs(m, 1)
    ld = m.log_abs_det_jacobian(x[0], cond[0])
    eps = 1e-6
    cols = []
    for i in range(m.dim_x):
        xp, xm = x.copy(), x.copy()
        xp[0, i] += eps
        xm[0, i] -= eps
        with nd.no_grad():
            yp, zp = m.forward(nd.constant(xp), nd.constant(cond))
            ym, zm = m.forward(nd.constant(xm), nd.constant(cond))
        fp = np.concatenate([yp.data, zp.data], axis=1)
        fm = np.concatenate([ym.data, zm.data], axis=1)
        cols.append((fp - fm)[0] / (2 * eps))
    _, num = np.linalg.slogdet(np.stack(cols, axis=1))
    assert ld == pytest.approx(num, abs=1e-5)


def test_logdet_zero_at_identity_init():
    m = _model(randomized=False)
    x, cond = _inputs(m, 3)
    assert np.abs(m.log_abs_det_jacobian(x, cond)).max() == 0.0


def test_condition_changes_output():
    m = _model(seed=4)
    x, cond = _inputs(m, 2)
    cond2 = cond.copy()
    cond2[:, 3] *= 2.0
    with nd.no_grad():
        y1, _ = m.forward(nd.constant(x), nd.constant(cond))
        y2, _ = m.forward(nd.constant(x), nd.constant(cond2))
    assert np.abs(y1.data - y2.data).max() > 1e-6


def test_sample_hypotheses_shapes_and_z0():
    m = _model(seed=6)
    _, cond = _inputs(m, 1)
    y = nd.rng_from(0, "y").normal(size=m.dim_y)
    hyps = m.sample_hypotheses(y, cond[0], M=5, rng=nd.rng_from(1, "s"),
                               prepend_z0=True)
    assert hyps.shape == (6, m.dim_x)
    z0 = m.sample_hypotheses(y, cond[0], M=1, force_z0=True)
    # different batch shapes may take different BLAS kernels; allow rounding
    assert np.abs(hyps[0] - z0[0]).max() < 1e-12
    again = m.sample_hypotheses(y, cond[0], M=5, rng=nd.rng_from(1, "s"),
                                prepend_z0=True)
    assert np.abs(again - hyps).max() == 0.0


def test_sample_hypotheses_validation():
    m = _model(seed=6)
    _, cond = _inputs(m, 1)
    y = np.zeros(m.dim_y)
    with pytest.raises(ValueError):
        m.sample_hypotheses(y, cond[0], M=0, force_z0=True)
    with pytest.raises(ValueError):
        m.sample_hypotheses(y, cond[0], M=3)


def test_shape_errors():
    m = _model()
    with pytest.raises(ShapeError):
        m.forward(nd.constant(np.zeros((2, 47))), nd.constant(np.zeros((2, m.cond_in))))
    with pytest.raises(ShapeError):
        m.forward(nd.constant(np.zeros((2, 48))), nd.constant(np.zeros((2, 10))))
    with pytest.raises(ShapeError):
        m.inverse(nd.constant(np.zeros((2, m.dim_y))),
                  nd.constant(np.zeros((3, m.dim_z))),
                  nd.constant(np.zeros((2, m.cond_in))))


def test_save_load_roundtrip(tmp_path):
    m = _model(seed=9)
    disc = posedisc.Discriminator(seed=3)
    path = os.path.join(tmp_path, "m.afnf")
    flow.save_model(m, path, disc=disc)
    m2, d2 = flow.load_model(path)
    for a, b in zip(m.parameters(), m2.parameters()):
        assert np.array_equal(a.data, b.data)
    for a, b in zip(disc.parameters(), d2.parameters()):
        assert np.array_equal(a.data, b.data)
    for p, q in zip(m.perms, m2.perms):
        assert np.array_equal(p, q)
    x, cond = _inputs(m, 2)
    with nd.no_grad():
        y1, z1 = m.forward(nd.constant(x), nd.constant(cond))
        y2, z2 = m2.forward(nd.constant(x), nd.constant(cond))
    assert np.array_equal(y1.data, y2.data)
    assert np.array_equal(z1.data, z2.data)


def test_load_detects_corruption(tmp_path):
    m = _model(seed=9)
    path = os.path.join(tmp_path, "m.afnf")
    flow.save_model(m, path)
    blob = bytearray(open(path, "rb").read())
    blob[len(blob) // 3] ^= 0x40
    open(path, "wb").write(bytes(blob))
    with pytest.raises(ChecksumError):
        flow.load_model(path)


def test_load_rejects_magic_and_version(tmp_path):
    m = _model(seed=9)
    path = os.path.join(tmp_path, "m.afnf")
    flow.save_model(m, path)
    blob = bytearray(open(path, "rb").read())
    wrong_magic = bytes(b"XXXX") + bytes(blob[4:])
    open(path, "wb").write(wrong_magic)
    with pytest.raises(FileFormatError):
        flow.load_model(path)
    blob[4] = 99
    open(path, "wb").write(bytes(blob))
    with pytest.raises(VersionMismatchError):
        flow.load_model(path)


def test_block_split_dimensions():
    m = flow.FlowModel()
    assert (m.dim_x, m.dim_y, m.dim_z) == (48, 32, 16)
    assert (m.d1, m.d2) == (24, 24)
    assert m.cond_in == 78
    assert len(m.blocks) == 8
    for p, ip in zip(m.perms, m.inv_perms):
        assert np.array_equal(np.sort(p), np.arange(48))
        assert np.array_equal(p[ip], np.arange(48))
