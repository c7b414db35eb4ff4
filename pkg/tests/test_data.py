"""Synthetic dataset tests: kinematics, projection, normalization, files."""

import os

import numpy as np
import pytest

from ambiflow import data, ndcore as nd, posedisc
from ambiflow.errors import (ChecksumError, ConfigError, FileFormatError,
                             NumericError, TruncatedFileError,
                             VersionMismatchError)


@pytest.fixture(scope="module")
def small_set():
    cfg = data.GenConfig(n_samples=50, occlusion_rate=0.4, seed=21)
    return cfg, data.generate_dataset(cfg)


def test_bone_lengths_constant(small_set):
    _, samples = small_set
    skel = posedisc.default_skeleton()
    ref = None
    for s in samples:
        lens = np.array([np.linalg.norm(s.pose3d[c] - s.pose3d[p])
                         for p, c in skel.bones])
        if ref is None:
            ref = lens
            for b, (p, c) in enumerate(skel.bones):
                assert lens[b] == pytest.approx(
                    data.BONE_LENGTHS[skel.names[c]], abs=1e-12)
        assert np.abs(lens - ref).max() < 1e-12


def test_generation_is_deterministic(small_set):
    cfg, samples = small_set
    again = data.generate_dataset(cfg)
    for a, b in zip(samples, again):
        assert np.array_equal(a.pose3d, b.pose3d)
        assert np.array_equal(a.gaussians, b.gaussians)
        assert np.array_equal(a.occluded, b.occluded)


def test_poses_fit_default_image(small_set):
    _, samples = small_set
    all2d = np.stack([s.pose2d for s in samples])
    assert all2d.min() > 0.0
    assert all2d.max() < 256.0


def test_occlusion_stats_and_sigmas(small_set):
    _, samples = small_set
    occ = np.stack([s.occluded for s in samples])
    assert 0.25 < occ.mean() < 0.55
    for s in samples:
        sig = np.sqrt(s.gaussians[:, [3, 5]])
        assert np.all(sig[~s.occluded] == 2.0)
        assert np.all(sig[s.occluded] >= 4.0)
        assert np.all(sig[s.occluded] <= 10.0)
        assert np.all(s.gaussians[:, 4] == 0.0)
        # detector mean stays on the true projection even when occluded
        assert np.array_equal(s.gaussians[:, 1:3], s.pose2d)


def test_project_ortho_hand_case():
    cam = data.Camera(kind="ortho", scale=1.0, center=(0.0, 0.0))
    out = data.project(np.array([[1.0, 2.0, 5.0]]), cam)
    assert np.array_equal(out, [[1.0, 2.0]])
    cam2 = data.Camera(kind="ortho", scale=100.0, center=(128.0, 128.0))
    out2 = data.project(np.array([[0.1, -0.2, 3.0]]), cam2)
    assert np.allclose(out2, [[138.0, 108.0]])


def test_project_persp_and_behind_plane():
    cam = data.Camera(kind="persp", scale=100.0, center=(0.0, 0.0))
    out = data.project(np.array([[1.0, 2.0, 4.0]]), cam)
    assert np.allclose(out, [[25.0, 50.0]])
    with pytest.raises(ValueError):
        data.project(np.array([[1.0, 2.0, -0.5]]), cam)


def test_camera_validation():
    with pytest.raises(ConfigError):
        data.Camera(kind="fisheye")
    with pytest.raises(ConfigError):
        data.Camera(scale=0.0)


def test_gen_config_validation():
    with pytest.raises(ConfigError):
        data.GenConfig(occlusion_rate=1.5)
    with pytest.raises(ConfigError):
        data.GenConfig(n_samples=-1)
    with pytest.raises(ConfigError):
        data.GenConfig(bone_lengths={"r_hip": -0.1})
    with pytest.raises(ConfigError):
        data.GenConfig(yaw_range=4.0)
    with pytest.raises(ConfigError):
        data.GenConfig(yaw_range=-0.1)
    with pytest.raises(ConfigError):
        data.GenConfig(angle_scale=0.0)
    with pytest.raises(ConfigError):
        data.GenConfig(angle_scale=1.2)


def test_pose_difficulty_knobs(small_set):
    cfg, samples = small_set
    # explicit defaults reproduce the default stream bit for bit
    same = data.generate_dataset(data.GenConfig(
        n_samples=5, occlusion_rate=0.4, seed=21,
        yaw_range=np.pi, angle_scale=1.0))
    for a, b in zip(same, samples[:5]):
        assert np.array_equal(a.pose3d, b.pose3d)
    # shrinking both knobs concentrates poses around the rest pose
    def mean_dev(angle_scale, yaw_range):
        cfg2 = data.GenConfig(n_samples=40, occlusion_rate=0.0, seed=21,
                              root_jitter_xy=0.0, root_jitter_z=0.0,
                              yaw_range=yaw_range, angle_scale=angle_scale)
        poses = np.stack([s.pose3d for s in data.generate_dataset(cfg2)])
        return np.linalg.norm(poses - poses.mean(axis=0), axis=-1).mean()
    assert mean_dev(0.3, 0.3) < mean_dev(1.0, np.pi)


def test_normalize_2d_roundtrip_and_degenerate():
    rng = nd.rng_from(30, "n2d")
    y = rng.uniform(40, 200, size=(16, 2))
    y_norm, stats = data.normalize_2d(y)
    assert np.abs(y_norm.mean(axis=0)).max() < 1e-12
    assert y_norm.std() == pytest.approx(1.0, rel=1e-12)
    back = data.denormalize_2d(y_norm, stats)
    assert np.abs(back - y).max() < 1e-9
    with pytest.raises(NumericError):
        data.normalize_2d(np.full((16, 2), 7.0))


def test_normalize_3d_and_hip_center():
    rng = nd.rng_from(31, "n3d")
    x = rng.normal(size=(16, 3))
    xn, mean = data.normalize_3d(x)
    assert np.abs(xn.mean(axis=0)).max() < 1e-12
    assert np.allclose(xn + mean, x)
    hc = data.hip_center(x)
    assert np.array_equal(hc[0], np.zeros(3))
    assert np.array_equal(data.hip_center(hc), hc)


def test_dataset_file_roundtrip(tmp_path, small_set):
    _, samples = small_set
    path = os.path.join(tmp_path, "d.afds")
    data.write_dataset(samples, path)
    back = data.read_dataset(path)
    assert len(back) == len(samples)
    for a, b in zip(samples, back):
        assert np.array_equal(a.pose3d, b.pose3d)
        assert np.array_equal(a.pose2d, b.pose2d)
        assert np.array_equal(a.gaussians, b.gaussians)
        assert np.array_equal(a.occluded, b.occluded)
        assert a.camera == b.camera


def test_dataset_file_error_kinds(tmp_path, small_set):
    _, samples = small_set
    path = os.path.join(tmp_path, "d.afds")
    data.write_dataset(samples[:3], path)
    blob = bytearray(open(path, "rb").read())

    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0x01
    open(path, "wb").write(bytes(flipped))
    with pytest.raises(ChecksumError):
        data.read_dataset(path)

    open(path, "wb").write(bytes(blob[: len(blob) // 2]))
    with pytest.raises(TruncatedFileError):
        data.read_dataset(path)

    wrong = bytearray(blob)
    wrong[:4] = b"ZZZZ"
    open(path, "wb").write(bytes(wrong))
    with pytest.raises(FileFormatError):
        data.read_dataset(path)

    vers = bytearray(blob)
    vers[4] = 200
    open(path, "wb").write(bytes(vers))
    with pytest.raises(VersionMismatchError):
        data.read_dataset(path)


def test_empty_dataset_roundtrip(tmp_path):
    path = os.path.join(tmp_path, "e.afds")
    data.write_dataset([], path)
    assert data.read_dataset(path) == []


def test_hypothesis_file_roundtrip(tmp_path):
    rng = nd.rng_from(33, "hyp")
    hyps = rng.normal(size=(5, 9, 48))
    path = os.path.join(tmp_path, "h.afhy")
    data.write_hypotheses(path, hyps, z0_first=True)
    back, z0_first = data.read_hypotheses(path)
    assert z0_first
    assert np.array_equal(back, hyps)
    data.write_hypotheses(path, hyps, z0_first=False)
    assert data.read_hypotheses(path)[1] is False


def test_prepare_arrays_layout(small_set):
    _, samples = small_set
    arrays = data.prepare_arrays(samples)
    n, J = len(samples), 16
    assert arrays["x"].shape == (n, 3 * J)
    assert arrays["y"].shape == (n, 2 * J)
    assert arrays["cond"].shape == (n, 6 * (J - 3))
    assert arrays["cov_fit"].shape == (n, J, 3)
    # x rows are mean-centered metres
    assert np.abs(arrays["x"].reshape(n, J, 3).mean(axis=1)).max() < 1e-12
    assert np.array_equal(arrays["cov_fit"][0], samples[0].gaussians[:, 3:6])


def test_importer_registry():
    calls = {}

    def fake(path, flip=False):
        calls["args"] = (path, flip)
        return []

    data.register_importer("testfmt", fake)
    assert data.import_external("testfmt", "/tmp/x", flip=True) == []
    assert calls["args"] == ("/tmp/x", True)
    with pytest.raises(ConfigError):
        data.import_external("nope", "/tmp/x")


def test_sample_heatmaps_shape(small_set):
    _, samples = small_set
    maps = data.sample_heatmaps(samples[0], 256, 256)
    assert maps.shape == (16, 256, 256)
    assert maps.max() <= 1.0 + 1e-12
