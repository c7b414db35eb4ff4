"""Synthetic articulated-pose datasets: generation, projection, file I/O.

Poses are produced by forward kinematics from a rest pose with per-bone
random rotations inside anatomical-style angle ranges, so bone lengths are
constant across the whole dataset by construction.  The default camera is
orthographic at 100 px/m (1 px = 10 mm), which makes depth exactly
unobservable and gives the flow a clean multimodal posterior to model.

World axes follow image axes (x right, y down, z away from the camera).
"""

from dataclasses import dataclass, field

import numpy as np

from . import ndcore as nd
from . import posedisc
from ._binio import Reader, Writer
from .errors import ConfigError, NumericError, ShapeError
from .heatmap import HeatmapGaussian, SIGMA_GT, build_condition, synthesize_heatmap

DATASET_MAGIC = b"AFDS"
DATASET_VERSION = 1

# metres, by child-joint name; averaged adult proportions
BONE_LENGTHS = {
    "r_hip": 0.13, "r_knee": 0.45, "r_ankle": 0.45,
    "l_hip": 0.13, "l_knee": 0.45, "l_ankle": 0.45,
    "spine": 0.23, "thorax": 0.26, "head": 0.18,
    "l_shoulder": 0.18, "l_elbow": 0.28, "l_wrist": 0.25,
    "r_shoulder": 0.18, "r_elbow": 0.28, "r_wrist": 0.25,
}

# unit rest-pose directions (y points down, so the head direction is -y)
BONE_DIRECTIONS = {
    "r_hip": (-1, 0, 0), "r_knee": (0, 1, 0), "r_ankle": (0, 1, 0),
    "l_hip": (1, 0, 0), "l_knee": (0, 1, 0), "l_ankle": (0, 1, 0),
    "spine": (0, -1, 0), "thorax": (0, -1, 0), "head": (0, -1, 0),
    "l_shoulder": (1, 0, 0), "l_elbow": (0, 1, 0), "l_wrist": (0, 1, 0),
    "r_shoulder": (-1, 0, 0), "r_elbow": (0, 1, 0), "r_wrist": (0, 1, 0),
}

# radians, max rotation magnitude per axis of the bone ending at the joint
ANGLE_RANGES = {
    "r_hip": 0.12, "r_knee": 0.7, "r_ankle": 0.9,
    "l_hip": 0.12, "l_knee": 0.7, "l_ankle": 0.9,
    "spine": 0.3, "thorax": 0.3, "head": 0.4,
    "l_shoulder": 0.15, "l_elbow": 1.0, "l_wrist": 1.2,
    "r_shoulder": 0.15, "r_elbow": 1.0, "r_wrist": 1.2,
}


@dataclass(frozen=True)
class Camera:
    """Orthographic (scale px/m) or pinhole (focal px) camera."""

    kind: str = "ortho"
    scale: float = 100.0      # px per metre (ortho) or focal length px (persp)
    center: tuple = (128.0, 128.0)

    def __post_init__(self):
        if self.kind not in ("ortho", "persp"):
            raise ConfigError(f"unknown camera kind {self.kind!r}")
        if self.scale <= 0:
            raise ConfigError("camera scale must be positive")


def project(pose3d, cam):
    """3D joints (metres) -> 2D pixels under the given camera."""
    x = np.asarray(pose3d, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ShapeError(f"pose must be (J, 3), got {x.shape}")
    c = np.asarray(cam.center, dtype=np.float64)
    if cam.kind == "ortho":
        return cam.scale * x[:, :2] + c
    z = x[:, 2]
    if np.any(z <= 1e-9):
        raise ValueError("joint at or behind the camera plane")
    return cam.scale * x[:, :2] / z[:, None] + c


@dataclass
class Sample:
    pose3d: np.ndarray      # (J, 3) metres
    pose2d: np.ndarray      # (J, 2) px
    gaussians: np.ndarray   # (J, 6): A, mux, muy, S11, S12, S22 (px, px^2)
    occluded: np.ndarray    # (J,) bool
    camera: Camera

    def gaussian_list(self):
        return [HeatmapGaussian(*row) for row in self.gaussians]


@dataclass
class GenConfig:
    n_samples: int = 5000
    occlusion_rate: float = 0.3
    seed: int = 0
    camera: Camera = field(default_factory=Camera)
    bone_lengths: dict = field(default_factory=lambda: dict(BONE_LENGTHS))
    sigma_clean: float = SIGMA_GT
    sigma_occluded: tuple = (4.0, 10.0)
    root_jitter_xy: float = 0.05   # metres
    root_jitter_z: float = 0.3
    yaw_range: float = np.pi       # root yaw ~ U(-yaw_range, yaw_range)
    angle_scale: float = 1.0       # multiplier on joint angle ranges, in (0, 1]

    def __post_init__(self):
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ConfigError("occlusion rate must be in [0, 1]")
        if self.n_samples < 0:
            raise ConfigError("sample count must be nonnegative")
        if not 0.0 <= self.yaw_range <= np.pi:
            raise ConfigError("yaw range must be in [0, pi]")
        if not 0.0 < self.angle_scale <= 1.0:
            raise ConfigError("angle scale must be in (0, 1]")
        bad = {k: v for k, v in self.bone_lengths.items() if v <= 0}
        if bad:
            raise ConfigError(f"bone lengths must be positive: {bad}")


def _rot(a, b, c):
    ca, sa, cb, sb, cc, sc = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(c), np.sin(c)
    Rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    Ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    Rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def _fk_pose(skel, offsets, rng, cfg):
    J = skel.n_joints
    pose = np.zeros((J, 3))
    rots = [None] * J
    yaw = rng.uniform(-cfg.yaw_range, cfg.yaw_range)
    tmax = 0.25 * cfg.angle_scale
    tilt = rng.uniform(-tmax, tmax, size=2)
    rots[0] = _rot(tilt[0], yaw, tilt[1])
    pose[0, 0] = rng.uniform(-cfg.root_jitter_xy, cfg.root_jitter_xy)
    pose[0, 1] = rng.uniform(-cfg.root_jitter_xy, cfg.root_jitter_xy)
    pose[0, 2] = rng.uniform(-cfg.root_jitter_z, cfg.root_jitter_z)
    for j in range(1, J):
        par = skel.parents[j]
        amax = ANGLE_RANGES[skel.names[j]] * cfg.angle_scale
        ang = rng.uniform(-amax, amax, size=3)
        rots[j] = rots[par] @ _rot(*ang)
        pose[j] = pose[par] + rots[j] @ offsets[j]
    return pose


def generate_dataset(cfg):
    """Deterministic synthetic samples; each draws its own derived stream."""
    skel = posedisc.default_skeleton()
    offsets = np.zeros((skel.n_joints, 3))
    for j in range(1, skel.n_joints):
        name = skel.names[j]
        offsets[j] = np.array(BONE_DIRECTIONS[name], dtype=np.float64) * cfg.bone_lengths[name]
    samples = []
    for i in range(cfg.n_samples):
        rng = nd.rng_from(cfg.seed, f"sample{i}")
        pose3d = _fk_pose(skel, offsets, rng, cfg)
        pose2d = project(pose3d, cfg.camera)
        occluded = rng.uniform(size=skel.n_joints) < cfg.occlusion_rate
        gauss = np.zeros((skel.n_joints, 6))
        gauss[:, 0] = 1.0
        gauss[:, 1:3] = pose2d
        lo, hi = cfg.sigma_occluded
        for j in range(skel.n_joints):
            if occluded[j]:
                sx, sy = rng.uniform(lo, hi, size=2)
            else:
                sx = sy = cfg.sigma_clean
            gauss[j, 3] = sx * sx
            gauss[j, 5] = sy * sy
        samples.append(Sample(pose3d=pose3d, pose2d=pose2d, gaussians=gauss,
                              occluded=occluded, camera=cfg.camera))
    return samples


def sample_heatmaps(sample, w, h):
    """Synthesize every joint's heatmap of one sample, (J, h, w)."""
    maps = [synthesize_heatmap(g, w, h) for g in sample.gaussian_list()]
    return np.stack(maps)


# ---------------------------------------------------------------------------
# normalization

@dataclass
class NormStats:
    """Per-pose statistics needed to undo normalization."""

    mean2d: np.ndarray
    std2d: float
    mean3d: np.ndarray

    def __post_init__(self):
        if self.std2d <= 0:
            raise NumericError("2D pose std must be positive")


def normalize_2d(y):
    """Center a 2D pose on its mean and divide by its scalar std."""
    y = np.asarray(y, dtype=np.float64)
    mean = y.mean(axis=0)
    centered = y - mean
    std = float(centered.std())
    if std < 1e-12:
        raise NumericError("degenerate 2D pose: zero standard deviation")
    return centered / std, NormStats(mean2d=mean, std2d=std, mean3d=np.zeros(3))


def denormalize_2d(y_norm, stats):
    return np.asarray(y_norm, dtype=np.float64) * stats.std2d + stats.mean2d


def normalize_3d(x):
    """Mean-center a 3D pose (metres); returns (x_norm, mean)."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    return x - mean, mean


def hip_center(x, hip_index=0):
    """Shift the pose so the given hip/root joint sits at the origin."""
    x = np.asarray(x, dtype=np.float64)
    return x - x[hip_index]


def prepare_arrays(samples, hips=(0, 1, 4)):
    """Flatten a sample list into the arrays training and sampling consume.

    Returns a dict with x (N, 3J) mean-centered metres, y (N, 2J)
    normalized px, cond (N, 6(J-|hips|)) raw coefficients, cov_fit
    (N, J, 3) px^2 triples, occluded (N, J), and the per-pose NormStats.
    """
    n = len(samples)
    if n == 0:
        raise ValueError("empty sample list")
    J = samples[0].pose3d.shape[0]
    x = np.zeros((n, 3 * J))
    y = np.zeros((n, 2 * J))
    cond = np.zeros((n, 6 * (J - len(hips))))
    cov_fit = np.zeros((n, J, 3))
    occluded = np.zeros((n, J), dtype=bool)
    stats = []
    for i, s in enumerate(samples):
        x3, _ = normalize_3d(s.pose3d)
        y2, st = normalize_2d(s.pose2d)
        x[i] = x3.ravel()
        y[i] = y2.ravel()
        cond[i] = build_condition(s.gaussian_list(), hips)
        cov_fit[i] = s.gaussians[:, 3:6]
        occluded[i] = s.occluded
        stats.append(st)
    return {"x": x, "y": y, "cond": cond, "cov_fit": cov_fit,
            "occluded": occluded, "stats": stats, "J": J,
            "camera": samples[0].camera}


# ---------------------------------------------------------------------------
# dataset file

def write_dataset(samples, path):
    """Versioned little-endian binary with a trailing CRC32."""
    with open(path, "wb") as fh:
        w = Writer(fh)
        w.raw(DATASET_MAGIC)
        w.u32(DATASET_VERSION)
        J = samples[0].pose3d.shape[0] if samples else 0
        w.u32(J)
        w.u32(len(samples))
        for s in samples:
            w.array(s.pose3d.ravel())
            w.array(s.pose2d.ravel())
            w.u8(0 if s.camera.kind == "ortho" else 1)
            w.f64(s.camera.scale)
            w.f64(s.camera.center[0])
            w.f64(s.camera.center[1])
            w.array(s.gaussians.ravel())
            w.raw(np.packbits(s.occluded.astype(np.uint8), bitorder="little").tobytes())
        w.finish_crc()


def read_dataset(path):
    with open(path, "rb") as fh:
        r = Reader(fh)
        r.expect_magic(DATASET_MAGIC, DATASET_VERSION, "dataset")
        J = r.u32()
        count = r.u32()
        mask_bytes = (J + 7) // 8
        samples = []
        for _ in range(count):
            pose3d = r.array(3 * J).reshape(J, 3)
            pose2d = r.array(2 * J).reshape(J, 2)
            kind = "ortho" if r.u8() == 0 else "persp"
            scale = r.f64()
            center = (r.f64(), r.f64())
            gauss = r.array(6 * J).reshape(J, 6)
            bits = np.frombuffer(r.raw(mask_bytes), dtype=np.uint8)
            occ = np.unpackbits(bits, bitorder="little")[:J].astype(bool)
            samples.append(Sample(pose3d=pose3d, pose2d=pose2d, gaussians=gauss,
                                  occluded=occ,
                                  camera=Camera(kind=kind, scale=scale, center=center)))
        r.check_crc()
    return samples


# ---------------------------------------------------------------------------
# hypothesis file (written by sampling, read by evaluation)

HYP_MAGIC = b"AFHY"
HYP_VERSION = 1


def write_hypotheses(path, hyps, z0_first):
    """hyps: (n_samples, M, 3J) poses in mean-centered metres."""
    hyps = np.asarray(hyps, dtype=np.float64)
    if hyps.ndim != 3:
        raise ShapeError(f"expected (n, M, 3J), got {hyps.shape}")
    with open(path, "wb") as fh:
        w = Writer(fh)
        w.raw(HYP_MAGIC)
        w.u32(HYP_VERSION)
        w.u32(hyps.shape[2] // 3)
        w.u32(hyps.shape[0])
        w.u32(hyps.shape[1])
        w.u8(1 if z0_first else 0)
        w.array(hyps.ravel())
        w.finish_crc()


def read_hypotheses(path):
    """Returns (hyps (n, M, 3J), z0_first: bool)."""
    with open(path, "rb") as fh:
        r = Reader(fh)
        r.expect_magic(HYP_MAGIC, HYP_VERSION, "hypothesis")
        J, n, M = r.u32(), r.u32(), r.u32()
        z0_first = r.u8() == 1
        flat = r.array(n * M * 3 * J)
        r.check_crc()
    return flat.reshape(n, M, 3 * J), z0_first


# ---------------------------------------------------------------------------
# import hook for external datasets

_IMPORTERS = {}


def register_importer(name, fn):
    """Register a loader for an external dataset format.

    fn(path, **kwargs) must return a list of Sample.  Parsers for the
    licensed motion-capture datasets are intentionally not shipped; this
    hook is where one would plug them in.
    """
    _IMPORTERS[name] = fn


def import_external(name, path, **kwargs):
    if name not in _IMPORTERS:
        raise ConfigError(
            f"no importer registered for {name!r}; known: {sorted(_IMPORTERS)}")
    return _IMPORTERS[name](path, **kwargs)
