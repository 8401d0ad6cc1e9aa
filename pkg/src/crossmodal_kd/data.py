"""Procedural paired RGB/thermal face scenes with 12 landmarks.

Landmark layout (index: name), in face coordinates where the face is an
ellipse with semi-axes ``a`` (horizontal) and ``b`` (vertical)::

    0 left-eye outer   1 left-eye inner   2 right-eye inner  3 right-eye outer
    4 left-eye center  5 right-eye center 6 nose tip         7 mouth left
    8 mouth right      9 chin            10 left jaw        11 right jaw

"Left" means image-left.  Head yaw is a rotation about the vertical axis by
``yaw * 60`` degrees; when ``yaw > 0.7`` the landmarks on the side turning
away from the camera are flagged invisible.  Sampling law per scene::

    yaw ~ U(0, yaw_max), yaw_dir ~ {-1, +1}, rotation ~ U(-rotation_max, rotation_max)

so the expected fraction of scenes with an invisible landmark is
``max(0, yaw_max - 0.7) / yaw_max``.

On disk a split is a directory holding ``manifest.json`` and ``samples.bin``.
Each sample record in ``samples.bin`` is, in order and little-endian:
rgb ``3*R*R`` float32 (C, H, W), thermal ``R*R`` float32, landmarks ``K*2``
float32 (x, y per keypoint), visibility ``K`` uint8, bbox 4 float32
(x, y, w, h), eye indices 2 int32 (left, right).
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ContractError, CorruptionError, FormatError
from .losses import SimCCTarget
from .seeding import derive_seed

FORMAT_VERSION = 1

# (u, v, depth) in units of the face semi-axes; depth drives yaw parallax
TEMPLATE = np.array(
    [
        [-0.55, -0.25, 0.2],
        [-0.18, -0.25, 0.3],
        [0.18, -0.25, 0.3],
        [0.55, -0.25, 0.2],
        [-0.365, -0.25, 0.3],
        [0.365, -0.25, 0.3],
        [0.0, 0.12, 0.6],
        [-0.3, 0.45, 0.35],
        [0.3, 0.45, 0.35],
        [0.0, 0.92, 0.3],
        [-0.85, 0.45, 0.0],
        [0.85, 0.45, 0.0],
    ]
)
NUM_KEYPOINTS = len(TEMPLATE)
EYE_CENTERS = (4, 5)
YAW_HIDE_THRESHOLD = 0.7
MAX_YAW_DEG = 60.0
# lateral offsets at or beyond this (toward the turned-away side) get hidden
FAR_SIDE_U = 0.25

BLOB_COLORS = np.array(
    [
        [1.0, 0.1, 0.1], [0.1, 0.9, 0.1], [0.1, 0.2, 1.0], [1.0, 0.9, 0.0],
        [0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.9, 0.0, 0.9],
        [0.0, 0.9, 0.9], [0.5, 0.2, 0.0], [0.2, 0.0, 0.5], [0.0, 0.45, 0.2],
    ]
)
# warm (+) / cool (-) thermal signature per landmark, before degradation
THERMAL_SIGNATURE = np.array(
    [0.05, 0.25, 0.25, 0.05, 0.1, 0.1, -0.2, 0.12, 0.12, 0.0, -0.05, -0.05]
)


@dataclass(frozen=True)
class DataConfig:
    resolution: int = 64
    k_split: int = 2
    yaw_max: float = 0.9
    rotation_max: float = 15.0
    illumination_min: float = 0.6
    illumination_max: float = 1.0
    noise_sigma: float = 0.01
    blur_sigma: float = 2.0
    compression: float = 0.6


@dataclass(frozen=True)
class SceneParams:
    center: tuple
    axes: tuple
    rotation_deg: float
    yaw: float
    yaw_dir: int
    texture_seed: int
    illumination: float
    noise_sigma: float
    blur_sigma: float = 0.0
    compression: float = 0.0
    resolution: int = 64


@dataclass
class Sample:
    rgb: np.ndarray  # 3 x R x R float32 in [0, 1]
    thermal: np.ndarray  # 1 x R x R float32 in [0, 1]
    landmarks: np.ndarray  # K x 2 float32, pixels
    visibility: np.ndarray  # K uint8
    bbox: np.ndarray  # x, y, w, h float32
    eyes: tuple = EYE_CENTERS


@dataclass
class Dataset:
    samples: list
    seed: int
    resolution: int
    k_split: int
    split: str = "train"
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    @property
    def num_keypoints(self) -> int:
        return NUM_KEYPOINTS

    def arrays(self) -> dict:
        """Stacked float64 views for training and evaluation."""
        return {
            "rgb": np.stack([s.rgb for s in self.samples]).astype(np.float64),
            "thermal": np.stack([s.thermal for s in self.samples]).astype(np.float64),
            "landmarks": np.stack([s.landmarks for s in self.samples]).astype(np.float64),
            "visibility": np.stack([s.visibility for s in self.samples]).astype(np.float64),
            "bbox": np.stack([s.bbox for s in self.samples]).astype(np.float64),
            "eyes": np.array([s.eyes for s in self.samples], dtype=np.int64),
        }

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(_manifest_core(self), sort_keys=True).encode())
        h.update(_payload(self))
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# geometry


def _rotation(theta_deg):
    t = math.radians(theta_deg)
    return np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])


def scene_landmarks(scene: SceneParams) -> tuple:
    """(K x 2 pixel coordinates, K visibility flags)."""
    a, b = scene.axes
    phi = math.radians(scene.yaw * MAX_YAW_DEG)
    u, v, depth = TEMPLATE[:, 0], TEMPLATE[:, 1], TEMPLATE[:, 2]
    u_rot = u * math.cos(phi) + scene.yaw_dir * depth * math.sin(phi)
    local = np.stack([u_rot * a, v * b], axis=1)
    pts = local @ _rotation(scene.rotation_deg).T + np.asarray(scene.center)
    visible = np.ones(NUM_KEYPOINTS, dtype=np.uint8)
    if scene.yaw > YAW_HIDE_THRESHOLD:
        visible[u * scene.yaw_dir >= FAR_SIDE_U] = 0
    return pts, visible


def scene_bbox(scene: SceneParams) -> np.ndarray:
    a, b = scene.axes
    t = math.radians(scene.rotation_deg)
    hx = math.sqrt((a * math.cos(t)) ** 2 + (b * math.sin(t)) ** 2)
    hy = math.sqrt((a * math.sin(t)) ** 2 + (b * math.cos(t)) ** 2)
    cx, cy = scene.center
    return np.array([cx - hx, cy - hy, 2 * hx, 2 * hy])


def _face_coords(scene: SceneParams):
    r = scene.resolution
    ys, xs = np.mgrid[0:r, 0:r] + 0.5
    d = np.stack([xs - scene.center[0], ys - scene.center[1]], axis=-1)
    local = d @ _rotation(scene.rotation_deg)  # inverse rotation
    return local[..., 0] / scene.axes[0], local[..., 1] / scene.axes[1], xs, ys


def face_mask(scene: SceneParams) -> np.ndarray:
    """Anti-aliased ellipse coverage in [0, 1] (about one pixel of soft edge)."""
    u, v, _, _ = _face_coords(scene)
    rho = np.sqrt(u * u + v * v)
    return np.clip((1.0 - rho) * min(scene.axes) + 0.5, 0.0, 1.0)


def _blob(xs, ys, pt, sigma):
    return np.exp(-((xs - pt[0]) ** 2 + (ys - pt[1]) ** 2) / (2 * sigma * sigma))


def render_rgb(scene: SceneParams) -> np.ndarray:
    """Textured face with a distinctly colored dot at every visible landmark."""
    r = scene.resolution
    rng = np.random.default_rng(scene.texture_seed)
    _, _, xs, ys = _face_coords(scene)
    mask = face_mask(scene)

    freqs = rng.uniform(0.15, 0.9, size=(4, 2))
    phases = rng.uniform(0, 2 * math.pi, size=4)
    waves = sum(np.sin(f[0] * xs + f[1] * ys + p) for f, p in zip(freqs, phases)) / 4
    grain = rng.uniform(-1.0, 1.0, size=(r, r))
    tex = 0.6 * waves + 0.4 * grain
    skin = np.array([0.85, 0.62, 0.48])[:, None, None] * (1.0 + 0.15 * tex)
    bg_tex = rng.uniform(-1.0, 1.0, size=(r, r))
    background = np.array([0.18, 0.22, 0.3])[:, None, None] * (1.0 + 0.3 * bg_tex)
    img = skin * mask + background * (1.0 - mask)

    pts, vis = scene_landmarks(scene)
    sigma = 0.9 * r / 64
    for k in np.flatnonzero(vis):
        g = 0.95 * _blob(xs, ys, pts[k], sigma)
        img = img * (1.0 - g) + BLOB_COLORS[k][:, None, None] * g
    return np.clip(img * scene.illumination, 0.0, 1.0)


def thermal_base(scene: SceneParams) -> np.ndarray:
    """Undegraded temperature map: warm face ellipse plus faint landmark signatures."""
    _, _, xs, ys = _face_coords(scene)
    mask = face_mask(scene)
    temp = 0.15 + 0.55 * mask
    pts, vis = scene_landmarks(scene)
    sigma = 1.5 * scene.resolution / 64
    for k in np.flatnonzero(vis):
        temp = temp + THERMAL_SIGNATURE[k] * mask * _blob(xs, ys, pts[k], sigma)
    return np.clip(temp, 0.0, 1.0)


def render_thermal(scene: SceneParams) -> np.ndarray:
    """Blurred, contrast-compressed, noisy temperature field (1 x R x R).

    Does not depend on ``scene.illumination``.
    """
    temp = thermal_base(scene)
    if scene.blur_sigma > 0:
        temp = gaussian_filter(temp, scene.blur_sigma, mode="nearest")
    temp = 0.5 + (1.0 - scene.compression) * (temp - 0.5)
    if scene.noise_sigma > 0:
        noise_rng = np.random.default_rng(derive_seed(scene.texture_seed, "thermal-noise"))
        temp = temp + noise_rng.normal(0.0, scene.noise_sigma, size=temp.shape)
    return np.clip(temp, 0.0, 1.0)[None]


def sample_scene(rng: np.random.Generator, cfg: DataConfig) -> SceneParams:
    s = cfg.resolution / 64.0
    a = rng.uniform(12.0, 17.0) * s
    b = a * rng.uniform(1.15, 1.35)
    center = (
        cfg.resolution / 2 + rng.uniform(-4.0, 4.0) * s,
        cfg.resolution / 2 + rng.uniform(-4.0, 4.0) * s,
    )
    return SceneParams(
        center=center,
        axes=(a, b),
        rotation_deg=rng.uniform(-cfg.rotation_max, cfg.rotation_max),
        yaw=rng.uniform(0.0, cfg.yaw_max),
        yaw_dir=int(rng.choice([-1, 1])),
        texture_seed=int(rng.integers(0, 2**62)),
        illumination=rng.uniform(cfg.illumination_min, cfg.illumination_max),
        noise_sigma=cfg.noise_sigma,
        blur_sigma=cfg.blur_sigma,
        compression=cfg.compression,
        resolution=cfg.resolution,
    )


def make_sample(scene: SceneParams) -> Sample:
    pts, vis = scene_landmarks(scene)
    return Sample(
        rgb=render_rgb(scene).astype(np.float32),
        thermal=render_thermal(scene).astype(np.float32),
        landmarks=pts.astype(np.float32),
        visibility=vis.astype(np.uint8),
        bbox=scene_bbox(scene).astype(np.float32),
        eyes=EYE_CENTERS,
    )


def generate(seed: int, n: int, cfg: DataConfig = DataConfig(), split: str = "train") -> Dataset:
    """Deterministic dataset of ``n`` paired samples for one split."""
    if n < 1:
        raise ContractError("n must be >= 1")
    samples = []
    for i in range(n):
        rng = np.random.default_rng(derive_seed(seed, split, i))
        samples.append(make_sample(sample_scene(rng, cfg)))
    return Dataset(samples, seed, cfg.resolution, cfg.k_split, split, asdict(cfg))


# ---------------------------------------------------------------------------
# SimCC targets


def encode_target(landmarks, visibility, resolution: int, k_split: int, label_smoothing: float = 0.0) -> SimCCTarget:
    """One-hot bin targets; bin = floor(coord * k_split + 0.5) clamped to [0, L-1].

    Accepts ``N x K x 2`` (or ``K x 2``) coordinates.  Invisible keypoints get
    all-zero rows.  ``label_smoothing`` spreads that much mass uniformly over
    the bins of visible rows (off by default).
    """
    pts = np.asarray(landmarks, dtype=np.float64)
    vis = np.asarray(visibility, dtype=np.float64)
    if pts.ndim == 2:
        pts, vis = pts[None], vis[None]
    if np.any(pts < 0) or np.any(pts >= resolution):
        raise ContractError(f"landmark coordinates must lie in [0, {resolution})")
    bins = resolution * k_split
    idx = np.clip(np.floor(pts * k_split + 0.5).astype(np.int64), 0, bins - 1)
    n, k, _ = pts.shape
    out = []
    for axis in range(2):
        t = np.zeros((n, k, bins))
        np.put_along_axis(t, idx[..., axis][..., None], 1.0, axis=-1)
        if label_smoothing:
            t = (1.0 - label_smoothing) * t + label_smoothing / bins
        out.append(t * vis[..., None])
    return SimCCTarget(out[0], out[1], vis)


# ---------------------------------------------------------------------------
# persistence


def _record_size(resolution: int, k: int) -> int:
    return 4 * (3 * resolution**2 + resolution**2 + 2 * k + 4) + k + 8


def _payload(ds: Dataset) -> bytes:
    parts = []
    for s in ds.samples:
        parts += [
            s.rgb.astype("<f4").tobytes(),
            s.thermal.astype("<f4").tobytes(),
            s.landmarks.astype("<f4").tobytes(),
            s.visibility.astype("u1").tobytes(),
            s.bbox.astype("<f4").tobytes(),
            np.asarray(s.eyes, dtype="<i4").tobytes(),
        ]
    return b"".join(parts)


def _manifest_core(ds: Dataset) -> dict:
    return {
        "version": FORMAT_VERSION,
        "seed": ds.seed,
        "n": len(ds),
        "resolution": ds.resolution,
        "K": NUM_KEYPOINTS,
        "k_split": ds.k_split,
        "split": ds.split,
        "config": ds.config,
    }


def save(ds: Dataset, directory, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` and ``samples.bin``; ``extra`` keys go into the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = _payload(ds)
    size = _record_size(ds.resolution, NUM_KEYPOINTS)
    manifest = {
        **_manifest_core(ds),
        "record_bytes": size,
        "offsets": [i * size for i in range(len(ds))],
        "checksum": hashlib.sha256(payload).hexdigest(),
        **(extra or {}),
    }
    tmp = directory / "samples.bin.tmp"
    tmp.write_bytes(payload)
    os.replace(tmp, directory / "samples.bin")
    text = json.dumps(manifest, sort_keys=True, indent=1) + "\n"
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(text)
    os.replace(tmp, directory / "manifest.json")
    return directory


def load(directory) -> Dataset:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"unreadable manifest in {directory}: {e}") from e
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"dataset format version {manifest.get('version')} != {FORMAT_VERSION}")
    payload = (directory / "samples.bin").read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest["checksum"]:
        raise CorruptionError(f"checksum mismatch for {directory / 'samples.bin'}")
    r, k = manifest["resolution"], manifest["K"]
    if k != NUM_KEYPOINTS:
        raise FormatError(f"dataset has K={k}, expected {NUM_KEYPOINTS}")
    size = _record_size(r, k)
    if len(payload) != size * manifest["n"]:
        raise FormatError("payload length does not match manifest")
    samples = []
    for off in manifest["offsets"]:
        pos = off

        def take(dtype, count):
            nonlocal pos
            arr = np.frombuffer(payload, dtype=dtype, count=count, offset=pos)
            pos += arr.nbytes
            return arr.copy()

        rgb = take("<f4", 3 * r * r).reshape(3, r, r).astype(np.float32)
        thermal = take("<f4", r * r).reshape(1, r, r).astype(np.float32)
        landmarks = take("<f4", 2 * k).reshape(k, 2).astype(np.float32)
        vis = take("u1", k)
        bbox = take("<f4", 4).astype(np.float32)
        eyes = tuple(int(e) for e in take("<i4", 2))
        samples.append(Sample(rgb, thermal, landmarks, vis, bbox, eyes))
    return Dataset(
        samples, manifest["seed"], r, manifest["k_split"], manifest["split"], manifest["config"]
    )
