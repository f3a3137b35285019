"""Sequences, on-disk dataset format, preprocessing, augmentation and a synthetic scene generator.

On-disk layout (all paths relative to the manifest)::

    manifest.json
    <interaction>/<sequence>/f00.ppm ... f09.ppm   # 50x50 binary PPM (P6), 8-bit
    <interaction>/<sequence>/pose.csv              # k rows x 54 columns

Pose vectors are 18 keypoints x (x, y, confidence) in normalized image
coordinates, keypoint order: nose, neck, r-shoulder, r-elbow, r-wrist,
l-shoulder, l-elbow, l-wrist, r-hip, r-knee, r-ankle, l-hip, l-knee,
l-ankle, r-eye, l-eye, r-ear, l-ear.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .models import IMAGE_SIZE, POSE_DIM, AddresseeLabel

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
FRAME_RATE_HZ = 12.5
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])
KEYPOINTS = ("nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist",
             "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "r_eye", "l_eye", "r_ear", "l_ear")


class DatasetError(ValueError):
    """Malformed manifest, image or pose file."""


@dataclass
class UtteranceSequence:
    faces: np.ndarray           # (k, 50, 50, 3) in [0, 1]
    poses: np.ndarray           # (k, 54)
    label: AddresseeLabel
    source_id: str = "0"
    flags: tuple = ()

    def __post_init__(self):
        self.faces = np.asarray(self.faces, dtype=np.float32)
        self.poses = np.asarray(self.poses, dtype=np.float32)
        self.label = AddresseeLabel.coerce(self.label)
        k = self.faces.shape[0] if self.faces.ndim == 4 else 0
        if k < 1 or self.faces.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE, 3):
            raise DatasetError(f"faces must be (k>=1, {IMAGE_SIZE}, {IMAGE_SIZE}, 3), got {self.faces.shape}")
        if self.poses.shape != (k, POSE_DIM):
            raise DatasetError(f"poses must be ({k}, {POSE_DIM}), got {self.poses.shape}")
        if not np.isfinite(self.poses).all():
            raise DatasetError("pose vectors contain non-finite entries")

    @property
    def k(self) -> int:
        return self.faces.shape[0]

    @property
    def frames(self) -> list:
        return list(zip(self.faces, self.poses))


def stack_sequences(seqs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """-> faces (n, k, 50, 50, 3), poses (n, k, 54), labels (n,)"""
    seqs = list(seqs)
    if not seqs:
        return (np.zeros((0, 1, IMAGE_SIZE, IMAGE_SIZE, 3), np.float32),
                np.zeros((0, 1, POSE_DIM), np.float32), np.zeros(0, dtype=int))
    ks = {s.k for s in seqs}
    if len(ks) != 1:
        raise DatasetError(f"sequence lengths differ: {sorted(ks)}")
    return (np.stack([s.faces for s in seqs]), np.stack([s.poses for s in seqs]),
            np.array([int(s.label) for s in seqs]))


def fill_missing_faces(faces: np.ndarray, present) -> tuple[np.ndarray, bool]:
    """Repeat the last detected face over undetected frames; frames before the
    first detection are zero-filled.  Returns (faces, zero_filled)."""
    faces = np.array(faces, dtype=np.float32, copy=True)
    present = np.asarray(present, dtype=bool)
    last = None
    zero_filled = False
    for t in range(faces.shape[0]):
        if present[t]:
            last = faces[t]
        elif last is not None:
            faces[t] = last
        else:
            faces[t] = 0.0
            zero_filled = True
    return faces, zero_filled


# -- file formats -------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """image: (H, W, 3) floats in [0, 1] or uint8."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path) -> np.ndarray:
    """-> (H, W, 3) float32 in [0, 1]."""
    blob = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PPM header")
        tokens.append(blob[start:pos])
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise DatasetError(f"{path}: not an 8-bit P6 PPM")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(blob, dtype=np.uint8, offset=pos + 1)
    if data.size != w * h * 3:
        raise DatasetError(f"{path}: expected {w * h * 3} pixel bytes, found {data.size}")
    return data.reshape(h, w, 3).astype(np.float32) / np.float32(255.0)


def write_pose_csv(path, poses: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.asarray(poses):
            w.writerow([repr(float(v)) for v in row])


def read_pose_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if len(row) != POSE_DIM:
                raise DatasetError(f"{path}: row {i} has {len(row)} values, expected {POSE_DIM}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise DatasetError(f"{path}: row {i} is not numeric") from None
    return np.array(rows, dtype=np.float32).reshape(-1, POSE_DIM)


def save_dataset(seqs, out_dir) -> Path:
    """Write sequences plus manifest.json under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seqs = list(seqs)
    by_id: dict[str, list] = {}
    for s in seqs:
        by_id.setdefault(s.source_id, []).append(s)
    interactions = []
    k = seqs[0].k if seqs else 0
    for iid, group in by_id.items():
        entries = []
        for j, s in enumerate(group):
            rel = Path(iid) / f"seq{j:04d}"
            (out / rel).mkdir(parents=True, exist_ok=True)
            frames = []
            for t, face in enumerate(s.faces):
                name = rel / f"f{t:02d}.ppm"
                write_ppm(out / name, face)
                frames.append(name.as_posix())
            write_pose_csv(out / rel / "pose.csv", s.poses)
            entry = {"frames": frames, "pose": (rel / "pose.csv").as_posix(),
                     "label": s.label.name, "k": s.k}
            if s.flags:
                entry["flags"] = list(s.flags)
            entries.append(entry)
        interactions.append({"id": iid, "sequences": entries})
    manifest = {"version": MANIFEST_VERSION, "k": k, "frame_rate_hz": FRAME_RATE_HZ,
                "pose_layout": [f"{kp}.{c}" for kp in KEYPOINTS for c in ("x", "y", "conf")],
                "interactions": interactions}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_dataset(manifest_path) -> list[UtteranceSequence]:
    """Read every sequence listed in a manifest, grouped by interaction in manifest order."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as e:
        raise DatasetError(f"{manifest_path}: invalid JSON ({e})") from None
    root = manifest_path.parent
    seqs = []
    ks = set()
    for inter in manifest.get("interactions", []):
        iid = str(inter["id"])
        for entry in inter.get("sequences", []):
            frames = []
            for rel in entry["frames"]:
                p = root / rel
                if not p.exists():
                    raise FileNotFoundError(f"missing frame image: {p}")
                img = read_ppm(p)
                if img.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
                    raise DatasetError(f"{p}: image is {img.shape[1]}x{img.shape[0]}, expected "
                                       f"{IMAGE_SIZE}x{IMAGE_SIZE}")
                frames.append(img)
            pose_path = root / entry["pose"]
            if not pose_path.exists():
                raise FileNotFoundError(f"missing pose file: {pose_path}")
            poses = read_pose_csv(pose_path)
            if len(poses) != len(frames):
                raise DatasetError(f"{pose_path}: {len(poses)} pose rows for {len(frames)} frames")
            try:
                label = AddresseeLabel.coerce(entry["label"])
            except ValueError as e:
                raise DatasetError(f"{manifest_path}: {e}") from None
            ks.add(len(frames))
            seqs.append(UtteranceSequence(np.stack(frames), poses, label, iid, tuple(entry.get("flags", ()))))
    if len(ks) > 1:
        raise DatasetError(f"{manifest_path}: sequence lengths differ within one dataset: {sorted(ks)}")
    return seqs


def group_by_interaction(seqs) -> dict[str, list[UtteranceSequence]]:
    out: dict[str, list] = {}
    for s in seqs:
        out.setdefault(s.source_id, []).append(s)
    return out


# -- normalization ------------------------------------------------------------------------

def channel_stats(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(faces, dtype=np.float64).reshape(-1, 3)
    return x.mean(axis=0), x.std(axis=0)


def normalize(frames: np.ndarray, mode: str = "TRUE_STATS", mean=None, std=None) -> np.ndarray:
    """Per-channel (x - mean) / std over the trailing RGB axis.

    TRUE_STATS uses ``mean``/``std`` when given (training-fold statistics),
    otherwise statistics of ``frames`` themselves.  FIXED_REF uses the
    ImageNet reference constants.
    """
    frames = np.asarray(frames)
    mode = mode.upper()
    if mode == "FIXED_REF":
        mean, std = IMAGENET_MEAN, IMAGENET_STD
    elif mode == "TRUE_STATS":
        if mean is None or std is None:
            mean, std = channel_stats(frames)
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    std = np.asarray(std, dtype=np.float64)
    if (std < 1e-6).any():
        log.warning("channel std below 1e-6 (%s); flooring", std)
        std = np.maximum(std, 1e-6)
    out = (frames - np.asarray(mean)) / std
    return out.astype(frames.dtype if np.issubdtype(frames.dtype, np.floating) else np.float32)


@dataclass
class FrameNormalizer:
    """Fits TRUE_STATS statistics on training frames and records which interactions they came from."""
    mode: str = "TRUE_STATS"
    mean_: np.ndarray | None = None
    std_: np.ndarray | None = None
    source_ids_: frozenset = frozenset()

    def fit(self, faces: np.ndarray, source_ids=()) -> "FrameNormalizer":
        if self.mode.upper() == "TRUE_STATS":
            self.mean_, self.std_ = channel_stats(faces)
        else:
            self.mean_, self.std_ = IMAGENET_MEAN.copy(), IMAGENET_STD.copy()
        self.source_ids_ = frozenset(str(s) for s in source_ids)
        return self

    def transform(self, faces: np.ndarray) -> np.ndarray:
        if self.mean_ is None:
            raise RuntimeError("FrameNormalizer is not fitted")
        return normalize(faces, "TRUE_STATS", self.mean_, self.std_)


# -- augmentation -------------------------------------------------------------------------

@dataclass
class AugmentParams:
    brightness: float = 0.2
    contrast: float = 0.4
    saturation: float = 0.45
    hue: float = 0.135
    angle: float = 25.0
    crop: int = 44
    kernel_size: int = 7
    sigma: float = 0.8

    def __post_init__(self):
        for name, hi in (("brightness", 0.5), ("contrast", 0.5), ("saturation", 0.5), ("hue", 0.25)):
            v = getattr(self, name)
            if not 0.0 <= v <= hi:
                raise ValueError(f"{name} must lie in [0, {hi}], got {v}")
        if not 0 <= self.angle <= 45:
            raise ValueError(f"angle must lie in [0, 45], got {self.angle}")
        if not 1 <= self.crop <= IMAGE_SIZE:
            raise ValueError(f"crop must lie in [1, {IMAGE_SIZE}], got {self.crop}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, IMAGE_SIZE, 1, 1.0)


def _rgb_to_hsv(rgb):
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    d = mx - mn
    safe = np.where(d > 0, d, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(d > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, d / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


def _hsv_to_rgb(hsv):
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    choices = [np.stack(c, axis=-1) for c in ((v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q))]
    out = np.zeros_like(hsv)
    for j, c in enumerate(choices):
        out = np.where((i == j)[..., None], c, out)
    return out


def _gray(x):
    return x @ np.array([0.299, 0.587, 0.114], dtype=x.dtype)


def rotate(frame: np.ndarray, degrees: float) -> np.ndarray:
    """Counter-clockwise rotation about the image centre; uncovered pixels are black."""
    return ndimage.rotate(frame, degrees, axes=(1, 0), reshape=False, order=1, mode="constant", cval=0.0)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-x * x / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(frame: np.ndarray, size: int, sigma: float) -> np.ndarray:
    k = gaussian_kernel(size, sigma)
    out = ndimage.convolve1d(frame, k, axis=0, mode="reflect")
    return ndimage.convolve1d(out, k, axis=1, mode="reflect")


def resize(frame: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of an (h, w, 3) image to (size, size, 3), pixel-centre aligned."""
    h, w, _ = frame.shape
    ys = (np.arange(size) + 0.5) * h / size - 0.5
    xs = (np.arange(size) + 0.5) * w / size - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([ndimage.map_coordinates(frame[..., c], [yy, xx], order=1, mode="nearest")
                     for c in range(3)], axis=-1)


def augment(frame: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Color jitter, rotation, random crop + resize, Gaussian blur -- in that order.

    Each stage is skipped when its strength is zero, so zero-strength params
    return the input unchanged.
    """
    x = np.asarray(frame, dtype=np.float32)
    out = x
    dtype = x.dtype
    if params.brightness > 0:
        out = out * rng.uniform(1 - params.brightness, 1 + params.brightness)
    if params.contrast > 0:
        m = _gray(out).mean()
        out = (out - m) * rng.uniform(1 - params.contrast, 1 + params.contrast) + m
    if params.saturation > 0:
        g = _gray(out)[..., None]
        out = (out - g) * rng.uniform(1 - params.saturation, 1 + params.saturation) + g
    if params.hue > 0:
        hsv = _rgb_to_hsv(np.clip(out, 0.0, 1.0))
        hsv[..., 0] = (hsv[..., 0] + rng.uniform(-params.hue, params.hue)) % 1.0
        out = _hsv_to_rgb(hsv)
    if out is not x:
        out = np.clip(out, 0.0, 1.0)
    if params.angle > 0:
        out = rotate(out, rng.uniform(-params.angle, params.angle))
    if params.crop < IMAGE_SIZE:
        top, left = rng.integers(0, IMAGE_SIZE - params.crop + 1, size=2)
        out = resize(out[top:top + params.crop, left:left + params.crop], IMAGE_SIZE)
    if params.kernel_size > 1:
        out = gaussian_blur(out, params.kernel_size, params.sigma)
    if out is x:
        return x
    return np.clip(out, 0.0, 1.0).astype(dtype)


# -- synthetic scenes ---------------------------------------------------------------------

BIN_EDGE_DEG = 15.0


def bin_of_angle(deg: float) -> str:
    """Robot-centric 3-bin discretization; negative angles are on the robot's left."""
    if deg < -BIN_EDGE_DEG:
        return "LEFT"
    if deg > BIN_EDGE_DEG:
        return "RIGHT"
    return "FRONT"


def oracle_label(yaw_deg: float, dead_zone: float = BIN_EDGE_DEG) -> AddresseeLabel:
    """Addressee implied by a settled head yaw (negative = turned toward the robot's left)."""
    if yaw_deg < -dead_zone:
        return AddresseeLabel.LEFT
    if yaw_deg > dead_zone:
        return AddresseeLabel.RIGHT
    return AddresseeLabel.ROBOT


@dataclass
class SynthConfig:
    persons_deg: tuple = (-35.0, 35.0)
    distance: float = 1.5
    angle_jitter_deg: float = 5.0
    yaw_noise_deg: float = 3.0
    pose_jitter: float = 0.004
    pixel_noise: float = 0.02
    sequences_per_class: int = 100
    n_interactions: int = 10
    k: int = 10
    balance: bool = True
    seed: int = 0

    def __post_init__(self):
        self.persons_deg = tuple(float(a) for a in self.persons_deg)
        if len(self.persons_deg) < 2:
            raise ValueError("need at least two persons besides the robot")
        if any(abs(a) >= 80 for a in self.persons_deg):
            raise ValueError("person angles must lie within the camera field of view (|angle| < 80)")
        bins = {bin_of_angle(a) for a in self.persons_deg}
        if not {"LEFT", "RIGHT"} <= bins:
            raise ValueError("need at least one person in the LEFT bin and one in the RIGHT bin")
        j = self.angle_jitter_deg
        if any(bin_of_angle(a - j) != bin_of_angle(a) or bin_of_angle(a + j) != bin_of_angle(a)
               for a in self.persons_deg):
            raise ValueError(f"angle jitter {j} could move a person across a bin edge")
        if self.k < 1 or self.sequences_per_class < 1 or self.n_interactions < 1:
            raise ValueError("k, sequences_per_class and n_interactions must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["persons_deg"] = list(self.persons_deg)
        return d


@dataclass
class SynthSample:
    sequence: UtteranceSequence
    speaker: int
    addressee: int | None       # None = robot
    yaw_deg: np.ndarray         # per-frame head yaw
    settled_yaw_deg: float


@dataclass
class SyntheticDataset:
    config: SynthConfig
    samples: list = field(default_factory=list)

    @property
    def sequences(self) -> list[UtteranceSequence]:
        return [s.sequence for s in self.samples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(s.sequence.label) for s in self.samples])


def _person_pos(deg: float, dist: float) -> np.ndarray:
    r = math.radians(deg)
    return np.array([dist * math.sin(r), dist * math.cos(r)])


def gaze_yaw(speaker_pos: np.ndarray, target_pos: np.ndarray) -> float:
    """Signed angle (deg) from the speaker's robot-facing direction to the target; negative = robot's left."""
    a = -speaker_pos
    b = target_pos - speaker_pos
    return math.degrees(math.atan2(a[0] * b[1] - a[1] * b[0], a @ b))


def render_face(yaw_deg: float, skin, hair, background, rng: np.random.Generator, noise: float) -> np.ndarray:
    """Schematic head glyph: features slide horizontally with sin(yaw)."""
    s = math.sin(math.radians(yaw_deg))
    c = math.cos(math.radians(yaw_deg))
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64) + 0.5
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3))
    img[:] = background
    cx, cy = 25.0, 27.0
    head = ((xx - cx) / 16.0) ** 2 + ((yy - cy) / 20.0) ** 2 <= 1.0
    img[head] = skin
    hair_mask = head & (yy < cy - 9 + 3 * np.abs(xx - cx - 8 * s) / 16.0)
    img[hair_mask] = hair
    fx = cx + 12.0 * s
    for side in (-1, 1):
        ex = fx + side * 6.0 * c
        eye = ((xx - ex) / (2.2 * max(c, 0.35))) ** 2 + ((yy - (cy - 3)) / 2.0) ** 2 <= 1.0
        img[eye & head] = (0.08, 0.08, 0.1)
    nx = cx + 15.0 * s
    nose = (np.abs(xx - nx) <= 1.5 + 1.5 * abs(s)) & (yy >= cy) & (yy <= cy + 6)
    img[nose & head] = np.asarray(skin) * 0.7
    mouth = (np.abs(xx - (cx + 11.0 * s)) <= 5.0 * c + 1) & (np.abs(yy - (cy + 10)) <= 1.0)
    img[mouth & head] = (0.55, 0.15, 0.15)
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).astype(np.float32) / np.float32(255.0)


# local skeleton, metres: x to the person's left from the camera's view, y up, z toward camera
_SKELETON = np.array([
    [0.00, 1.62, 0.10],   # nose
    [0.00, 1.45, 0.00],   # neck
    [-0.19, 1.43, 0.0], [-0.23, 1.15, 0.02], [-0.24, 0.90, 0.06],
    [0.19, 1.43, 0.0], [0.23, 1.15, 0.02], [0.24, 0.90, 0.06],
    [-0.10, 0.95, 0.0], [-0.11, 0.50, 0.01], [-0.11, 0.06, 0.0],
    [0.10, 0.95, 0.0], [0.11, 0.50, 0.01], [0.11, 0.06, 0.0],
    [-0.035, 1.66, 0.08], [0.035, 1.66, 0.08],   # eyes
    [-0.075, 1.63, 0.0], [0.075, 1.63, 0.0],     # ears
])
_HEAD_KP = (0, 14, 15, 16, 17)


def render_pose(person_deg: float, head_yaw: float, body_yaw: float, rng, jitter: float) -> np.ndarray:
    """54-vector: projected keypoints (x, y in [0, 1]) plus visibility confidences."""
    pts = _SKELETON.copy()
    for idx, yaw in ((list(_HEAD_KP), head_yaw), ([i for i in range(18) if i not in _HEAD_KP], body_yaw)):
        r = math.radians(yaw)
        # positive yaw turns the face toward image-right
        x, z = pts[idx, 0], pts[idx, 2]
        pivot = 0.0
        pts[idx, 0] = pivot + x * math.cos(r) + z * math.sin(r)
        pts[idx, 2] = -x * math.sin(r) + z * math.cos(r)
    u0 = 0.5 + 0.5 * person_deg / 60.0
    scale = 0.22
    xs = u0 + scale * pts[:, 0]
    ys = 0.95 - scale * pts[:, 1] * 2.0
    s = math.sin(math.radians(head_yaw))
    conf = np.full(18, 0.9)
    conf[14] = conf[16] = np.clip(0.9 + 0.6 * s, 0.05, 0.95)   # right eye/ear hide when turning left
    conf[15] = conf[17] = np.clip(0.9 - 0.6 * s, 0.05, 0.95)
    xs = xs + rng.normal(0.0, jitter, 18)
    ys = ys + rng.normal(0.0, jitter, 18)
    return np.stack([xs, ys, conf], axis=-1).reshape(-1).astype(np.float32)


def _trajectory(settled: float, k: int, rng) -> np.ndarray:
    """Head turns from a partial start toward the settled yaw over a few frames."""
    start = settled * rng.uniform(0.0, 0.5)
    onset = rng.integers(0, max(1, k // 2))
    ramp = int(rng.integers(1, 4))
    t = np.arange(k)
    frac = np.clip((t - onset + 1) / ramp, 0.0, 1.0)
    return start + (settled - start) * frac


def render_utterance(speaker_deg: float, settled_yaw: float, skin, hair, background, rng,
                     config: SynthConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-frame yaws, faces (k, 50, 50, 3) and poses (k, 54) of a speaker turning to ``settled_yaw``."""
    yaws = _trajectory(settled_yaw, config.k, rng)
    yaws[-1] = settled_yaw
    faces = np.stack([render_face(y, skin, hair, background, rng, config.pixel_noise) for y in yaws])
    poses = np.stack([render_pose(speaker_deg, y, 0.4 * y, rng, config.pose_jitter) for y in yaws])
    return yaws, faces, poses


def synth_generate(config: SynthConfig) -> SyntheticDataset:
    """Deterministic (under ``config.seed``) labelled scenes with a known addressee oracle."""
    rng = np.random.default_rng(config.seed)
    n_int = config.n_interactions
    layouts = []
    for i in range(n_int):
        degs = [a + rng.uniform(-config.angle_jitter_deg, config.angle_jitter_deg) for a in config.persons_deg]
        layouts.append({
            "id": f"int{i:02d}",
            "deg": degs,
            "skin": [tuple(rng.uniform([0.55, 0.4, 0.3], [0.95, 0.8, 0.7])) for _ in degs],
            "hair": [tuple(rng.uniform(0.05, 0.45, 3)) for _ in degs],
            "bg": tuple(rng.uniform(0.25, 0.75, 3)),
        })
    labels = []
    for lab in AddresseeLabel:
        labels += [lab] * config.sequences_per_class
    if not config.balance:
        labels = list(rng.choice(list(AddresseeLabel), size=len(labels)))
    labels = [labels[i] for i in rng.permutation(len(labels))]

    ds = SyntheticDataset(config)
    for n, lab in enumerate(labels):
        lay = layouts[n % n_int]
        degs = lay["deg"]
        pos = [_person_pos(d, config.distance) for d in degs]
        if lab == AddresseeLabel.ROBOT:
            addressee = None
            speaker = int(rng.integers(len(degs)))
        else:
            cands = [i for i, d in enumerate(degs) if bin_of_angle(d) == lab.name]
            addressee = int(rng.choice(cands))
            speakers = [i for i, d in enumerate(degs) if bin_of_angle(d) != lab.name]
            speaker = int(rng.choice(speakers))
        target = np.zeros(2) if addressee is None else pos[addressee]
        settled = gaze_yaw(pos[speaker], target)
        noise_cap = 2.0 * config.yaw_noise_deg
        settled += float(np.clip(rng.normal(0.0, config.yaw_noise_deg), -noise_cap, noise_cap))
        if oracle_label(settled) != lab:
            raise ValueError(f"geometry gives yaw {settled:.1f} deg for label {lab.name}; "
                             "persons too close to the bin edges")
        yaws, faces, poses = render_utterance(degs[speaker], settled, lay["skin"][speaker], lay["hair"][speaker],
                                              lay["bg"], rng, config)
        seq = UtteranceSequence(faces, poses, lab, lay["id"])
        ds.samples.append(SynthSample(seq, speaker, addressee, yaws, settled))
    return ds
