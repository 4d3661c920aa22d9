"""Dataset ingestion and a deterministic synthetic scene renderer.

Pose listing files are UTF-8 text, one record per line:

    <relative_image_path> <tx> <ty> <tz> <qw> <qx> <qy> <qz>

whitespace-separated, ``#`` comment lines ignored. Quaternions are
canonicalized (unit norm, first nonzero component positive) on load.

The synthetic scene projects colored soft-edged discs through a pinhole
camera. Rendering is a pure function of (scene, pose, size); at least eight
landmarks with distinct hues sit in general position, so distinct poses in
the sampling ranges produce distinct images.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose, canonicalize_quat, quat_to_rotmat
from .imageops import load_image

__all__ = [
    "ListingParseError",
    "PoseRecord",
    "PoseDataset",
    "load_dataset",
    "save_listing",
    "SyntheticScene",
    "render",
    "generate_synthetic_dataset",
]

NEAR_CLIP = 0.2
BACKGROUND = 0.1


class ListingParseError(ValueError):
    """A malformed pose listing line; carries the 1-based line number."""

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


@dataclass
class PoseRecord:
    image_id: str
    pose: Pose
    path: Path | None = None
    pixels: np.ndarray | None = None


@dataclass
class PoseDataset:
    records: list[PoseRecord]
    split: str = "train"
    scene: str = "scene"
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> PoseRecord:
        return self.records[i]

    def image(self, i: int) -> np.ndarray:
        rec = self.records[i]
        if rec.pixels is not None:
            return rec.pixels
        return load_image(rec.path)


def load_dataset(root, split_file, split: str = "train", scene: str | None = None,
                 validate_images: bool = True) -> PoseDataset:
    """Parse a listing file and eagerly validate every referenced image."""
    root = Path(root)
    listing = Path(split_file)
    if not listing.is_absolute():
        listing = root / listing
    if not listing.exists():
        raise FileNotFoundError(f"split file not found: {listing}")
    records: list[PoseRecord] = []
    for line_no, raw in enumerate(listing.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise ListingParseError(listing, line_no, f"expected 8 fields, got {len(fields)}")
        rel = fields[0]
        try:
            values = [float(v) for v in fields[1:]]
        except ValueError as e:
            raise ListingParseError(listing, line_no, f"bad numeric field: {e}") from e
        q = np.array(values[3:])
        if np.linalg.norm(q) == 0.0:
            raise ListingParseError(listing, line_no, "zero-norm quaternion")
        pose = Pose(np.array(values[:3]), canonicalize_quat(q))
        img_path = root / rel
        if not img_path.exists():
            raise FileNotFoundError(f"image listed at {listing}:{line_no} is missing: {img_path}")
        if validate_images:
            load_image(img_path)
        records.append(PoseRecord(image_id=rel, pose=pose, path=img_path))
    if not records:
        raise ListingParseError(listing, 0, "listing holds no records")
    return PoseDataset(records=records, split=split, scene=scene or root.name, root=root)


def save_listing(dataset: PoseDataset, path) -> None:
    lines = []
    for rec in dataset.records:
        x, q = rec.pose.x, rec.pose.q
        nums = " ".join(format(v, ".17g") for v in (*x, *q))
        lines.append(f"{rec.image_id} {nums}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---- synthetic scene ----------------------------------------------------------------


@dataclass
class SyntheticScene:
    """Seeded landmark field with pinhole intrinsics and pose sampling ranges."""

    seed: int = 0
    n_landmarks: int = 10
    fov_deg: float = 60.0
    position_low: tuple[float, float, float] = (-1.0, -1.0, -0.8)
    position_high: tuple[float, float, float] = (1.0, 1.0, 0.8)
    cone_deg: float = 14.0
    landmarks: np.ndarray = field(init=False)
    radii: np.ndarray = field(init=False)
    colors: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.n_landmarks < 8:
            raise ValueError("need at least 8 landmarks for an identifiable scene")
        rng = np.random.default_rng(self.seed)
        xy = rng.uniform(-2.5, 2.5, size=(self.n_landmarks, 2))
        z = rng.uniform(5.0, 9.0, size=(self.n_landmarks, 1))
        self.landmarks = np.hstack([xy, z])
        self.radii = rng.uniform(0.3, 0.55, size=self.n_landmarks)
        hues = (np.arange(self.n_landmarks) + rng.uniform(0.0, 0.5)) / self.n_landmarks
        self.colors = np.array([colorsys.hsv_to_rgb(h % 1.0, 0.85, 0.95) for h in hues])

    def focal(self, size: int) -> float:
        return (size / 2.0) / np.tan(np.radians(self.fov_deg) / 2.0)

    def sample_pose(self, rng: np.random.Generator) -> Pose:
        x = rng.uniform(self.position_low, self.position_high)
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        angle = np.radians(rng.uniform(0.0, self.cone_deg))
        q = np.concatenate([[np.cos(angle / 2.0)], np.sin(angle / 2.0) * axis])
        return Pose(x, canonicalize_quat(q))


def render(scene: SyntheticScene, pose: Pose, size: int = 64) -> np.ndarray:
    """Pinhole projection of landmark discs, painter's order, soft 1px edges."""
    rot = quat_to_rotmat(pose.q / np.linalg.norm(pose.q))
    cam = (scene.landmarks - pose.x) @ rot  # world -> camera: R^T (p - x)
    depths = cam[:, 2]
    visible = depths > NEAR_CLIP
    if not visible.any():
        raise ValueError("pose outside scene envelope: every landmark is behind the camera")
    f = scene.focal(size)
    center = (size - 1) / 2.0
    img = np.full((3, size, size), BACKGROUND)
    rows = np.arange(size)[:, None]
    cols = np.arange(size)[None, :]
    order = np.argsort(-depths)  # far first
    for idx in order:
        if not visible[idx]:
            continue
        z = depths[idx]
        u = f * cam[idx, 0] / z + center
        v = f * cam[idx, 1] / z + center
        r = max(f * scene.radii[idx] / z, 0.7)
        if u < -r - 1 or u > size + r or v < -r - 1 or v > size + r:
            continue
        dist = np.sqrt((rows - v) ** 2 + (cols - u) ** 2)
        alpha = np.clip(r + 0.5 - dist, 0.0, 1.0)
        img = img * (1.0 - alpha) + scene.colors[idx][:, None, None] * alpha
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_dataset(scene: SyntheticScene, n: int, rng, size: int = 64,
                               split: str = "train") -> PoseDataset:
    """Sample n poses from the scene ranges and render them, all in memory."""
    if n < 1:
        raise ValueError("need at least one sample")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    records = []
    for i in range(n):
        pose = scene.sample_pose(rng)
        records.append(PoseRecord(
            image_id=f"synth_{split}_{i:04d}", pose=pose, pixels=render(scene, pose, size)))
    return PoseDataset(records=records, split=split, scene=f"synthetic-{scene.seed}")
