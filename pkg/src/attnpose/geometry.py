"""Camera pose representation, pose losses, and orientation error metrics.

Quaternions are stored (w, x, y, z) everywhere: in memory, in listing files,
and in checkpoints. The training loss on orientation deliberately ignores the
quaternion double cover; the evaluation metric respects it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, exp, sqrt

__all__ = [
    "Pose",
    "LossWeights",
    "position_loss",
    "orientation_loss",
    "combined_loss",
    "angular_error_deg",
    "quat_to_rotmat",
    "canonicalize_quat",
]


@dataclass
class Pose:
    """Camera position (world units) and orientation quaternion (w, x, y, z)."""

    x: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(3)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(4)


@dataclass
class LossWeights:
    """Learned per-task log-variance weights for the combined loss."""

    s_x: Tensor = field(default_factory=lambda: Tensor(0.0, requires_grad=True))
    s_q: Tensor = field(default_factory=lambda: Tensor(-3.0, requires_grad=True))

    @classmethod
    def from_values(cls, s_x: float, s_q: float) -> "LossWeights":
        return cls(Tensor(float(s_x), requires_grad=True), Tensor(float(s_q), requires_grad=True))


def _as_tensor(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(v)


def position_loss(x_pred, x_gt) -> Tensor:
    """Euclidean distance between prediction and ground truth."""
    d = _as_tensor(x_pred) - _as_tensor(x_gt)
    return sqrt((d * d).sum())


def orientation_loss(q_pred, q_gt) -> Tensor:
    """Euclidean distance after normalizing the prediction to a unit quaternion.

    Scale-invariant in the prediction; does NOT identify q with -q.
    """
    q_pred = _as_tensor(q_pred)
    q_gt = _as_tensor(q_gt)
    norm = sqrt((q_pred * q_pred).sum())
    if norm.item() == 0.0:
        raise ValueError("orientation_loss: predicted quaternion has zero norm")
    d = q_gt - q_pred / norm
    return sqrt((d * d).sum())


def combined_loss(l_x, l_q, weights: LossWeights) -> Tensor:
    """Uncertainty-weighted sum: l_x*exp(-s_x) + s_x + l_q*exp(-s_q) + s_q."""
    l_x = _as_tensor(l_x)
    l_q = _as_tensor(l_q)
    return l_x * exp(-weights.s_x) + weights.s_x + l_q * exp(-weights.s_q) + weights.s_q


def angular_error_deg(q_pred: np.ndarray, q_gt: np.ndarray) -> float:
    """Rotation angle between two orientations, in degrees, double-cover aware."""
    q_pred = np.asarray(q_pred, dtype=np.float64).reshape(4)
    q_gt = np.asarray(q_gt, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q_pred)
    if n == 0.0:
        raise ValueError("angular_error_deg: predicted quaternion has zero norm")
    d = abs(float(np.dot(q_pred / n, q_gt)))
    return float(2.0 * np.degrees(np.arccos(min(d, 1.0))))


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) -> 3x3 rotation matrix."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if abs(n - 1.0) > 1e-6:
        raise ValueError(f"quat_to_rotmat expects a unit quaternion, got norm {n!r}")
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def canonicalize_quat(q: np.ndarray) -> np.ndarray:
    """Renormalize and flip sign so the first nonzero component is positive.

    For the usual case this is the w >= 0 convention; the first-nonzero rule
    settles the w == 0 boundary.
    """
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("cannot canonicalize a zero quaternion")
    q = q / n
    for v in q:
        if v != 0.0:
            if v < 0.0:
                q = -q
            break
    return q
