"""Pose representations, task losses, error metrics, and the cylindrical
point-cloud projection.

Conventions: quaternions are (w, x, y, z) and normalized with w >= 0 where
a canonical form matters; Euler rotation vectors are (roll, pitch, yaw) in
radians applied intrinsically in Z-Y-X order, i.e. R = Rz(yaw) Ry(pitch)
Rx(roll). Positions and translations are meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "ZeroQuaternion",
    "EmptyAccumulator",
    "TrajectoryTooShort",
    "OriginPoint",
    "GlobalPose",
    "RelativePose",
    "LossConfig",
    "euler_to_matrix",
    "matrix_to_euler",
    "quat_to_matrix",
    "matrix_to_quat",
    "quat_normalize",
    "rotation_angle",
    "compose",
    "integrate_relative",
    "global_pose_loss",
    "relative_pose_loss",
    "MetricsAccumulator",
    "relative_rmse",
    "segment_drift",
    "ProjectionGrid",
    "cylindrical_coords",
    "cylindrical_project",
    "KITTI_SEGMENT_LENGTHS",
    "DESK_SEGMENT_LENGTHS",
]


class ZeroQuaternion(ValueError):
    """Quaternion norm too small to normalize."""


class EmptyAccumulator(ValueError):
    """Metric requested before any frame errors were accumulated."""


class TrajectoryTooShort(ValueError):
    """Ground-truth path shorter than the smallest drift bucket."""

    def __init__(self, path_length: float, lengths: Sequence[float]):
        usable = [l for l in lengths if l <= path_length]
        super().__init__(
            f"trajectory covers {path_length:.3f} m; usable buckets of {list(lengths)}: {usable}"
        )
        self.path_length = path_length
        self.usable = usable


class OriginPoint(ValueError):
    """A point at the sensor origin has no direction to project."""


KITTI_SEGMENT_LENGTHS = tuple(range(100, 900, 100))
DESK_SEGMENT_LENGTHS = tuple(range(10, 90, 10))


@dataclass
class GlobalPose:
    """Absolute pose: position (m) and orientation quaternion (w, x, y, z)."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(3)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(4)

    @classmethod
    def identity(cls) -> "GlobalPose":
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    def normalized(self) -> "GlobalPose":
        return GlobalPose(self.p.copy(), quat_normalize(self.q))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.q])


@dataclass
class RelativePose:
    """Frame-to-frame motion: translation (m) and Euler rotation (rad)."""

    p: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(3)
        self.r = np.asarray(self.r, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "RelativePose":
        return cls(np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.r])


@dataclass(frozen=True)
class LossConfig:
    """Balance factors for the three task losses.

    lam_global weights the orientation term of the absolute-pose loss;
    lam_relative weights the rotation term of the frame-to-frame loss.
    ``squared_norm`` selects the mean-square convention for the relative
    loss (the plain Euclidean norm when False).
    """

    lam_global: float = 10.0
    lam_relative: float = 100.0
    squared_norm: bool = True

    def __post_init__(self):
        if self.lam_global <= 0 or self.lam_relative <= 0:
            raise ValueError("balance factors must be positive")


def euler_to_matrix(r: np.ndarray) -> np.ndarray:
    """Rotation matrix for (roll, pitch, yaw), intrinsic Z-Y-X order."""
    roll, pitch, yaw = np.asarray(r, dtype=np.float64).reshape(3)
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    return np.array(
        [
            [cy * cp, -sy * cr + cy * sp * sr, sy * sr + cy * sp * cr],
            [sy * cp, cy * cr + sy * sp * sr, -cy * sr + sy * sp * cr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def matrix_to_euler(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`euler_to_matrix` for pitch in (-pi/2, pi/2)."""
    m = np.asarray(m, dtype=np.float64)
    pitch = -np.arcsin(np.clip(m[2, 0], -1.0, 1.0))
    roll = np.arctan2(m[2, 1], m[2, 2])
    yaw = np.arctan2(m[1, 0], m[0, 0])
    return np.array([roll, pitch, yaw])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    norm = np.linalg.norm(q)
    if norm < 1e-12:
        raise ZeroQuaternion(f"cannot normalize quaternion with norm {norm}")
    return q / norm


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w >= 0) for a rotation matrix (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    trace = m[0, 0] + m[1, 1] + m[2, 2]
    if trace > 0:
        s = np.sqrt(trace + 1.0) * 2
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def rotation_angle(m: np.ndarray) -> float:
    """Geodesic rotation angle of a rotation matrix, radians."""
    trace = float(np.trace(np.asarray(m)))
    return float(np.arccos(np.clip(0.5 * (trace - 1.0), -1.0, 1.0)))


def compose(pose: GlobalPose, rel: RelativePose) -> GlobalPose:
    """Apply one relative transform on the right of an absolute pose."""
    rot = quat_to_matrix(pose.q)
    p_next = pose.p + rot @ rel.p
    rot_next = rot @ euler_to_matrix(rel.r)
    return GlobalPose(p_next, matrix_to_quat(rot_next))


def integrate_relative(
    rels: Sequence[RelativePose], start: Optional[GlobalPose] = None
) -> List[GlobalPose]:
    """Fold relative transforms into a trajectory, start pose included."""
    pose = (start or GlobalPose.identity()).normalized()
    out = [pose]
    for rel in rels:
        pose = compose(pose, rel)
        out.append(pose)
    return out


def _per_sample_sum(t: Tensor) -> Tensor:
    if t.values.ndim == 1:
        return ad.sum_(t)
    return ad.sum_(t, axis=-1)


def _batch_mean(t: Tensor) -> Tensor:
    if t.values.ndim == 0:
        return t
    return ad.mean(t)


def global_pose_loss(pred: Tensor, gt, lam: float = 10.0) -> Tensor:
    """Absolute-pose L1 loss with normalized predicted quaternion.

    ``sum|p_gt - p| + lam * sum|q_gt - q/||q|||``, averaged over the batch
    when inputs carry one. Differentiable through the normalization.
    """
    gt = ad.tensor(gt) if not isinstance(gt, Tensor) else gt
    if pred.shape != gt.shape or pred.shape[-1] != 7:
        raise ad.ShapeMismatch("global_pose_loss", pred.shape, gt.shape)
    p = ad.slice_(pred, 0, 3, axis=-1)
    q = ad.slice_(pred, 3, 7, axis=-1)
    sq_norm = ad.sum_(ad.square(q), axis=-1 if pred.values.ndim > 1 else None)
    if np.any(sq_norm.values < 1e-24):
        raise ZeroQuaternion("predicted quaternion norm below 1e-12")
    norm = ad.sqrt(sq_norm)
    if pred.values.ndim > 1:
        norm = ad.reshape(norm, (*norm.shape, 1))
    q_unit = ad.div(q, norm)
    gt_p = ad.slice_(gt, 0, 3, axis=-1)
    gt_q = ad.slice_(gt, 3, 7, axis=-1)
    term_p = _per_sample_sum(ad.abs_(ad.sub(gt_p, p)))
    term_q = _per_sample_sum(ad.abs_(ad.sub(gt_q, q_unit)))
    return _batch_mean(ad.add(term_p, ad.mul(term_q, lam)))


def relative_pose_loss(pred: Tensor, gt, lam: float = 100.0, squared: bool = True) -> Tensor:
    """Frame-to-frame pose loss ``||dp||^2 + lam ||dr||^2`` (batch mean).

    ``squared=False`` switches both norms to plain Euclidean length.
    """
    gt = ad.tensor(gt) if not isinstance(gt, Tensor) else gt
    if pred.shape != gt.shape or pred.shape[-1] != 6:
        raise ad.ShapeMismatch("relative_pose_loss", pred.shape, gt.shape)
    delta = ad.sub(pred, gt)
    sq_p = _per_sample_sum(ad.square(ad.slice_(delta, 0, 3, axis=-1)))
    sq_r = _per_sample_sum(ad.square(ad.slice_(delta, 3, 6, axis=-1)))
    if not squared:
        sq_p = ad.sqrt(ad.add(sq_p, 1e-30))
        sq_r = ad.sqrt(ad.add(sq_r, 1e-30))
    return _batch_mean(ad.add(sq_p, ad.mul(sq_r, lam)))


class MetricsAccumulator:
    """Per-frame translation and rotation error vectors, mergeable by summation."""

    def __init__(self):
        self._t: list = []
        self._r: list = []

    @property
    def n(self) -> int:
        return len(self._t)

    def add(self, pred_rel: np.ndarray, gt_rel: np.ndarray) -> None:
        pred_rel = np.asarray(pred_rel, dtype=np.float64).reshape(6)
        gt_rel = np.asarray(gt_rel, dtype=np.float64).reshape(6)
        self._t.append(gt_rel[:3] - pred_rel[:3])
        self._r.append(gt_rel[3:] - pred_rel[3:])

    def add_batch(self, pred_rel: np.ndarray, gt_rel: np.ndarray) -> None:
        pred_rel = np.asarray(pred_rel, dtype=np.float64).reshape(-1, 6)
        gt_rel = np.asarray(gt_rel, dtype=np.float64).reshape(-1, 6)
        if pred_rel.shape != gt_rel.shape:
            raise ad.ShapeMismatch("add_batch", pred_rel.shape, gt_rel.shape)
        for p, g in zip(pred_rel, gt_rel):
            self._t.append(g[:3] - p[:3])
            self._r.append(g[3:] - p[3:])

    def merge(self, other: "MetricsAccumulator") -> None:
        self._t.extend(other._t)
        self._r.extend(other._r)

    def translation_errors(self) -> np.ndarray:
        return np.asarray(self._t).reshape(-1, 3)

    def rotation_errors(self) -> np.ndarray:
        return np.asarray(self._r).reshape(-1, 3)


def relative_rmse(acc: MetricsAccumulator) -> Tuple[float, float]:
    """Root-mean-square translation (m) and rotation (deg) error per frame pair."""
    if acc.n == 0:
        raise EmptyAccumulator("no frame errors accumulated")
    t = acc.translation_errors()
    r = acc.rotation_errors()
    t_rmse = float(np.sqrt(np.mean(np.sum(t * t, axis=1))))
    r_rmse = float(np.degrees(np.sqrt(np.mean(np.sum(r * r, axis=1)))))
    return t_rmse, r_rmse


def _pose_matrices(traj: Sequence[GlobalPose]) -> Tuple[np.ndarray, np.ndarray]:
    ps = np.stack([pose.p for pose in traj])
    rs = np.stack([quat_to_matrix(pose.q) for pose in traj])
    return ps, rs


def segment_drift(
    gt_traj: Sequence[GlobalPose],
    pred_traj: Sequence[GlobalPose],
    lengths: Optional[Sequence[float]] = None,
) -> Tuple[float, float]:
    """Average endpoint drift over fixed-length subsegments of the path.

    For every start frame and every bucket length L, the end frame is the
    first whose ground-truth path distance reaches start + L. The relative
    transform error between prediction and ground truth over that segment
    is normalized by the actual segment distance and reported as a
    translation percentage and rotation in degrees per 100 m, averaged
    over all samples.

    Buckets default to 100..800 m; when the path is shorter than 100 m the
    desk-scale buckets 10..80 m apply.
    """
    if len(gt_traj) != len(pred_traj):
        raise ad.ShapeMismatch("segment_drift", (len(gt_traj),), (len(pred_traj),))
    gt_p, gt_r = _pose_matrices(gt_traj)
    pr_p, pr_r = _pose_matrices(pred_traj)
    steps = np.linalg.norm(np.diff(gt_p, axis=0), axis=1)
    dist = np.concatenate([[0.0], np.cumsum(steps)])
    path = float(dist[-1])
    if lengths is None:
        lengths = KITTI_SEGMENT_LENGTHS if path >= KITTI_SEGMENT_LENGTHS[0] else DESK_SEGMENT_LENGTHS
    lengths = sorted(lengths)
    if path < lengths[0]:
        raise TrajectoryTooShort(path, lengths)

    t_terms: list = []
    r_terms: list = []
    n = len(gt_traj)
    for first in range(n):
        for length in lengths:
            target = dist[first] + length
            last = int(np.searchsorted(dist, target, side="left"))
            if last >= n:
                break
            seg = dist[last] - dist[first]
            if seg <= 0.0:
                continue
            gt_rel_r = gt_r[first].T @ gt_r[last]
            gt_rel_p = gt_r[first].T @ (gt_p[last] - gt_p[first])
            pr_rel_r = pr_r[first].T @ pr_r[last]
            pr_rel_p = pr_r[first].T @ (pr_p[last] - pr_p[first])
            err_r = pr_rel_r.T @ gt_rel_r
            err_p = pr_rel_r.T @ (gt_rel_p - pr_rel_p)
            t_terms.append(float(np.linalg.norm(err_p)) / seg * 100.0)
            r_terms.append(np.degrees(rotation_angle(err_r)) / seg * 100.0)
    if not t_terms:
        raise TrajectoryTooShort(path, lengths)
    return float(np.mean(t_terms)), float(np.mean(r_terms))


@dataclass
class ProjectionGrid:
    """Range image from the cylindrical projection; empty cells hold +inf."""

    d_alpha: float
    d_beta: float
    cells: np.ndarray  # (H, W)

    @property
    def occupancy(self) -> np.ndarray:
        return np.isfinite(self.cells)


def cylindrical_coords(point: Sequence[float], d_alpha: float, d_beta: float) -> Tuple[float, float, float]:
    """Continuous projected coordinates (azimuth/d_alpha, elevation/d_beta, range).

    The azimuth uses the quadrant-aware two-argument arctangent.
    """
    if d_alpha <= 0 or d_beta <= 0:
        raise ValueError("angular bin widths must be positive")
    x, y, z = (float(v) for v in point)
    r = np.sqrt(x * x + y * y + z * z)
    if r < 1e-12:
        raise OriginPoint("point at the sensor origin cannot be projected")
    alpha = np.arctan2(y, x) / d_alpha
    beta = np.arcsin(z / r) / d_beta
    return float(alpha), float(beta), float(r)


def cylindrical_project(
    points: np.ndarray, d_alpha: float, d_beta: float, height: int, width: int
) -> ProjectionGrid:
    """Project points onto an (H, W) grid of range values; nearer point wins a cell.

    Azimuth in [-pi, pi] maps to columns [0, W), elevation in [-pi/2, pi/2]
    to rows [0, H); out-of-grid bins clamp to the border cell.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cells = np.full((height, width), np.inf)
    for point in points:
        alpha, beta, r = cylindrical_coords(point, d_alpha, d_beta)
        col = int(np.floor((alpha * d_alpha + np.pi) / d_alpha))
        row = int(np.floor((beta * d_beta + np.pi / 2) / d_beta))
        col = min(max(col, 0), width - 1)
        row = min(max(row, 0), height - 1)
        if r < cells[row, col]:
            cells[row, col] = r
    return ProjectionGrid(d_alpha, d_beta, cells)
