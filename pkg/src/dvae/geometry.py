"""Skeleton geometry: canonical-frame decomposition and pose metrics.

A pose factors as  joints = scale * (canonical @ R.T) + root  where the
canonical form is translation-, scale- and rotation-normalized:

  - joint 0 (root) at the origin,
  - the reference bone root->joint 1 has unit length and points along +y,
  - joint 2 lies in the x >= 0 half of the xy-plane (fixes the roll).

All functions work in float64 and are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegeneratePoseError, DimensionError, NumericError

_EY = np.array([0.0, 1.0, 0.0])


def _as_joints(a, name="joints"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise DimensionError(f"{name} must be (J, 3), got {a.shape}")
    return a


@dataclass(frozen=True)
class Pose3D:
    """Absolute keypoint skeleton, camera/world frame, millimeters."""

    joints: np.ndarray

    def __post_init__(self):
        j = _as_joints(self.joints)
        object.__setattr__(self, "joints", j)
        if j.shape[0] < 2:
            raise DimensionError(f"need at least 2 joints, got {j.shape[0]}")
        if not np.isfinite(j).all():
            raise NumericError("pose contains non-finite coordinates")

    @property
    def joint_count(self) -> int:
        return self.joints.shape[0]


@dataclass(frozen=True)
class CanonicalPose:
    """Scale-normalized skeleton in the canonical frame (dimensionless)."""

    joints: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "joints", _as_joints(self.joints))

    def validate(self, tol: float = 1e-9) -> None:
        j = self.joints
        if np.abs(j[0]).max() > tol:
            raise NumericError(f"canonical root not at origin: {j[0]}")
        if abs(np.linalg.norm(j[1]) - 1.0) > tol or np.abs(j[1] - _EY).max() > tol:
            raise NumericError(f"reference bone not unit +y: {j[1]}")
        if j.shape[0] >= 3 and (abs(j[2, 2]) > tol or j[2, 0] < -tol):
            raise NumericError(f"roll reference joint outside x>=0 xy-plane: {j[2]}")


@dataclass(frozen=True)
class Viewpoint:
    """Rotation taking the canonical frame to the observed orientation."""

    rotation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        object.__setattr__(self, "rotation", r)
        if r.shape != (3, 3):
            raise DimensionError(f"rotation must be 3x3, got {r.shape}")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise NumericError("matrix is not a rotation (orthonormal, det +1)")

    @staticmethod
    def identity() -> "Viewpoint":
        return Viewpoint(np.eye(3))


def _rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rotation matrix sending unit vector a onto unit vector b."""
    v = np.cross(a, b)
    c = float(np.dot(a, b))
    if c < -1.0 + 1e-12:
        # antiparallel: rotate pi about any axis orthogonal to a
        axis = np.cross(a, np.array([1.0, 0.0, 0.0]))
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, np.array([0.0, 0.0, 1.0]))
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    k = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + k + k @ k / (1.0 + c)


def _rotation_y(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_x(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def viewpoint_from_euler(tilt: float, turn: float, spin: float) -> Viewpoint:
    """Rz(spin) @ Rx(tilt) @ Ry(turn); all angles in radians."""
    return Viewpoint(rotation_z(spin) @ rotation_x(tilt) @ _rotation_y(turn))


def canonicalize(pose: Pose3D):
    """Factor a pose into (CanonicalPose, Viewpoint, root, scale).

    The factors satisfy  pose.joints == scale * (c.joints @ R.T) + root
    row-wise.  Raises DegeneratePoseError for a zero-length reference bone
    or when joints 0, 1, 2 are collinear (roll undefined).
    """
    joints = pose.joints
    if joints.shape[0] < 3:
        raise DegeneratePoseError("canonicalization needs at least 3 joints")
    root = joints[0].copy()
    centered = joints - root
    scale = float(np.linalg.norm(centered[1]))
    if scale < 1e-12:
        raise DegeneratePoseError("reference bone root->joint1 has zero length")
    local = centered / scale
    r1 = _rotation_between(local[1], _EY)
    v = r1 @ local[2]
    if np.hypot(v[0], v[2]) < 1e-9:
        raise DegeneratePoseError("joints 0, 1, 2 are collinear; roll is undefined")
    r2 = _rotation_y(float(np.arctan2(v[2], v[0])))
    r_can = r2 @ r1
    canonical = CanonicalPose(local @ r_can.T)
    return canonical, Viewpoint(r_can.T), root, scale


def compose(c: CanonicalPose, v: Viewpoint, root, scale: float) -> Pose3D:
    """Inverse of canonicalize: scale * (c @ R.T) + root."""
    scale = float(scale)
    if not scale > 0.0:
        raise NumericError(f"scale must be positive, got {scale}")
    root = np.asarray(root, dtype=np.float64).reshape(3)
    return Pose3D(scale * (c.joints @ v.rotation.T) + root)


def nearest_rotation(m) -> np.ndarray:
    """Orthogonal polar factor: closest rotation to an arbitrary 3x3 matrix."""
    m = np.asarray(m, dtype=np.float64).reshape(3, 3)
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def mean_rotation(rotations) -> np.ndarray:
    """Chordal mean: nearest rotation to the elementwise average."""
    stack = np.stack([np.asarray(r, dtype=np.float64) for r in rotations])
    return nearest_rotation(stack.mean(axis=0))


def _paired(pred: Pose3D, gt: Pose3D):
    if pred.joint_count != gt.joint_count:
        raise DimensionError(
            f"joint counts differ: {pred.joint_count} vs {gt.joint_count}"
        )
    return pred.joints, gt.joints


def mean_epe(pred: Pose3D, gt: Pose3D) -> float:
    """Mean per-joint Euclidean distance (millimeters)."""
    p, g = _paired(pred, gt)
    return float(np.linalg.norm(p - g, axis=1).mean())


def _pooled_errors(preds, gts) -> np.ndarray:
    if len(preds) != len(gts):
        raise DimensionError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    errs = []
    for pred, gt in zip(preds, gts):
        p, g = _paired(pred, gt)
        errs.append(np.linalg.norm(p - g, axis=1))
    return np.concatenate(errs) if errs else np.zeros(0)


def pck(preds, gts, threshold: float) -> float:
    """Fraction of keypoints, pooled over all poses, with error <= threshold."""
    errors = _pooled_errors(preds, gts)
    if errors.size == 0:
        raise DimensionError("pck needs at least one pose")
    return float((errors <= threshold).mean())


def auc_pck(preds, gts, t_min: float = 20.0, t_max: float = 50.0, steps: int = 31) -> float:
    """Normalized trapezoidal area under the PCK(threshold) curve."""
    if not (t_min < t_max) or steps < 2:
        raise ConfigError(f"need t_min < t_max and steps >= 2, got ({t_min}, {t_max}, {steps})")
    errors = _pooled_errors(preds, gts)
    if errors.size == 0:
        raise DimensionError("auc_pck needs at least one pose")
    thresholds = np.linspace(t_min, t_max, steps)
    values = np.array([(errors <= t).mean() for t in thresholds])
    return float(np.trapezoid(values, thresholds) / (t_max - t_min))


def metrics_report(preds, gts, t_min: float = 20.0, t_max: float = 50.0, steps: int = 31,
                   config_hash: str = "") -> dict:
    """JSON-ready summary: mean EPE, PCK curve samples, AUC, counts."""
    thresholds = np.linspace(t_min, t_max, steps)
    per_pose = [mean_epe(p, g) for p, g in zip(preds, gts)]
    errors = _pooled_errors(preds, gts)
    return {
        "mean_epe": float(np.mean(per_pose)),
        "auc": auc_pck(preds, gts, t_min, t_max, steps),
        "pck_thresholds": [float(t) for t in thresholds],
        "pck_values": [float((errors <= t).mean()) for t in thresholds],
        "threshold_range": [float(t_min), float(t_max)],
        "pose_count": len(per_pose),
        "joint_count": int(gts[0].joint_count) if gts else 0,
        "per_pose_epe": [float(e) for e in per_pose],
        "config_hash": config_hash,
    }
