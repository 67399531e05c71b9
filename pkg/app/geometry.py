"""
Rigid and similarity transforms
Pose (SE(3), camera-to-world) and Sim3 with the small-increment charts used by
the optimisers. Quaternions are stored scalar-last (x, y, z, w), scipy order.
"""
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy.spatial.transform import Rotation

from app.errors import InvalidInputError


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix [v]x"""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _unit_quaternion(q: Iterable[float]) -> np.ndarray:
    q = np.array(q, dtype=np.float64)
    norm = np.linalg.norm(q)
    if q.shape != (4,) or not np.isfinite(norm) or norm < 1e-12:
        raise InvalidInputError(f"invalid quaternion {q}")
    return q if abs(norm - 1.0) < 1e-12 else q / norm


def so3_exp(phi: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(phi).as_matrix()


def se3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    """V(phi) such that Exp([rho, phi]) has translation V(phi) @ rho"""
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * K + b * K @ K


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform"""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _unit_quaternion(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_rt(cls, R: np.ndarray, t: np.ndarray) -> "Pose":
        return cls(Rotation.from_matrix(R).as_quat(), t)

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        return cls.from_rt(T[:3, :3], T[:3, 3])

    @classmethod
    def look_at(cls, eye: np.ndarray, target: np.ndarray, up: Optional[np.ndarray] = None) -> "Pose":
        """Camera at `eye` with +z towards `target`, +y pointing down"""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        up = np.array([0.0, 0.0, 1.0]) if up is None else np.asarray(up, dtype=np.float64)
        if abs(forward @ up) > 1.0 - 1e-9:
            up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return cls.from_rt(np.stack([right, down, forward], axis=1), eye)

    @property
    def R(self) -> np.ndarray:
        return Rotation.from_quat(self.rotation).as_matrix()

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        R = self.R
        return Pose.from_rt(R @ other.R, R @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose.from_rt(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (..., 3) points from camera to world"""
        return points @ self.R.T + self.translation

    def retract(self, xi: np.ndarray) -> "Pose":
        """Left-multiplicative update Exp(xi) * self, xi = (rho, phi)"""
        xi = np.asarray(xi, dtype=np.float64)
        R = so3_exp(xi[3:])
        t = se3_left_jacobian(xi[3:]) @ xi[:3]
        return Pose.from_rt(R, t).compose(self)

    def distance_to(self, other: "Pose") -> float:
        return float(np.linalg.norm(self.translation - other.translation))

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix(), other.matrix(), atol=atol))


@dataclass(frozen=True)
class Sim3:
    """Similarity transform x -> s R x + t"""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise InvalidInputError(f"Sim3 scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", _unit_quaternion(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Sim3":
        return cls(1.0, np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_srt(cls, s: float, R: np.ndarray, t: np.ndarray) -> "Sim3":
        return cls(s, Rotation.from_matrix(R).as_quat(), t)

    @classmethod
    def from_pose(cls, pose: Pose, scale: float = 1.0) -> "Sim3":
        return cls(scale, pose.rotation, pose.translation)

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "Sim3":
        """Chart (translation, rotation vector, log scale) -> Sim3"""
        v = np.asarray(v, dtype=np.float64)
        return cls(float(np.exp(v[6])), Rotation.from_rotvec(v[3:6]).as_quat(), v[:3])

    def to_vector(self) -> np.ndarray:
        """Inverse of from_vector; zero iff the transform is the identity"""
        rotvec = Rotation.from_quat(self.rotation).as_rotvec()
        return np.concatenate([self.translation, rotvec, [np.log(self.scale)]])

    @property
    def R(self) -> np.ndarray:
        return Rotation.from_quat(self.rotation).as_matrix()

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.scale * self.R
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Sim3") -> "Sim3":
        R = self.R
        return Sim3.from_srt(
            self.scale * other.scale,
            R @ other.R,
            self.scale * R @ other.translation + self.translation,
        )

    def __matmul__(self, other: "Sim3") -> "Sim3":
        return self.compose(other)

    def inverse(self) -> "Sim3":
        Rt = self.R.T
        return Sim3.from_srt(1.0 / self.scale, Rt, -Rt @ self.translation / self.scale)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.R.T + self.translation

    def to_pose(self) -> Pose:
        """Drop the scale (camera centre and orientation are kept)"""
        return Pose(self.rotation, self.translation)

    def allclose(self, other: "Sim3", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix(), other.matrix(), atol=atol))


def umeyama_alignment(
    source: np.ndarray,
    target: np.ndarray,
    with_scale: bool = True,
    weights: Optional[np.ndarray] = None,
) -> Sim3:
    """Least-squares (weighted) similarity with target ~ s R source + t

    Raises:
        InvalidInputError: fewer than 3 weighted pairs or a degenerate source set
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.shape != target.shape or source.ndim != 2 or source.shape[1] != 3:
        raise InvalidInputError("alignment needs two (N, 3) point sets of equal size")
    w = np.ones(len(source)) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.count_nonzero(w > 0) < 3:
        raise InvalidInputError("alignment needs at least 3 pairs")
    w = w / w.sum()

    mu_s = w @ source
    mu_t = w @ target
    src = source - mu_s
    tgt = target - mu_t
    sigma2 = float(w @ np.sum(src**2, axis=1))
    if sigma2 <= 0:
        raise InvalidInputError("source points are all identical")

    C = (tgt * w[:, None]).T @ src
    U, D, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / sigma2) if with_scale else 1.0
    t = mu_t - s * R @ mu_s
    return Sim3.from_srt(s, R, t)
