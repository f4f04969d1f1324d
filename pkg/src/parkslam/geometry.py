"""Rigid-body math on rotation-vector poses.

Rotations are axis-angle 3-vectors (radians times unit axis); a pose
pairs a rotation vector with a translation. Matrices are materialized
per call and never stored. Conventions:

  * ``rotvec_to_matrix`` is the Rodrigues formula, switching to its
    second-order Taylor form below ``ROTVEC_EPS``.
  * ``matrix_to_rotvec`` returns the canonical representative with
    angle in [0, pi]. At the pi boundary, where the axis sign is
    ambiguous, the representative whose first nonzero component is
    positive is returned.
  * ``compose(a, b)`` applies ``b`` first: the result maps x to
    ``a(b(x))``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROTVEC_EPS = 1e-8   # below this angle Rodrigues uses the Taylor form
ORTHO_TOL = 1e-6    # largest accepted deviation from orthonormality
_NEAR_PI = 1e-4     # band around pi where the symmetric-part extraction is used


class InvalidRotationError(ValueError):
    """Raised when a matrix is not a proper rotation."""


@dataclass(frozen=True)
class Pose6:
    """Rigid transform stored as (rotation vector, translation).

    Applies as ``x_out = R(r) @ x + t``. Instances are immutable; the
    backing arrays are write-protected copies of the inputs.
    """

    r: np.ndarray
    t: np.ndarray

    def __post_init__(self) -> None:
        for name in ("r", "t"):
            v = np.array(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite pose component {name}: {v}")
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @staticmethod
    def identity() -> "Pose6":
        return Pose6(np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        """Minimal 6-vector [r, t] used by the optimizer and the filter."""
        return np.concatenate([self.r, self.t])

    @staticmethod
    def from_vector(v: np.ndarray) -> "Pose6":
        v = np.asarray(v, dtype=float).reshape(6)
        return Pose6(v[:3], v[3:])

    def __repr__(self) -> str:  # compact, readable in test output
        r = ", ".join(f"{v:.6g}" for v in self.r)
        t = ", ".join(f"{v:.6g}" for v in self.t)
        return f"Pose6(r=[{r}], t=[{t}])"


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def rotvec_to_matrix(r: np.ndarray) -> np.ndarray:
    """Rodrigues formula. Taylor fallback keeps small angles exact."""
    r = np.asarray(r, dtype=float).reshape(3)
    angle = float(np.linalg.norm(r))
    k = skew(r)
    if angle < ROTVEC_EPS:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(angle) / angle
    b = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + a * k + b * (k @ k)


def matrix_to_rotvec(mat: np.ndarray) -> np.ndarray:
    """Inverse of rotvec_to_matrix, canonical angle in [0, pi].

    Raises InvalidRotationError when the input deviates from a proper
    rotation by more than ORTHO_TOL.
    """
    mat = np.asarray(mat, dtype=float)
    if mat.shape != (3, 3):
        raise InvalidRotationError(f"expected a 3x3 matrix, got {mat.shape}")
    dev = float(np.linalg.norm(mat @ mat.T - np.eye(3)))
    if dev > ORTHO_TOL:
        raise InvalidRotationError(f"matrix is not orthonormal (deviation {dev:.3e})")
    if np.linalg.det(mat) < 0.0:
        raise InvalidRotationError("matrix has negative determinant (reflection)")

    w = 0.5 * np.array([
        mat[2, 1] - mat[1, 2],
        mat[0, 2] - mat[2, 0],
        mat[1, 0] - mat[0, 1],
    ])
    s = float(np.linalg.norm(w))           # sin(angle)
    c = 0.5 * (float(np.trace(mat)) - 1.0)  # cos(angle)
    angle = float(np.arctan2(s, c))

    if angle < 1e-7:
        # w = sin(angle) * axis; relative error O(angle^2) is below fp noise here
        return w
    if np.pi - angle > _NEAR_PI:
        return w * (angle / s)

    # Near pi the antisymmetric part is tiny; recover the axis from the
    # symmetric part instead: (R + R^T)/2 = c I + (1-c) a a^T.
    m = (0.5 * (mat + mat.T) - c * np.eye(3)) / (1.0 - c)
    k = int(np.argmax(np.diag(m)))
    axis = np.empty(3)
    axis[k] = np.sqrt(max(m[k, k], 0.0))
    for i in range(3):
        if i != k:
            axis[i] = m[k, i] / axis[k]
    axis /= np.linalg.norm(axis)
    if s > 1e-10:
        # the rotation is measurably below pi: take the sign from w
        if np.dot(w, axis) < 0.0:
            axis = -axis
    else:
        # genuinely ambiguous: first nonzero component nonnegative
        for comp in axis:
            if abs(comp) > 1e-12:
                if comp < 0.0:
                    axis = -axis
                break
    return angle * axis


def compose(a: Pose6, b: Pose6) -> Pose6:
    """Chained transform: compose(a, b) maps x to a(b(x))."""
    ra = rotvec_to_matrix(a.r)
    rb = rotvec_to_matrix(b.r)
    return Pose6(matrix_to_rotvec(ra @ rb), ra @ b.t + a.t)


def inverse(p: Pose6) -> Pose6:
    rt = rotvec_to_matrix(p.r).T
    return Pose6(-p.r, -(rt @ p.t))


def relative(a: Pose6, b: Pose6) -> Pose6:
    """The pose d with compose(a, d) == b."""
    ra_t = rotvec_to_matrix(a.r).T
    rb = rotvec_to_matrix(b.r)
    return Pose6(matrix_to_rotvec(ra_t @ rb), ra_t @ (b.t - a.t))


def transform_point(p: Pose6, x: np.ndarray) -> np.ndarray:
    """Applies the pose to one point (3,) or a stack (..., 3)."""
    x = np.asarray(x, dtype=float)
    return x @ rotvec_to_matrix(p.r).T + p.t


def as_vector(p: Pose6) -> np.ndarray:
    return p.as_vector()


def from_vector(v: np.ndarray) -> Pose6:
    return Pose6.from_vector(v)


def planar_pose(x: float, y: float, yaw: float = 0.0) -> Pose6:
    """Ground-plane pose: translation (x, y, 0) and rotation yaw about z."""
    return Pose6(np.array([0.0, 0.0, yaw]), np.array([x, y, 0.0]))
