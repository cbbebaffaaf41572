"""SE(3) manifold math, pinhole camera model, projection helpers.

Twist layout is (tx, ty, tz, wx, wy, wz): translational part first,
rotational part second. All rotations are 3x3 orthonormal matrices,
translations are metres.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# below this rotation angle the closed-form exp/log coefficients switch
# to their Taylor series to avoid dividing by the angle
SMALL_ANGLE = 1e-8


class DegenerateRotation(ValueError):
    """Rotation angle at pi: the log map branch is not unique."""


def skew(v):
    v = np.asarray(v, dtype=np.float64)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def so3_exp(w):
    """Rodrigues formula for a rotation vector."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    # 2*sin^2(t/2)/t^2 is stable where (1-cos t)/t^2 cancels
    a = np.sin(theta) / theta
    b = 2.0 * np.sin(0.5 * theta) ** 2 / theta**2
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R):
    """Rotation vector of R; raises DegenerateRotation at angle pi."""
    R = np.asarray(R, dtype=np.float64)
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = np.linalg.norm(w)  # |sin(theta)|
    c = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(s, c)
    if np.pi - theta < 1e-7:
        raise DegenerateRotation("rotation angle at pi, log map is ambiguous")
    if s < SMALL_ANGLE:
        # theta ~ 0 (the theta ~ pi branch was rejected above)
        return w
    return w * (theta / s)


def so3_left_jacobian(w):
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    a = 2.0 * np.sin(0.5 * theta) ** 2 / theta**2          # (1 - cos t) / t^2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * K + b * (K @ K)


def so3_left_jacobian_inv(w):
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    half = 0.5 * theta
    cot = half / np.tan(half)
    b = (1.0 - cot) / theta**2
    return np.eye(3) - 0.5 * K + b * (K @ K)


@dataclass(frozen=True)
class Pose:
    """Rigid transform: p_out = rotation @ p_in + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.array(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.array(self.translation, dtype=np.float64).reshape(3))
        self.rotation.setflags(write=False)
        self.translation.setflags(write=False)

    @staticmethod
    def identity():
        return Pose()

    @staticmethod
    def from_matrix(T):
        T = np.asarray(T, dtype=np.float64)
        return Pose(T[:3, :3], T[:3, 3])

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points):
        """Transform one point (3,) or many (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def rotate(self, vectors):
        v = np.asarray(vectors, dtype=np.float64)
        return v @ self.rotation.T


def se3_exp(xi) -> Pose:
    """Exponential map of a twist (translation part, rotation part)."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    rho, w = xi[:3], xi[3:]
    R = so3_exp(w)
    t = so3_left_jacobian(w) @ rho
    return Pose(R, t)


def se3_log(pose: Pose):
    """Inverse of se3_exp for rotation angles below pi."""
    w = so3_log(pose.rotation)
    rho = so3_left_jacobian_inv(w) @ pose.translation
    return np.concatenate([rho, w])


def adjoint(pose: Pose):
    """6x6 map A with se3_exp(A @ xi) == pose * se3_exp(xi) * pose^-1."""
    A = np.zeros((6, 6))
    A[:3, :3] = pose.rotation
    A[:3, 3:] = skew(pose.translation) @ pose.rotation
    A[3:, 3:] = pose.rotation
    return A


def _se3_q_matrix(rho, w):
    """Translation-rotation coupling block of the SE(3) left Jacobian."""
    theta = np.linalg.norm(w)
    P = skew(rho)
    W = skew(w)
    if theta < 1e-3:
        t2 = theta * theta
        a = 1.0 / 6.0 - t2 / 120.0
        b = -1.0 / 24.0 + t2 / 720.0
        c = -1.0 / 120.0 + t2 / 5040.0
    else:
        t3 = theta**3
        a = (theta - np.sin(theta)) / t3
        b = (1.0 - 0.5 * theta * theta - np.cos(theta)) / (t3 * theta)
        c = (theta - np.sin(theta) - t3 / 6.0) / (t3 * theta * theta)
    WP = W @ P
    PW = P @ W
    WPW = WP @ W
    return (0.5 * P
            + a * (WP + PW + WPW)
            - b * (W @ WP + PW @ W - 3.0 * WPW)
            - 0.5 * (b - 3.0 * c) * (WPW @ W + W @ WPW))


def se3_left_jacobian(xi):
    """6x6 left Jacobian: exp(xi + d) ~ exp(J d) exp(xi) for small d."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    rho, w = xi[:3], xi[3:]
    J = np.zeros((6, 6))
    Jso3 = so3_left_jacobian(w)
    J[:3, :3] = Jso3
    J[3:, 3:] = Jso3
    J[:3, 3:] = _se3_q_matrix(rho, w)
    return J


def se3_left_jacobian_inv(xi):
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    rho, w = xi[:3], xi[3:]
    Jinv = np.zeros((6, 6))
    Jso3_inv = so3_left_jacobian_inv(w)
    Jinv[:3, :3] = Jso3_inv
    Jinv[3:, 3:] = Jso3_inv
    Jinv[:3, 3:] = -Jso3_inv @ _se3_q_matrix(rho, w) @ Jso3_inv
    return Jinv


def se3_right_jacobian_inv(xi):
    """Inverse right Jacobian: log(exp(xi) exp(d)) ~ xi + Jr_inv d."""
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=np.float64))


def perturb_left(pose: Pose, xi) -> Pose:
    """exp(xi) * pose (the ICP update convention)."""
    return se3_exp(xi) @ pose


def perturb_right(pose: Pose, xi) -> Pose:
    """pose * exp(xi) (the pose-graph edge convention)."""
    return pose @ se3_exp(xi)


def rotation_angle(R) -> float:
    """Absolute rotation angle of R in radians."""
    c = 0.5 * (np.trace(np.asarray(R)) - 1.0)
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def quat_from_rotation(R):
    """Unit quaternion (qx, qy, qz, qw) for a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        qw = 0.25 * s
        qx = (R[2, 1] - R[1, 2]) / s
        qy = (R[0, 2] - R[2, 0]) / s
        qz = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        qw = (R[2, 1] - R[1, 2]) / s
        qx = 0.25 * s
        qy = (R[0, 1] + R[1, 0]) / s
        qz = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        qw = (R[0, 2] - R[2, 0]) / s
        qx = (R[0, 1] + R[1, 0]) / s
        qy = 0.25 * s
        qz = (R[1, 2] + R[2, 1]) / s
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        qw = (R[1, 0] - R[0, 1]) / s
        qx = (R[0, 2] + R[2, 0]) / s
        qy = (R[1, 2] + R[2, 1]) / s
        qz = 0.25 * s
    q = np.array([qx, qy, qz, qw])
    return q / np.linalg.norm(q)


def rotation_from_quat(q):
    """Rotation matrix for a quaternion (qx, qy, qz, qw)."""
    qx, qy, qz, qw = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
        [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
        [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
    ])


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera. Pixel centres sit at integer coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def matrix(self):
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def scaled(self, factor: int) -> "Intrinsics":
        """Intrinsics of the image downsampled by 2**factor (block averaging)."""
        s = 2**factor
        return Intrinsics(
            fx=self.fx / s,
            fy=self.fy / s,
            cx=(self.cx - 0.5 * (s - 1)) / s,
            cy=(self.cy - 0.5 * (s - 1)) / s,
            width=self.width // s,
            height=self.height // s,
        )


def project(K: Intrinsics, p):
    """Camera point(s) to pixel coordinates; z must be positive."""
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise ValueError("projection requires z > 0")
    u = K.fx * p[..., 0] / z + K.cx
    v = K.fy * p[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1)


def backproject(K: Intrinsics, uv, depth):
    """Pixel(s) plus z-depth to camera-frame point(s); depth must be positive."""
    uv = np.asarray(uv, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("backprojection requires depth > 0")
    x = (uv[..., 0] - K.cx) * d / K.fx
    y = (uv[..., 1] - K.cy) * d / K.fy
    return np.stack([x, y, np.broadcast_to(d, x.shape)], axis=-1)


def pixel_rays(K: Intrinsics):
    """Unit ray directions through every pixel, camera frame, (H, W, 3)."""
    u, v = np.meshgrid(np.arange(K.width), np.arange(K.height))
    d = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u, dtype=np.float64)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)
