"""Rotations, rigid poses, pinhole cameras, and spherical camera sampling.

Conventions used everywhere downstream:
  * quaternions are (w, x, y, z), unit norm, canonicalized to w >= 0 on
    serialization;
  * cameras follow the OpenCV-style pinhole model with +Z the looking
    direction in camera space, so depth is camera-space z;
  * world up is +Y.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, PCG64, SeedSequence

from .errors import BehindCameraError, ContractViolation

_NORM_TOL = 1e-9


def _rng(*key) -> Generator:
    """Counter-style deterministic generator keyed by an integer tuple.

    Strings in the key are hashed to stable integers so call sites can use
    named streams, e.g. _rng(seed, "anchors", j).
    """
    ints = []
    for k in key:
        if isinstance(k, str):
            ints.append(int.from_bytes(k.encode(), "little") % (2**63))
        else:
            ints.append(int(k) & (2**63 - 1))
    return Generator(PCG64(SeedSequence(tuple(ints))))


def derive_seed(*key) -> int:
    """Stable integer sub-seed for a named stream."""
    return int(_rng(*key).integers(2**62))


@dataclass(frozen=True)
class Rotation:
    """Unit quaternion (w, x, y, z)."""

    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if n < 1e-12:
            raise ContractViolation("invalid rotation: zero quaternion")
        object.__setattr__(self, "q", q / n)

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.array([1.0, 0.0, 0.0, 0.0]))

    @staticmethod
    def from_axis_angle(axis, angle: float) -> "Rotation":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        half = 0.5 * angle
        return Rotation(np.concatenate([[np.cos(half)], np.sin(half) * axis]))

    def compose(self, other: "Rotation") -> "Rotation":
        """self ∘ other: rotate first by `other`, then by `self`."""
        return Rotation(quat_multiply(self.q, other.q))

    def inverse(self) -> "Rotation":
        w, x, y, z = self.q
        return Rotation(np.array([w, -x, -y, -z]))

    def apply(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) @ rotation_to_matrix(self).T

    def canonical_wxyz(self) -> np.ndarray:
        """Quaternion with w >= 0 (double-cover canonicalization)."""
        return -self.q if self.q[0] < 0 else self.q.copy()


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of wxyz quaternions (broadcasts over leading dims)."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def rotation_to_matrix(q) -> np.ndarray:
    """Unit quaternion (w, x, y, z) -> orthonormal 3x3 matrix, det +1."""
    if isinstance(q, Rotation):
        q = q.q
    w, x, y, z = np.asarray(q, dtype=np.float64).reshape(4)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_rotation(R: np.ndarray) -> Rotation:
    """Inverse of rotation_to_matrix. Rejects non-orthonormal input."""
    R = np.asarray(R, dtype=np.float64).reshape(3, 3)
    if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-6 or np.linalg.det(R) < 0:
        raise ContractViolation("invalid rotation matrix")
    return Rotation(_matrix_to_quat(R))


def _matrix_to_quat(R: np.ndarray) -> np.ndarray:
    t = R[0, 0] + R[1, 1] + R[2, 2]
    if t > 0:
        s = 0.5 / np.sqrt(t + 1.0)
        return np.array(
            [0.25 / s, (R[2, 1] - R[1, 2]) * s, (R[0, 2] - R[2, 0]) * s, (R[1, 0] - R[0, 1]) * s]
        )
    if R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        return np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    if R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        return np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
    return np.array(
        [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    )


def matrices_to_quats(R: np.ndarray) -> np.ndarray:
    """Batched rotation-matrix (..., 3, 3) -> wxyz quaternion (..., 4)."""
    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i in range(flat.shape[0]):
        out[i] = _matrix_to_quat(flat[i])
    return out.reshape(R.shape[:-2] + (4,))


@dataclass(frozen=True)
class Pose3:
    """Rigid transform p -> R p + t."""

    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3)
        )

    def compose(self, other: "Pose3") -> "Pose3":
        return Pose3(
            self.rotation.compose(other.rotation),
            self.rotation.apply(other.translation) + self.translation,
        )

    def inverse(self) -> "Pose3":
        rinv = self.rotation.inverse()
        return Pose3(rinv, -rinv.apply(self.translation))

    def apply(self, p: np.ndarray) -> np.ndarray:
        return self.rotation.apply(p) + self.translation


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: `orientation` rotates camera axes into world axes,
    i.e. world->camera is orientation^{-1} (p_world - position)."""

    position: np.ndarray
    orientation: Rotation
    focal_px: float
    principal_px: tuple
    width: int
    height: int
    near: float = 0.05
    far: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        if self.focal_px <= 0:
            raise ContractViolation("focal length must be positive")
        if not (0 < self.near < self.far):
            raise ContractViolation("require 0 < near < far")

    def world_to_cam_matrix(self) -> np.ndarray:
        return rotation_to_matrix(self.orientation).T

    def scaled(self, factor: int) -> "Camera":
        """Same view at 1/factor resolution (intrinsics divided by factor)."""
        return Camera(
            self.position,
            self.orientation,
            self.focal_px / factor,
            (self.principal_px[0] / factor, self.principal_px[1] / factor),
            self.width // factor,
            self.height // factor,
            self.near,
            self.far,
        )

    def to_json_dict(self) -> dict:
        return {
            "position": [float(v) for v in self.position],
            "quaternion_wxyz": [float(v) for v in self.orientation.canonical_wxyz()],
            "focal_px": float(self.focal_px),
            "principal_px": [float(self.principal_px[0]), float(self.principal_px[1])],
            "width": int(self.width),
            "height": int(self.height),
            "near": float(self.near),
            "far": float(self.far),
        }

    @staticmethod
    def from_json_dict(d: dict) -> "Camera":
        return Camera(
            np.array(d["position"], dtype=np.float64),
            Rotation(np.array(d["quaternion_wxyz"], dtype=np.float64)),
            float(d["focal_px"]),
            (float(d["principal_px"][0]), float(d["principal_px"][1])),
            int(d["width"]),
            int(d["height"]),
            float(d["near"]),
            float(d["far"]),
        )


def project_point(camera: Camera, p: np.ndarray):
    """Project world point(s) -> (pixel xy, camera-space depth).

    Raises BehindCameraError if any point has camera-space z < near.
    """
    p = np.asarray(p, dtype=np.float64)
    t = (p - camera.position) @ camera.world_to_cam_matrix().T
    z = t[..., 2]
    if np.any(z < camera.near):
        raise BehindCameraError("behind-camera: point in front of the near plane")
    px = camera.focal_px * t[..., 0] / z + camera.principal_px[0]
    py = camera.focal_px * t[..., 1] / z + camera.principal_px[1]
    return np.stack([px, py], axis=-1), z


def look_at_orientation(position: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> Rotation:
    """Camera orientation looking from `position` at `target` with +Y-ish up.

    Camera axes in world coordinates: z = forward (toward target),
    x = right, y = down-ish so pixel y grows downward in the image.
    """
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    n = np.linalg.norm(right)
    if n < 1e-12:  # looking along the up axis; pick a fallback
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        n = np.linalg.norm(right)
    right /= n
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)  # columns = camera axes in world
    return matrix_to_rotation(R)


def sample_sphere_cameras(
    n: int,
    radius: float,
    max_angle_deg: float,
    center,
    seed: int,
    *,
    width: int = 128,
    height: int = 128,
    focal_scale: float = 1.1,
    near: float = 0.05,
    far: float = 10.0,
    frontal_first: bool = True,
) -> list:
    """Cameras on a sphere around `center`, looking at it.

    Directions deviate from the frontal +Z axis by at most max_angle_deg in
    azimuth and elevation independently. Camera i depends only on
    (seed, i), never on n; with frontal_first (the default), camera 0 is
    the exact frontal view, so n=1 always yields it.
    """
    if n < 1:
        raise ContractViolation("need n >= 1 cameras")
    if radius <= 0:
        raise ContractViolation("radius must be positive")
    if not (0 <= max_angle_deg <= 90):
        raise ContractViolation("max_angle must be in [0, 90] degrees")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    cams = []
    lim = np.deg2rad(max_angle_deg)
    for i in range(n):
        if i == 0 and frontal_first:
            az, el = 0.0, 0.0
        else:
            g = _rng(seed, "sphere-cam", i)
            az, el = g.uniform(-lim, lim, size=2)
        # direction from center toward the camera; frontal axis is +Z
        d = np.array([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])
        pos = center + radius * d
        cams.append(
            Camera(
                pos,
                look_at_orientation(pos, center),
                focal_scale * max(width, height),
                (width / 2.0, height / 2.0),
                width,
                height,
                near,
                far,
            )
        )
    return cams
