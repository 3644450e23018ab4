"""Procedural parametric head: blendshapes, jaw rig, landmarks, raster, fit.

The head is a UV sphere deformed into a head-like ellipsoid with nose,
eye-socket, mouth and chin features. Shape/expression bases are smooth
low-order polynomial displacement fields on the sphere (identical span to
band-limited spherical harmonics), unit Frobenius norm per column. A
single jaw joint rotates the lower-front vertices about a lateral axis
with a precomputed smooth falloff weight, so depth maps and rigging stay
continuous in the jaw angle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .errors import ContractViolation, DegenerateInputError, ShapeError
from .geometry import Camera, Rotation, _rng, rotation_to_matrix

LANDMARK_COUNT = 24

# unit-ish feature directions (x right, y up, z out the face)
_LANDMARK_DIRS = np.array(
    [
        (0.00, -0.15, 1.00),   # nose tip
        (0.00, 0.10, 1.00),    # nose bridge
        (0.25, 0.28, 1.00),    # eye inner corners
        (-0.25, 0.28, 1.00),
        (0.58, 0.26, 0.95),    # eye outer corners
        (-0.58, 0.26, 0.95),
        (0.42, 0.28, 1.00),    # eye centers
        (-0.42, 0.28, 1.00),
        (0.30, 0.50, 0.95),    # brows
        (-0.30, 0.50, 0.95),
        (0.32, -0.50, 0.95),   # mouth corners
        (-0.32, -0.50, 0.95),
        (0.00, -0.44, 1.00),   # mouth top
        (0.00, -0.60, 1.00),   # mouth bottom
        (0.00, -0.90, 0.50),   # chin
        (0.85, -0.35, 0.45),   # jawline
        (-0.85, -0.35, 0.45),
        (0.70, -0.60, 0.60),
        (-0.70, -0.60, 0.60),
        (0.45, -0.80, 0.55),
        (-0.45, -0.80, 0.55),
        (0.60, -0.10, 0.80),   # cheeks
        (-0.60, -0.10, 0.80),
        (0.00, 0.75, 0.70),    # forehead
    ]
)


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _poly_basis(d: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Monomials of the unit direction up to total degree 3, with degrees."""
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    one = np.ones_like(x)
    terms = [
        (one, 0),
        (x, 1), (y, 1), (z, 1),
        (x * x, 2), (y * y, 2), (z * z, 2), (x * y, 2), (y * z, 2), (z * x, 2),
        (x * x * x, 3), (y * y * y, 3), (z * z * z, 3),
        (x * x * y, 3), (x * x * z, 3), (y * y * x, 3), (y * y * z, 3),
        (z * z * x, 3), (z * z * y, 3), (x * y * z, 3),
    ]
    basis = np.stack([t[0] for t in terms], axis=1)
    degs = np.array([t[1] for t in terms], dtype=np.float64)
    return basis, degs


@dataclass
class HeadPose:
    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    jaw: float = 0.0

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if abs(self.jaw) > np.pi / 4 + 1e-12:
            raise ContractViolation("jaw angle exceeds pi/4")


@dataclass
class ParametricHead:
    template: np.ndarray          # (T, 3)
    triangles: np.ndarray         # (F, 3) int64
    shape_basis: np.ndarray       # (T, 3, S), unit Frobenius columns
    expr_basis: np.ndarray        # (T, 3, E), unit Frobenius columns
    static_offsets: np.ndarray    # (T, 3)
    jaw_pivot: np.ndarray         # (3,)
    jaw_axis: np.ndarray          # (3,), unit
    jaw_weight: np.ndarray        # (T,), in [0, 1]
    landmark_indices: np.ndarray  # (m,) distinct
    mouth_plane_y: float
    config: "HeadConfig"

    @property
    def n_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def n_expr(self) -> int:
        return self.expr_basis.shape[2]

    @property
    def jaw_vertices(self) -> np.ndarray:
        return np.nonzero(self.jaw_weight > 1e-6)[0]

    def centroid(self) -> np.ndarray:
        return self.template.mean(axis=0)


@dataclass
class MeshInstance:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)

    def face_centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)


@dataclass
class LandmarkSet:
    pixels: np.ndarray       # (m, 2)
    confidence: np.ndarray   # (m,) in [0, 1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if self.confidence.shape[0] != self.pixels.shape[0]:
            raise ShapeError("landmark confidence count mismatch")


@dataclass(frozen=True)
class HeadConfig:
    vertex_count: int = 1000
    shape_dims: int = 8
    expr_dims: int = 8
    seed: int = 0
    radii: Tuple[float, float, float] = (0.085, 0.115, 0.095)

    def to_json_dict(self) -> dict:
        return {
            "vertex_count": self.vertex_count,
            "shape_dims": self.shape_dims,
            "expr_dims": self.expr_dims,
            "seed": self.seed,
            "radii": list(self.radii),
        }

    @staticmethod
    def from_json_dict(d: dict) -> "HeadConfig":
        return HeadConfig(
            int(d["vertex_count"]), int(d["shape_dims"]), int(d["expr_dims"]),
            int(d["seed"]), tuple(float(v) for v in d["radii"]),
        )


def _uv_sphere(target_count: int):
    n_lat = max(4, int(round(np.sqrt((target_count - 2) / 2.0))))
    n_lon = 2 * n_lat
    rows = n_lat - 1
    dirs = [np.array([0.0, 1.0, 0.0])]
    for i in range(rows):
        theta = np.pi * (i + 1) / n_lat
        for j in range(n_lon):
            phi = 2 * np.pi * j / n_lon
            dirs.append(
                np.array([np.sin(theta) * np.sin(phi), np.cos(theta), np.sin(theta) * np.cos(phi)])
            )
    dirs.append(np.array([0.0, -1.0, 0.0]))
    dirs = np.array(dirs)

    tris = []
    bottom = len(dirs) - 1
    for j in range(n_lon):
        tris.append((0, 1 + j, 1 + (j + 1) % n_lon))
    for r in range(rows - 1):
        a0 = 1 + r * n_lon
        b0 = 1 + (r + 1) * n_lon
        for j in range(n_lon):
            j2 = (j + 1) % n_lon
            tris.append((a0 + j, b0 + j, b0 + j2))
            tris.append((a0 + j, b0 + j2, a0 + j2))
    last = 1 + (rows - 1) * n_lon
    for j in range(n_lon):
        tris.append((bottom, last + (j + 1) % n_lon, last + j))
    return dirs, np.array(tris, dtype=np.int64)


def _angular_bump(dirs, center, width):
    c = np.asarray(center, dtype=np.float64)
    c = c / np.linalg.norm(c)
    ang = np.arccos(np.clip(dirs @ c, -1.0, 1.0))
    return np.exp(-((ang / width) ** 2))


def _smooth_columns(dirs, n_cols, rng, frontal_weight=None):
    """Random smooth displacement fields, unit Frobenius per column."""
    basis, degs = _poly_basis(dirs)
    decay = 1.0 / (1.0 + degs) ** 2
    cols = np.empty((dirs.shape[0], 3, n_cols))
    for c in range(n_cols):
        coef = rng.standard_normal((basis.shape[1], 3)) * decay[:, None]
        f = basis @ coef
        if frontal_weight is not None:
            f = f * frontal_weight[:, None]
        norm = np.linalg.norm(f)
        if norm < 1e-12:
            raise ContractViolation("degenerate blendshape column")
        cols[:, :, c] = f / norm
    return cols


def build_synthetic_head(config: HeadConfig = HeadConfig()) -> ParametricHead:
    """Deterministic head-like mesh with blendshapes, jaw, and landmarks."""
    if config.vertex_count < 200:
        raise ContractViolation("vertex_count must be >= 200")
    if config.shape_dims < 1 or config.expr_dims < 1:
        raise ContractViolation("need at least one shape and expression axis")
    dirs, tris = _uv_sphere(config.vertex_count)
    rx, ry, rz = config.radii

    radial = np.zeros(dirs.shape[0])
    radial += 0.020 * _angular_bump(dirs, (0.0, -0.15, 1.0), 0.20)      # nose
    radial -= 0.008 * _angular_bump(dirs, (0.42, 0.28, 1.0), 0.18)      # eye sockets
    radial -= 0.008 * _angular_bump(dirs, (-0.42, 0.28, 1.0), 0.18)
    radial -= 0.005 * _angular_bump(dirs, (0.0, -0.52, 1.0), 0.15)      # mouth crease
    radial += 0.006 * _angular_bump(dirs, (0.0, -0.90, 0.55), 0.25)     # chin
    radial -= 0.010 * _angular_bump(dirs, (0.0, -1.0, -0.4), 0.5)       # neck taper
    template = dirs * np.array([rx, ry, rz]) + radial[:, None] * dirs

    # consistent outward winding
    fc = template[tris].mean(axis=1)
    fn = np.cross(template[tris[:, 1]] - template[tris[:, 0]], template[tris[:, 2]] - template[tris[:, 0]])
    if np.sum(np.einsum("fi,fi->f", fn, fc - template.mean(0)) > 0) < tris.shape[0] / 2:
        tris = tris[:, [0, 2, 1]]

    areas = 0.5 * np.linalg.norm(
        np.cross(template[tris[:, 1]] - template[tris[:, 0]], template[tris[:, 2]] - template[tris[:, 0]]),
        axis=1,
    )
    if np.any(areas <= 1e-12):
        raise ContractViolation("degenerate face in template mesh")

    rng = _rng(config.seed, "head-basis")
    frontal = _smoothstep((dirs[:, 2] + 0.1) / 0.6)
    shape_basis = _smooth_columns(dirs, config.shape_dims, rng)
    expr_basis = _smooth_columns(dirs, config.expr_dims, rng, frontal_weight=frontal)

    mouth_plane_y = -0.50 * ry
    jaw_pivot = np.array([0.0, mouth_plane_y, -0.15 * rz])
    jaw_axis = np.array([1.0, 0.0, 0.0])
    w_y = _smoothstep((mouth_plane_y - template[:, 1]) / (0.30 * ry))
    w_z = _smoothstep((template[:, 2] + 0.15 * rz) / (0.35 * rz))
    jaw_weight = w_y * w_z

    lm = []
    for d in _LANDMARK_DIRS:
        d = d / np.linalg.norm(d)
        score = dirs @ d
        for idx in np.argsort(-score):
            if idx not in lm:
                lm.append(int(idx))
                break
    landmark_indices = np.array(lm, dtype=np.int64)

    return ParametricHead(
        template=template,
        triangles=tris,
        shape_basis=shape_basis,
        expr_basis=expr_basis,
        static_offsets=np.zeros_like(template),
        jaw_pivot=jaw_pivot,
        jaw_axis=jaw_axis,
        jaw_weight=jaw_weight,
        landmark_indices=landmark_indices,
        mouth_plane_y=mouth_plane_y,
        config=config,
    )


def _jaw_rotations(head: ParametricHead, jaw_angle: float):
    """Per-vertex rotation matrices about the jaw axis (falloff-scaled)."""
    ang = jaw_angle * head.jaw_weight
    k = head.jaw_axis
    ca, sa = np.cos(ang), np.sin(ang)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    KK = K @ K
    return np.eye(3)[None] + sa[:, None, None] * K[None] + (1 - ca)[:, None, None] * KK[None]


def evaluate_mesh(head: ParametricHead, beta, pose: HeadPose, psi) -> MeshInstance:
    """V = template + B_s beta + B_e psi + offsets, then jaw, then rigid."""
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    psi = np.asarray(psi, dtype=np.float64).reshape(-1)
    if beta.shape[0] != head.n_shape or psi.shape[0] != head.n_expr:
        raise ShapeError("parameter shape error: beta/psi dims do not match head")
    v = head.template + head.shape_basis @ beta + head.expr_basis @ psi + head.static_offsets
    if pose.jaw != 0.0:
        R = _jaw_rotations(head, pose.jaw)
        rel = v - head.jaw_pivot
        v = head.jaw_pivot + np.einsum("tij,tj->ti", R, rel)
    Rg = rotation_to_matrix(pose.rotation)
    v = v @ Rg.T + pose.translation
    return MeshInstance(v, head.triangles)


def landmarks_3d(instance: MeshInstance, head: ParametricHead) -> np.ndarray:
    """(m, 3) world positions of the predefined landmark vertices."""
    return instance.vertices[head.landmark_indices]


def render_mesh_depth(instance: MeshInstance, camera: Camera, resolution=None):
    """(depth, mask): z-buffered raster; depth +inf outside coverage."""
    if resolution is None:
        height, width = camera.height, camera.width
    else:
        height, width = int(resolution[0]), int(resolution[1])
    if height <= 0 or width <= 0:
        raise ShapeError("empty raster target")
    if instance.triangles.shape[0] < 1:
        raise ContractViolation("mesh has no triangles")
    vcam = (instance.vertices - camera.position) @ camera.world_to_cam_matrix().T
    depth, cover = _kernels.mesh_depth_raster(
        vcam, instance.triangles, camera.focal_px,
        camera.principal_px[0], camera.principal_px[1], width, height, camera.near,
    )
    return depth, cover.astype(bool)


@dataclass(frozen=True)
class RefineConfig:
    max_iters: int = 40
    tol: float = 1e-10
    damping0: float = 1e-4
    residual_cap_px: float = 1e4


@dataclass
class RefineResult:
    beta: np.ndarray
    mean_reprojection_px: float
    iterations: int
    objective: float


class _Observation:
    """Precomputed affine landmark model X_v(beta) = C_v + A_v beta."""

    __slots__ = ("C", "A", "pixels", "conf", "camera")

    def __init__(self, head: ParametricHead, landmarks: LandmarkSet, pose: HeadPose, psi, camera: Camera):
        m = head.landmark_indices.shape[0]
        if landmarks.pixels.shape[0] != m:
            raise ShapeError("landmark count mismatch with head model")
        li = head.landmark_indices
        psi = np.asarray(psi, dtype=np.float64).reshape(-1)
        x0 = (head.template + head.expr_basis @ psi + head.static_offsets)[li]
        Rj = _jaw_rotations(head, pose.jaw)[li]
        Rg = rotation_to_matrix(pose.rotation)
        base = head.jaw_pivot + np.einsum("mij,mj->mi", Rj, x0 - head.jaw_pivot)
        self.C = base @ Rg.T + pose.translation
        M = np.einsum("ij,mjk->mik", Rg, Rj)
        self.A = np.einsum("mij,mjs->mis", M, head.shape_basis[li])
        self.pixels = landmarks.pixels
        self.conf = landmarks.confidence
        self.camera = camera


def refine_shape(
    head: ParametricHead,
    observations: Sequence[Tuple[LandmarkSet, HeadPose, np.ndarray, Camera]],
    config: RefineConfig = RefineConfig(),
    init_beta: Optional[np.ndarray] = None,
) -> RefineResult:
    """Shared shape parameters minimizing confidence-weighted landmark
    reprojection over all observations (Levenberg-damped Gauss-Newton).

    Landmarks behind a camera contribute a capped constant residual with
    zero Jacobian; an observation with every landmark behind its camera is
    rejected as degenerate.
    """
    if len(observations) == 0:
        raise ContractViolation("refine_shape needs at least one observation")
    obs = [_Observation(head, *o) for o in observations]
    S = head.n_shape
    beta = np.zeros(S) if init_beta is None else np.asarray(init_beta, dtype=np.float64).copy()

    def residuals(b):
        """Returns stacked residual blocks and Jacobians plus the objective."""
        objective = 0.0
        blocks = []
        n_valid = 0
        err_sum = 0.0
        for o in obs:
            X = o.C + o.A @ b
            Wc = o.camera.world_to_cam_matrix()
            t = (X - o.camera.position) @ Wc.T
            z = t[:, 2]
            valid = z >= o.camera.near
            if not np.any(valid):
                raise DegenerateInputError("degenerate observation: all landmarks behind camera")
            f = o.camera.focal_px
            px = np.where(valid, f * t[:, 0] / np.where(valid, z, 1.0) + o.camera.principal_px[0], 0.0)
            py = np.where(valid, f * t[:, 1] / np.where(valid, z, 1.0) + o.camera.principal_px[1], 0.0)
            r = np.stack([px, py], axis=1) - o.pixels
            r[~valid] = config.residual_cap_px
            w = o.conf
            objective += float(np.sum(w * np.sum(r * r, axis=1)))
            # pinhole Jacobian rows (2x3) per landmark, zero when invalid
            m = X.shape[0]
            Jp = np.zeros((m, 2, 3))
            zz = np.where(valid, z, 1.0)
            Jp[:, 0, 0] = f / zz
            Jp[:, 0, 2] = -f * t[:, 0] / (zz * zz)
            Jp[:, 1, 1] = f / zz
            Jp[:, 1, 2] = -f * t[:, 1] / (zz * zz)
            Jp[~valid] = 0.0
            J = np.einsum("mij,jk,mks->mis", Jp, Wc, o.A)
            blocks.append((r, J, w, valid))
            err_sum += float(np.sum(np.linalg.norm(r[valid], axis=1)))
            n_valid += int(np.sum(valid))
        mean_err = err_sum / max(n_valid, 1)
        return blocks, objective, mean_err

    blocks, objective, mean_err = residuals(beta)
    lam = config.damping0
    iters = 0
    for iters in range(1, config.max_iters + 1):
        H = np.zeros((S, S))
        g = np.zeros(S)
        for r, J, w, valid in blocks:
            Jw = J * w[:, None, None]
            H += np.einsum("mis,mit->st", Jw, J)
            g += np.einsum("mis,mi->s", Jw, r)
        if np.linalg.norm(g) < config.tol:
            break
        accepted = False
        for _ in range(15):
            damp = lam * (np.diag(np.maximum(np.diag(H), 1e-12)) + 1e-12 * np.eye(S))
            try:
                step = np.linalg.solve(H + damp, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            new_blocks, new_obj, new_err = residuals(beta + step)
            if new_obj < objective:
                beta = beta + step
                blocks, objective, mean_err = new_blocks, new_obj, new_err
                lam = max(lam / 3.0, 1e-14)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
    return RefineResult(beta, mean_err, iters, objective)
