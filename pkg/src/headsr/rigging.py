"""Bind splats to mesh faces and move them with the mesh.

Local->global per face frame (R, T, s):
    r = R r',   mu = s R mu' + T,   scale = s * scale'
and the inverse for global->local. The scale rule is applied as
log_scale' = log_scale - log(s), keeping scales positive for any s > 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ContractViolation, DegenerateInputError
from .gaussians import GaussianSet
from .geometry import Rotation, matrices_to_quats, quat_multiply
from .headmodel import MeshInstance


@dataclass(frozen=True)
class FaceFrame:
    rotation: Rotation
    translation: np.ndarray
    scale: float


@dataclass
class FaceFrameSet:
    """Per-face frames for one mesh instance."""

    rot: np.ndarray    # (F, 3, 3), columns [e1_hat, n_hat x e1_hat, n_hat]
    quat: np.ndarray   # (F, 4)
    trans: np.ndarray  # (F, 3) face centroids
    scale: np.ndarray  # (F,)

    def __len__(self):
        return self.scale.shape[0]


def face_frames(instance: MeshInstance) -> FaceFrameSet:
    v = instance.vertices
    tris = instance.triangles
    a, b, c = v[tris[:, 0]], v[tris[:, 1]], v[tris[:, 2]]
    e1 = b - a
    e2 = c - a
    n = np.cross(e1, e2)
    area2 = np.linalg.norm(n, axis=1)
    if np.any(area2 * 0.5 <= 1e-12):
        raise DegenerateInputError("degenerate face")
    e1_len = np.linalg.norm(e1, axis=1)
    e1_hat = e1 / e1_len[:, None]
    n_hat = n / area2[:, None]
    mid = np.cross(n_hat, e1_hat)
    rot = np.stack([e1_hat, mid, n_hat], axis=2)
    h = np.linalg.norm(e2 - (np.einsum("fi,fi->f", e2, e1_hat))[:, None] * e1_hat, axis=1)
    scale = 0.5 * (e1_len + h)
    trans = (a + b + c) / 3.0
    return FaceFrameSet(rot, matrices_to_quats(rot), trans, scale)


def face_frame(instance: MeshInstance, face: int) -> FaceFrame:
    tris = instance.triangles
    if face < 0 or face >= tris.shape[0]:
        raise ContractViolation("face index out of range")
    sub = MeshInstance(instance.vertices, tris[face : face + 1])
    frames = face_frames(sub)
    return FaceFrame(Rotation(frames.quat[0]), frames.trans[0], float(frames.scale[0]))


def bind(gset: GaussianSet, instance: MeshInstance) -> np.ndarray:
    """Nearest mesh face per splat (exact distances, lowest index on ties)."""
    if instance.triangles.shape[0] == 0:
        raise ContractViolation("cannot bind against an empty mesh")
    if gset.space != "global":
        raise ContractViolation("bind expects a global-space GaussianSet")
    return _kernels.nearest_face(
        np.ascontiguousarray(gset.position),
        np.ascontiguousarray(instance.vertices),
        np.ascontiguousarray(instance.triangles),
    )


@dataclass
class BoundFrames:
    """Per-splat face frames (frames gathered through a binding)."""

    rot: np.ndarray    # (N, 3, 3)
    quat: np.ndarray   # (N, 4)
    trans: np.ndarray  # (N, 3)
    scale: np.ndarray  # (N,)
    log_scale: np.ndarray  # (N,)


def gather_frames(frames: FaceFrameSet, binding: np.ndarray) -> BoundFrames:
    if np.any(binding < 0) or np.any(binding >= len(frames)):
        raise ContractViolation("binding indexes a nonexistent face")
    s = frames.scale[binding]
    return BoundFrames(
        frames.rot[binding], frames.quat[binding], frames.trans[binding], s, np.log(s)
    )


def local_to_global_arrays(bf: BoundFrames, pos_l, quat_l, log_scale_l):
    pos_g = bf.scale[:, None] * np.einsum("nij,nj->ni", bf.rot, pos_l) + bf.trans
    quat_g = quat_multiply(bf.quat, quat_l)
    return pos_g, quat_g, log_scale_l + bf.log_scale[:, None]


def pullback_local_arrays(bf: BoundFrames, d_pos_g, d_quat_g, d_log_scale_g):
    """Gradient transpose of local_to_global_arrays."""
    d_pos_l = bf.scale[:, None] * np.einsum("nji,nj->ni", bf.rot, d_pos_g)
    # quat_g = L(quat_f) quat_l is linear; apply L^T = composition with conjugate
    qf = bf.quat
    conj = np.stack([qf[:, 0], -qf[:, 1], -qf[:, 2], -qf[:, 3]], axis=1)
    d_quat_l = quat_multiply(conj, d_quat_g)
    return d_pos_l, d_quat_l, d_log_scale_g


def local_to_global(gset: GaussianSet, binding: np.ndarray, frames: FaceFrameSet) -> GaussianSet:
    if gset.space != "local":
        raise ContractViolation("local_to_global expects a local-space set")
    bf = gather_frames(frames, binding)
    pos, quat, ls = local_to_global_arrays(bf, gset.position, gset.rotation, gset.log_scale)
    return GaussianSet(pos, quat, ls, gset.opacity_logit.copy(), gset.color_logit.copy(), "global")


def global_to_local(gset: GaussianSet, binding: np.ndarray, frames: FaceFrameSet) -> GaussianSet:
    if gset.space != "global":
        raise ContractViolation("global_to_local expects a global-space set")
    bf = gather_frames(frames, binding)
    pos = np.einsum("nji,nj->ni", bf.rot, gset.position - bf.trans) / bf.scale[:, None]
    qf = bf.quat
    conj = np.stack([qf[:, 0], -qf[:, 1], -qf[:, 2], -qf[:, 3]], axis=1)
    quat = quat_multiply(conj, gset.rotation)
    ls = gset.log_scale - bf.log_scale[:, None]
    return GaussianSet(
        pos, quat, ls, gset.opacity_logit.copy(), gset.color_logit.copy(), "local", binding
    )


def deform(
    gset: GaussianSet,
    binding: np.ndarray,
    canonical: MeshInstance,
    target: MeshInstance,
) -> GaussianSet:
    """Carry canonical-space local splats to the target mesh configuration."""
    if target.triangles.shape != canonical.triangles.shape or np.any(
        target.triangles != canonical.triangles
    ):
        raise ContractViolation("mesh topology mismatch")
    return local_to_global(gset, binding, face_frames(target))
