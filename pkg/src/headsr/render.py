"""Differentiable splat renderer: EWA projection, compositing, backward.

Forward: project each splat to a 2D Gaussian (mean, covariance) with the
local affine (Jacobian) approximation of the pinhole projection plus a
0.3 px^2 anti-alias floor, depth-sort, and composite front to back per
pixel. Depth output is the alpha-weighted mean splat depth, normalized by
accumulated alpha; pixels with accumulated alpha <= alpha_floor get +inf.

Backward: exact reverse-mode derivatives of the forward computation with
respect to all raw splat attributes, including the dependence of the
projection Jacobian on the splat mean and the quaternion normalization.
Splats culled in the forward pass get zero gradient.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .errors import ShapeError, StaleForwardState
from .gaussians import Gaussian, GaussianSet, GradientBuffer, RenderOutput, sigmoid
from .geometry import Camera

DEPTH_SENTINEL = np.inf


@dataclass(frozen=True)
class RenderConfig:
    opacity_clamp: float = 0.999
    t_min: float = 1e-4          # transmittance early-exit threshold
    alpha_skip: float = 1e-6     # per-splat contribution support threshold
    blur_px2: float = 0.3        # anti-alias floor added to the 2D covariance
    alpha_floor: float = 1e-4    # accumulated alpha below this -> depth sentinel
    tile: int = 16


DEFAULT_RENDER_CONFIG = RenderConfig()


def _normalize_quats(q: np.ndarray):
    norm = np.linalg.norm(q, axis=1)
    norm = np.maximum(norm, 1e-30)
    return q / norm[:, None], norm


def _quats_to_matrices(qn: np.ndarray) -> np.ndarray:
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    R = np.empty((qn.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _rotation_grad_to_quat(dR: np.ndarray, qn: np.ndarray) -> np.ndarray:
    """Chain (M,3,3) gradients w.r.t. R(q̂) back to the unit quaternion."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = np.empty((qn.shape[0], 4))
    # dR/dw
    g[:, 0] = 2 * (
        -z * dR[:, 0, 1] + y * dR[:, 0, 2]
        + z * dR[:, 1, 0] - x * dR[:, 1, 2]
        - y * dR[:, 2, 0] + x * dR[:, 2, 1]
    )
    # dR/dx
    g[:, 1] = 2 * (
        y * dR[:, 0, 1] + z * dR[:, 0, 2]
        + y * dR[:, 1, 0] - 2 * x * dR[:, 1, 1] - w * dR[:, 1, 2]
        + z * dR[:, 2, 0] + w * dR[:, 2, 1] - 2 * x * dR[:, 2, 2]
    )
    # dR/dy
    g[:, 2] = 2 * (
        -2 * y * dR[:, 0, 0] + x * dR[:, 0, 1] + w * dR[:, 0, 2]
        + x * dR[:, 1, 0] + z * dR[:, 1, 2]
        - w * dR[:, 2, 0] + z * dR[:, 2, 1] - 2 * y * dR[:, 2, 2]
    )
    # dR/dz
    g[:, 3] = 2 * (
        -2 * z * dR[:, 0, 0] - w * dR[:, 0, 1] + x * dR[:, 0, 2]
        + w * dR[:, 1, 0] - 2 * z * dR[:, 1, 1] + y * dR[:, 1, 2]
        + x * dR[:, 2, 0] + y * dR[:, 2, 1]
    )
    return g


class _Projection:
    """Per-splat projected quantities for the valid (non-culled) subset."""

    __slots__ = (
        "vidx", "qn", "qnorm", "rot", "scale2", "cov_cam", "J", "t",
        "mean2d", "cov2d", "conic", "z", "pmax", "x0", "x1", "y0", "y1",
        "opac", "color",
    )


def _project_valid(gset: GaussianSet, camera: Camera, width, height, config: RenderConfig):
    """EWA projection of every splat; returns a _Projection of survivors."""
    n = len(gset)
    Wc = camera.world_to_cam_matrix()
    t_all = (gset.position - camera.position) @ Wc.T
    z_all = t_all[:, 2]
    opac_all = sigmoid(gset.opacity_logit)
    valid = (z_all >= camera.near) & (opac_all > config.alpha_skip)
    vidx = np.nonzero(valid)[0]
    pr = _Projection()
    if vidx.size == 0:
        pr.vidx = vidx
        return pr

    t = t_all[vidx]
    z = z_all[vidx]
    qn, qnorm = _normalize_quats(gset.rotation[vidx])
    R = _quats_to_matrices(qn)
    s2 = np.exp(2.0 * gset.log_scale[vidx])
    cov_world = np.einsum("nij,nj,nkj->nik", R, s2, R)
    cov_cam = np.einsum("ij,njk,lk->nil", Wc, cov_world, Wc)

    f = camera.focal_px
    invz = 1.0 / z
    J = np.zeros((vidx.size, 2, 3))
    J[:, 0, 0] = f * invz
    J[:, 0, 2] = -f * t[:, 0] * invz * invz
    J[:, 1, 1] = f * invz
    J[:, 1, 2] = -f * t[:, 1] * invz * invz
    cov2d = np.einsum("nij,njk,nlk->nil", J, cov_cam, J)
    cov2d[:, 0, 0] += config.blur_px2
    cov2d[:, 1, 1] += config.blur_px2

    mean2d = np.stack(
        [f * t[:, 0] * invz + camera.principal_px[0], f * t[:, 1] * invz + camera.principal_px[1]],
        axis=1,
    )

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)

    opac = opac_all[vidx]
    pmax = np.log(opac / config.alpha_skip)
    rx = np.sqrt(2.0 * pmax * cov2d[:, 0, 0])
    ry = np.sqrt(2.0 * pmax * cov2d[:, 1, 1])
    x0 = np.floor(mean2d[:, 0] - rx).astype(np.int64)
    x1 = np.ceil(mean2d[:, 0] + rx).astype(np.int64)
    y0 = np.floor(mean2d[:, 1] - ry).astype(np.int64)
    y1 = np.ceil(mean2d[:, 1] + ry).astype(np.int64)
    on_image = (x1 >= 0) & (x0 <= width - 1) & (y1 >= 0) & (y0 <= height - 1)

    keep = np.nonzero(on_image)[0]
    pr.vidx = vidx[keep]
    pr.qn = qn[keep]
    pr.qnorm = qnorm[keep]
    pr.rot = R[keep]
    pr.scale2 = s2[keep]
    pr.cov_cam = cov_cam[keep]
    pr.J = J[keep]
    pr.t = t[keep]
    pr.mean2d = mean2d[keep]
    pr.cov2d = cov2d[keep]
    pr.conic = conic[keep]
    pr.z = z[keep]
    pr.pmax = pmax[keep]
    pr.x0 = np.clip(x0[keep], 0, width - 1)
    pr.x1 = np.clip(x1[keep], 0, width - 1)
    pr.y0 = np.clip(y0[keep], 0, height - 1)
    pr.y1 = np.clip(y1[keep], 0, height - 1)
    pr.opac = opac[keep]
    pr.color = sigmoid(gset.color_logit[pr.vidx])
    return pr


def project_gaussian(g, camera: Camera, config: RenderConfig = DEFAULT_RENDER_CONFIG):
    """Project one splat -> (mean2d, 2x2 covariance, depth, culled flag)."""
    gset = g.as_set() if isinstance(g, Gaussian) else g
    if len(gset) != 1:
        raise ShapeError("project_gaussian expects a single splat")
    pr = _project_valid(gset, camera, camera.width, camera.height, config)
    if pr.vidx.size == 0:
        return None, None, None, True
    return pr.mean2d[0], pr.cov2d[0], float(pr.z[0]), False


@dataclass
class RenderGrads:
    """Per-pixel upstream gradients for render_backward."""

    d_color: Optional[np.ndarray] = None
    d_depth: Optional[np.ndarray] = None
    d_alpha: Optional[np.ndarray] = None


@dataclass
class RenderCache:
    digest: bytes
    projection: _Projection
    order: np.ndarray
    starts: np.ndarray
    entries: np.ndarray
    wsum: np.ndarray
    wdepth: np.ndarray
    tfinal: np.ndarray
    ncontrib: np.ndarray
    width: int
    height: int


def _state_digest(gset: GaussianSet, camera: Camera, width, height, config: RenderConfig) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for arr in (gset.position, gset.rotation, gset.log_scale, gset.opacity_logit, gset.color_logit):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(repr(camera.to_json_dict()).encode())
    h.update(repr((width, height, config)).encode())
    return h.digest()


def _resolve_resolution(camera: Camera, resolution):
    if resolution is None:
        return camera.height, camera.width
    h, w = int(resolution[0]), int(resolution[1])
    if h <= 0 or w <= 0:
        raise ShapeError("empty raster target")
    if (h, w) != (camera.height, camera.width):
        raise ShapeError("resolution must match camera raster size")
    return h, w


def render(
    gset: GaussianSet,
    camera: Camera,
    resolution=None,
    config: RenderConfig = DEFAULT_RENDER_CONFIG,
    with_cache: bool = False,
):
    """Render a global-space GaussianSet. Returns RenderOutput
    (or (RenderOutput, RenderCache) when with_cache)."""
    if gset.space != "global":
        raise ShapeError("render requires a global-space GaussianSet")
    height, width = _resolve_resolution(camera, resolution)
    pr = _project_valid(gset, camera, width, height, config)
    if pr.vidx.size == 0:
        out = RenderOutput(
            np.zeros((height, width, 3)),
            np.full((height, width), DEPTH_SENTINEL),
            np.zeros((height, width)),
        )
        if with_cache:
            cache = RenderCache(
                _state_digest(gset, camera, width, height, config), pr,
                np.zeros(0, np.int64), np.zeros(1, np.int64), np.zeros(0, np.int64),
                out.alpha, np.zeros((height, width)), np.ones((height, width)),
                np.zeros((height, width), np.int64), width, height,
            )
            return out, cache
        return out

    order = np.argsort(pr.z, kind="stable")
    starts, entries = _kernels.bin_splats(
        order, pr.x0, pr.x1, pr.y0, pr.y1, width, height, config.tile
    )
    color, wsum, wdepth, tfinal, ncontrib = _kernels.composite_forward(
        starts, entries, pr.mean2d, pr.conic, pr.pmax, pr.opac, pr.color, pr.z,
        pr.x0, pr.x1, pr.y0, pr.y1, width, height, config.tile,
        config.opacity_clamp, config.t_min,
    )
    covered = wsum > config.alpha_floor
    depth = np.where(covered, wdepth / np.where(covered, wsum, 1.0), DEPTH_SENTINEL)
    out = RenderOutput(color, depth, wsum)
    if with_cache:
        cache = RenderCache(
            _state_digest(gset, camera, width, height, config), pr, order,
            starts, entries, wsum, wdepth, tfinal, ncontrib, width, height,
        )
        return out, cache
    return out


def render_backward(
    gset: GaussianSet,
    camera: Camera,
    upstream: RenderGrads,
    cache: Optional[RenderCache] = None,
    resolution=None,
    config: RenderConfig = DEFAULT_RENDER_CONFIG,
) -> GradientBuffer:
    """Gradients of a scalar loss w.r.t. all raw splat attributes.

    upstream holds per-pixel d(loss)/d(color, depth, alpha); any of the
    three may be None. Upstream depth gradients on sentinel (uncovered)
    pixels are ignored.
    """
    height, width = _resolve_resolution(camera, resolution)
    if cache is None:
        _, cache = render(gset, camera, resolution, config, with_cache=True)
    elif cache.digest != _state_digest(gset, camera, width, height, config):
        raise StaleForwardState("stale forward state: cache mismatch with inputs")

    n = len(gset)
    grads = GradientBuffer.zeros(n)
    pr = cache.projection
    if pr.vidx.size == 0:
        return grads

    u_color = upstream.d_color
    if u_color is None:
        u_color = np.zeros((height, width, 3))
    else:
        u_color = np.asarray(u_color, dtype=np.float64)
        if u_color.shape != (height, width, 3):
            raise ShapeError("raster shape error: d_color")
    u_alpha = np.zeros((height, width)) if upstream.d_alpha is None else np.asarray(
        upstream.d_alpha, dtype=np.float64
    )
    covered = cache.wsum > config.alpha_floor
    u_wd = np.zeros((height, width))
    u_a = u_alpha.copy()
    if upstream.d_depth is not None:
        d_depth = np.where(covered, np.asarray(upstream.d_depth, dtype=np.float64), 0.0)
        wsum_safe = np.where(covered, cache.wsum, 1.0)
        u_wd = d_depth / wsum_safe
        u_a -= d_depth * cache.wdepth / (wsum_safe * wsum_safe)

    d_mean2d, d_conic, d_opac_act, d_color_act, d_z = _kernels.composite_backward(
        cache.starts, cache.entries, pr.mean2d, pr.conic, pr.pmax, pr.opac, pr.color,
        pr.z, pr.x0, pr.x1, pr.y0, pr.y1, width, height, config.tile,
        config.opacity_clamp, cache.tfinal, cache.ncontrib, u_color, u_wd, u_a,
    )

    # activations
    grads.color_logit[pr.vidx] = d_color_act * pr.color * (1.0 - pr.color)
    grads.opacity_logit[pr.vidx] = d_opac_act * pr.opac * (1.0 - pr.opac)

    # conic -> 2D covariance
    G = np.empty((pr.vidx.size, 2, 2))
    G[:, 0, 0] = d_conic[:, 0]
    G[:, 0, 1] = 0.5 * d_conic[:, 1]
    G[:, 1, 0] = 0.5 * d_conic[:, 1]
    G[:, 1, 1] = d_conic[:, 2]
    conic_full = np.empty_like(G)
    conic_full[:, 0, 0] = pr.conic[:, 0]
    conic_full[:, 0, 1] = pr.conic[:, 1]
    conic_full[:, 1, 0] = pr.conic[:, 1]
    conic_full[:, 1, 1] = pr.conic[:, 2]
    d_cov2d = -np.einsum("nij,njk,nkl->nil", conic_full, G, conic_full)

    # cov2d = J cov_cam J^T (+ blur I)
    J = pr.J
    d_cov_cam = np.einsum("nji,njk,nkl->nil", J, d_cov2d, J)
    d_J = 2.0 * np.einsum("nij,njk,nkl->nil", d_cov2d, J, pr.cov_cam)

    f = camera.focal_px
    t = pr.t
    invz = 1.0 / pr.z
    invz2 = invz * invz
    d_t = np.zeros((pr.vidx.size, 3))
    d_t[:, 0] = d_J[:, 0, 2] * (-f * invz2)
    d_t[:, 1] = d_J[:, 1, 2] * (-f * invz2)
    d_t[:, 2] = (
        (d_J[:, 0, 0] + d_J[:, 1, 1]) * (-f * invz2)
        + d_J[:, 0, 2] * (2.0 * f * t[:, 0] * invz2 * invz)
        + d_J[:, 1, 2] * (2.0 * f * t[:, 1] * invz2 * invz)
    )
    # pixel mean and depth contributions
    d_t[:, 0] += d_mean2d[:, 0] * f * invz
    d_t[:, 1] += d_mean2d[:, 1] * f * invz
    d_t[:, 2] += (
        -d_mean2d[:, 0] * f * t[:, 0] * invz2
        - d_mean2d[:, 1] * f * t[:, 1] * invz2
        + d_z
    )

    Wc = camera.world_to_cam_matrix()
    grads.position[pr.vidx] = d_t @ Wc

    # cov_cam = Wc cov_world Wc^T
    d_cov_world = np.einsum("ji,njk,kl->nil", Wc, d_cov_cam, Wc)
    # cov_world = R diag(s^2) R^T
    RD = pr.rot * pr.scale2[:, None, :]
    d_R = 2.0 * np.einsum("nij,njk->nik", d_cov_world, RD)
    d_s2 = np.einsum("nji,njk,nki->ni", pr.rot, d_cov_world, pr.rot)
    grads.log_scale[pr.vidx] = d_s2 * 2.0 * pr.scale2

    d_qn = _rotation_grad_to_quat(d_R, pr.qn)
    inner = np.einsum("ni,ni->n", pr.qn, d_qn)
    grads.rotation[pr.vidx] = (d_qn - pr.qn * inner[:, None]) / pr.qnorm[:, None]

    grads.check_finite()
    return grads
