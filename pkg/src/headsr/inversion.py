"""Anchor construction, reconstruction losses, and two-stage inversion.

Stage 1 runs Adam on the latent code against the multi-view plus dynamics
losses; stage 2 freezes the latent and fine-tunes the decoder parameters
with an added locality regularizer that pins the decoder's behavior on
random latents to its original output.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractViolation, DivergenceError, ShapeError
from .gaussians import GaussianSet
from .geometry import Camera, _rng, derive_seed, sample_sphere_cameras
from .headmodel import HeadPose, ParametricHead, evaluate_mesh, render_mesh_depth
from .perceptual import FeatureBank
from .prior import AvatarModel, GenerativePrior
from .render import DEFAULT_RENDER_CONFIG, RenderConfig, RenderGrads, render, render_backward
from .rigging import (
    BoundFrames,
    face_frames,
    gather_frames,
    local_to_global_arrays,
    pullback_local_arrays,
)
from .upsample import BicubicUpsampler

_TINY = 1e-30

ROLE_CANONICAL = "canonical-multiview"
ROLE_DYNAMICS = "dynamics"


@dataclass
class AnchorImage:
    image: np.ndarray        # (H, W, 3) in [0, 1]
    depth: np.ndarray        # (H, W), +inf outside mask
    mask: np.ndarray         # (H, W) bool
    camera: Camera
    pose: HeadPose
    psi: np.ndarray
    role: str = ROLE_CANONICAL
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.psi = np.asarray(self.psi, dtype=np.float64).reshape(-1)
        hw = self.image.shape[:2]
        if self.depth.shape != hw or self.mask.shape != hw:
            raise ShapeError("raster shape error: anchor rasters disagree")
        if self.role not in (ROLE_CANONICAL, ROLE_DYNAMICS):
            raise ContractViolation(f"unknown anchor role {self.role!r}")

    def is_neutral(self) -> bool:
        return (
            abs(self.pose.jaw) < 1e-12
            and np.allclose(self.pose.rotation.q, [1, 0, 0, 0], atol=1e-12)
            and np.allclose(self.pose.translation, 0.0, atol=1e-12)
            and np.allclose(self.psi, 0.0, atol=1e-12)
        )


@dataclass
class AnchorSet:
    anchors: List[AnchorImage]
    n: int  # leading canonical-multiview anchors

    def __post_init__(self):
        if self.n < 0 or self.n > len(self.anchors):
            raise ContractViolation("invalid canonical anchor count")
        for a in self.anchors[: self.n]:
            if a.role != ROLE_CANONICAL or not a.is_neutral():
                raise ContractViolation("leading anchors must be neutral canonical views")
        for a in self.anchors[self.n :]:
            if a.role != ROLE_DYNAMICS:
                raise ContractViolation("trailing anchors must be dynamics-role")

    @property
    def k(self) -> int:
        return len(self.anchors)

    def canonical(self) -> List[AnchorImage]:
        return self.anchors[: self.n]

    def dynamics(self) -> List[AnchorImage]:
        return self.anchors[self.n :]


@dataclass
class ExpressionPool:
    entries: List[Tuple[HeadPose, np.ndarray]]

    def __post_init__(self):
        if not self.entries:
            raise ContractViolation("empty expression pool")
        pose0, psi0 = self.entries[0]
        if pose0.jaw != 0.0 or np.any(psi0 != 0.0):
            raise ContractViolation("pool entry 0 must be the canonical configuration")

    def __len__(self):
        return len(self.entries)


@dataclass
class LossWeights:
    lambda_p: float = 0.2
    lambda_d: float = 1.0
    lambda_loc: float = 0.1

    def __post_init__(self):
        if min(self.lambda_p, self.lambda_d, self.lambda_loc) < 0:
            raise ContractViolation("loss weights must be non-negative")


@dataclass
class InversionConfig:
    total_iters: int = 150
    stage2_start: int = 100      # last stage-1 iteration; stage 2 covers the rest
    lr_w: float = 0.04
    lr_g: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    multiview: bool = True
    multiexpr: bool = True
    depth_sup: bool = True
    geom_refine: bool = True
    locality_probes: int = 8
    seed: int = 0
    threads: int = 1
    views_per_iter: Optional[int] = None
    loss_sq: bool = False        # mean-squared instead of RMS image/depth terms

    def __post_init__(self):
        if not (0 < self.stage2_start <= self.total_iters):
            raise ContractViolation("require 0 < stage2_start <= total_iters")


def build_expression_pool(head: ParametricHead, seed: int = 0) -> ExpressionPool:
    """Canonical + (+-1.5 along the four widest expression axes) + jaw-open.

    Fully determined by the head; `seed` is accepted for interface
    stability and does not affect the default pool.
    """
    if head.n_expr < 1:
        raise ContractViolation("head has no expression axes")
    reach = np.linalg.norm(head.expr_basis, axis=1).max(axis=0)  # (E,)
    top = np.argsort(-reach, kind="stable")[: min(4, head.n_expr)]
    entries: List[Tuple[HeadPose, np.ndarray]] = [(HeadPose(), np.zeros(head.n_expr))]
    for axis in top:
        for sign in (1.0, -1.0):
            psi = np.zeros(head.n_expr)
            psi[axis] = 1.5 * sign
            entries.append((HeadPose(), psi))
    entries.append((HeadPose(jaw=0.5), np.zeros(head.n_expr)))
    return ExpressionPool(entries)


@dataclass(frozen=True)
class CameraRigConfig:
    radius: float = 0.6
    max_angle_deg: float = 45.0
    focal_scale: float = 1.1
    near: float = 0.1
    far: float = 2.0


def sample_anchor_set(
    lr_avatar: AvatarModel,
    head: ParametricHead,
    beta_star: np.ndarray,
    pool: ExpressionPool,
    cameras_per_expr: int,
    resolution: int,
    factor: int,
    upsampler=None,
    seed: int = 0,
    rig: CameraRigConfig = CameraRigConfig(),
    render_config: RenderConfig = DEFAULT_RENDER_CONFIG,
    center=None,
) -> AnchorSet:
    """Render the LR avatar over the pool, upsample, and attach mesh depth.

    Images come from the LR avatar at resolution/factor upsampled by
    `factor` (factor=1 renders full resolution directly); depth and mask
    come from the supervision mesh (head at beta_star) at full resolution.
    Cameras aim at `center` (default: the supervision mesh centroid).
    """
    if cameras_per_expr < 1:
        raise ContractViolation("need at least one camera per expression")
    if resolution % factor != 0:
        raise ContractViolation("resolution must be divisible by the factor")
    upsampler = upsampler or BicubicUpsampler()
    if center is None:
        center = evaluate_mesh(head, beta_star, HeadPose(), np.zeros(head.n_expr)).vertices.mean(axis=0)
    anchors: List[AnchorImage] = []
    for j, (pose, psi) in enumerate(pool.entries):
        cams = sample_sphere_cameras(
            cameras_per_expr,
            rig.radius,
            rig.max_angle_deg,
            center,
            derive_seed(seed, "anchor-cams", j),
            width=resolution,
            height=resolution,
            focal_scale=rig.focal_scale,
            near=rig.near,
            far=rig.far,
        )
        inst = evaluate_mesh(head, beta_star, pose, psi)
        for i, cam in enumerate(cams):
            if factor == 1:
                img = lr_avatar.render_at(pose, psi, cam, render_config).color
            else:
                low = lr_avatar.render_at(pose, psi, cam.scaled(factor), render_config).color
                img = np.clip(upsampler(low, factor), 0.0, 1.0)
            depth, mask = render_mesh_depth(inst, cam)
            anchors.append(
                AnchorImage(
                    img, depth, mask, cam, pose, psi,
                    ROLE_CANONICAL if j == 0 else ROLE_DYNAMICS,
                    meta={"pool_entry": j, "view": i},
                )
            )
    return AnchorSet(anchors, n=cameras_per_expr)


# --- loss primitives --------------------------------------------------------


def image_loss(pred, target, lambda_p, bank: Optional[FeatureBank] = None,
               target_feats=None, squared: bool = False):
    """RMS pixel difference plus weighted perceptual proxy; exact gradient."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError("raster shape error: image_loss")
    diff = pred - target
    if squared:
        value = float(np.mean(diff * diff))
        grad = 2.0 * diff / diff.size
    else:
        value = float(np.sqrt(np.mean(diff * diff)))
        grad = diff / (max(value, _TINY) * diff.size)
    if lambda_p > 0:
        bank = bank or FeatureBank()
        if target_feats is None:
            target_feats = bank.features(target)
        pv, pg = bank.distance_and_grad(pred, target_feats)
        value += lambda_p * pv
        grad = grad + lambda_p * pg
    return value, grad


def depth_loss(pred, target, mask, cap, squared: bool = False):
    """Masked RMS depth residual; sentinel (uncovered) predictions inside
    the mask contribute a capped residual with zero gradient.

    Returns (value, grad, empty_mask_warning)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or mask.shape != pred.shape:
        raise ShapeError("raster shape error: depth_loss")
    count = int(mask.sum())
    if count == 0:
        return 0.0, np.zeros_like(pred), True
    finite = np.isfinite(pred)
    live = mask & finite
    capped = mask & ~finite
    r = np.zeros_like(pred)
    r[live] = pred[live] - target[live]
    r[capped] = cap
    sq = float(np.sum(r * r) / count)
    if squared:
        value = sq
        grad = np.where(live, 2.0 * r / count, 0.0)
    else:
        value = float(np.sqrt(sq))
        grad = np.where(live, r / (max(value, _TINY) * count), 0.0)
    return value, grad, False


class AnchorContext:
    """Anchor plus everything fixed across iterations: per-splat face
    frames at the anchor's mesh configuration and target features."""

    __slots__ = ("anchor", "frames", "target_feats", "depth_cap")

    def __init__(self, anchor: AnchorImage, head: ParametricHead, beta, binding,
                 bank: FeatureBank):
        inst = evaluate_mesh(head, beta, anchor.pose, anchor.psi)
        self.anchor = anchor
        self.frames = gather_frames(face_frames(inst), binding)
        self.target_feats = bank.features(anchor.image)
        self.depth_cap = anchor.camera.far - anchor.camera.near


def build_anchor_contexts(anchors: Sequence[AnchorImage], head, beta, binding, bank):
    return [AnchorContext(a, head, beta, binding, bank) for a in anchors]


def _anchor_term(ctx: AnchorContext, arrays, weights: LossWeights, bank, rcfg, lambda_d,
                 squared, want_grad):
    """One anchor's (L_img, L_depth, d_local_flat or None)."""
    pos_l, quat_l, ls_l, opac_l, col_l = arrays
    pos_g, quat_g, ls_g = local_to_global_arrays(ctx.frames, pos_l, quat_l, ls_l)
    gset = GaussianSet(pos_g, quat_g, ls_g, opac_l, col_l, "global")
    out, cache = render(gset, ctx.anchor.camera, config=rcfg, with_cache=True)
    li, gi = image_loss(out.color, ctx.anchor.image, weights.lambda_p, bank,
                        ctx.target_feats, squared)
    if lambda_d > 0:
        ld, gd, _ = depth_loss(out.depth, ctx.anchor.depth, ctx.anchor.mask,
                               ctx.depth_cap, squared)
    else:
        ld, gd = 0.0, None
    if not want_grad:
        return li, ld, None
    upstream = RenderGrads(d_color=gi, d_depth=None if gd is None else lambda_d * gd)
    gb = render_backward(gset, ctx.anchor.camera, upstream, cache, config=rcfg)
    d_pos_l, d_quat_l, d_ls_l = pullback_local_arrays(
        ctx.frames, gb.position, gb.rotation, gb.log_scale
    )
    d_flat = np.concatenate(
        [d_pos_l.ravel(), d_quat_l.ravel(), d_ls_l.ravel(),
         gb.opacity_logit.ravel(), gb.color_logit.ravel()]
    )
    return li, ld, d_flat


@dataclass
class LossReport:
    l_mv: float
    l_dyn: float
    grad_w: Optional[np.ndarray] = None
    grad_g: Optional[np.ndarray] = None
    d_flat: Optional[np.ndarray] = None


def evaluate_losses(
    prior: GenerativePrior,
    w: np.ndarray,
    g: Optional[np.ndarray],
    mv_ctxs: Sequence[AnchorContext],
    dyn_ctxs: Sequence[AnchorContext],
    weights: LossWeights,
    bank: FeatureBank,
    rcfg: RenderConfig = DEFAULT_RENDER_CONFIG,
    want: Optional[str] = None,      # None | 'w' | 'g' | 'both'
    threads: int = 1,
    squared: bool = False,
    lambda_d_override: Optional[float] = None,
) -> LossReport:
    """L_mv and L_dyn with the full gradient chain through decode, rigging,
    and rendering; per-anchor terms reduced in fixed anchor order."""
    flat, unclamped = prior.decode_flat(w, g)
    arrays = prior.layout.unflatten(flat)
    lambda_d = weights.lambda_d if lambda_d_override is None else lambda_d_override
    want_grad = want is not None
    jobs = [(ctx, True) for ctx in mv_ctxs] + [(ctx, False) for ctx in dyn_ctxs]

    def run(job):
        ctx, _ = job
        return _anchor_term(ctx, arrays, weights, bank, rcfg, lambda_d, squared, want_grad)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    n = len(mv_ctxs)
    m = len(dyn_ctxs)
    l_mv = 0.0
    l_dyn = 0.0
    d_flat = np.zeros(prior.layout.flat_dim) if want_grad else None
    for (ctx, is_mv), (li, ld, df) in zip(jobs, results):
        coeff = (1.0 / n) if is_mv else (1.0 / m)
        term = li + lambda_d * ld
        if is_mv:
            l_mv += coeff * term
        else:
            l_dyn += coeff * term
        if want_grad:
            d_flat += coeff * df
    report = LossReport(l_mv, l_dyn, d_flat=d_flat)
    if want in ("w", "both"):
        report.grad_w = prior.grad_w(d_flat, unclamped, g)
    if want in ("g", "both"):
        report.grad_g = prior.grad_g(d_flat, unclamped, w)
    return report


def mv_loss(prior, w, g, anchor_set: AnchorSet, head, beta, weights: LossWeights,
            bank: Optional[FeatureBank] = None, rcfg=DEFAULT_RENDER_CONFIG, threads: int = 1):
    """Multi-view canonical loss over the first n anchors; grads for w and g."""
    if anchor_set.n == 0:
        raise ContractViolation("empty anchor set")
    bank = bank or FeatureBank()
    ctxs = build_anchor_contexts(anchor_set.canonical(), head, beta, prior.binding, bank)
    rep = evaluate_losses(prior, w, g, ctxs, [], weights, bank, rcfg, want="both", threads=threads)
    return rep.l_mv, rep.grad_w, rep.grad_g


def dyn_loss(prior, w, g, anchor_set: AnchorSet, head, beta, weights: LossWeights,
             bank: Optional[FeatureBank] = None, rcfg=DEFAULT_RENDER_CONFIG, threads: int = 1):
    """Dynamics loss over deformed anchors; zero when there are none."""
    dyn = anchor_set.dynamics()
    if not dyn:
        d = prior.d
        return 0.0, np.zeros(d), np.zeros_like(prior.basis)
    bank = bank or FeatureBank()
    ctxs = build_anchor_contexts(dyn, head, beta, prior.binding, bank)
    rep = evaluate_losses(prior, w, g, [], ctxs, weights, bank, rcfg, want="both", threads=threads)
    return rep.l_dyn, rep.grad_w, rep.grad_g


def locality_reg(prior: GenerativePrior, g: np.ndarray, probes: int, rng) -> Tuple[float, np.ndarray]:
    """Mean per-coordinate squared deviation of decode_g from decode_g0 on
    fresh standard-normal probe latents, with its gradient w.r.t. g."""
    if probes < 1:
        raise ContractViolation("need at least one locality probe")
    a = prior.layout.flat_dim
    value = 0.0
    grad = np.zeros_like(g)
    for _ in range(probes):
        wr = rng.standard_normal(prior.d)
        fg, mg = prior.decode_flat(wr, g)
        f0, _ = prior.decode_flat(wr, None)
        diff = fg - f0
        value += float(np.mean(diff * diff)) / probes
        d_flat = 2.0 * diff / (a * probes)
        grad += prior.grad_g(d_flat, mg, wr)
    return value, grad


class Adam:
    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return param - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TraceRow:
    iteration: int
    stage: int
    l_mv: float
    l_dyn: float
    l_loc: float
    l_total: float
    wall_ms: float


@dataclass
class InversionResult:
    w: np.ndarray
    g: np.ndarray
    avatar: AvatarModel
    trace: List[TraceRow]


def invert(
    prior: GenerativePrior,
    anchors: AnchorSet,
    head: ParametricHead,
    beta: np.ndarray,
    config: InversionConfig = InversionConfig(),
    weights: LossWeights = LossWeights(),
    bank: Optional[FeatureBank] = None,
    rcfg: RenderConfig = DEFAULT_RENDER_CONFIG,
    on_iteration: Optional[Callable] = None,
) -> InversionResult:
    """Two-stage inversion: Adam on w (stage 1), then PTI-style Adam on g
    with the latent frozen and the locality regularizer added (stage 2)."""
    if anchors.k == 0:
        raise ContractViolation("empty anchor set")
    for a in anchors.anchors:
        if a.psi.shape[0] != head.n_expr:
            raise ContractViolation("anchor mismatch: expression dims")
        if a.image.shape[:2] != (a.camera.height, a.camera.width):
            raise ContractViolation("anchor mismatch: raster vs camera size")
    bank = bank or FeatureBank()
    mv_all = build_anchor_contexts(anchors.canonical(), head, beta, prior.binding, bank)
    dyn_all = build_anchor_contexts(anchors.dynamics(), head, beta, prior.binding, bank)
    mv_base = mv_all[:1] if not config.multiview else mv_all
    dyn_base = [] if not config.multiexpr else dyn_all
    lambda_d = weights.lambda_d if config.depth_sup else 0.0
    if not mv_base:
        raise ContractViolation("empty anchor set: no canonical anchors")

    w = np.zeros(prior.d)
    g = prior.fresh_g()
    adam_w = Adam(w.shape, config.lr_w, config.beta1, config.beta2, config.eps)
    adam_g = Adam(g.shape, config.lr_g, config.beta1, config.beta2, config.eps)
    loc_rng = _rng(config.seed, "locality-probes")
    sub_rng = _rng(config.seed, "views-per-iter")
    trace: List[TraceRow] = []

    for it in range(1, config.total_iters + 1):
        t0 = time.perf_counter()
        stage = 1 if it <= config.stage2_start else 2
        mv_ctxs, dyn_ctxs = mv_base, dyn_base
        if config.views_per_iter is not None:
            if len(mv_base) > config.views_per_iter:
                idx = sorted(sub_rng.choice(len(mv_base), config.views_per_iter, replace=False))
                mv_ctxs = [mv_base[i] for i in idx]
            if len(dyn_base) > config.views_per_iter:
                idx = sorted(sub_rng.choice(len(dyn_base), config.views_per_iter, replace=False))
                dyn_ctxs = [dyn_base[i] for i in idx]
        want = "w" if stage == 1 else "g"
        rep = evaluate_losses(
            prior, w, g, mv_ctxs, dyn_ctxs, weights, bank, rcfg,
            want=want, threads=config.threads, squared=config.loss_sq,
            lambda_d_override=lambda_d,
        )
        l_total = rep.l_mv + rep.l_dyn
        if stage == 1:
            l_loc = 0.0
            if not np.isfinite(l_total):
                raise DivergenceError(it)
            w = adam_w.step(w, rep.grad_w)
        else:
            l_loc, grad_loc = locality_reg(prior, g, config.locality_probes, loc_rng)
            if not np.isfinite(l_total + l_loc):
                raise DivergenceError(it)
            g = adam_g.step(g, rep.grad_g + weights.lambda_loc * grad_loc)
        wall_ms = (time.perf_counter() - t0) * 1e3
        trace.append(TraceRow(it, stage, rep.l_mv, rep.l_dyn, l_loc, l_total, wall_ms))
        if on_iteration is not None:
            lr = config.lr_w if stage == 1 else config.lr_g
            on_iteration(it, stage, lr, w, g)

    avatar = AvatarModel(prior.decode(w, g), head, np.asarray(beta, dtype=np.float64).copy(),
                         latent=w.copy())
    return InversionResult(w, g, avatar, trace)
