"""Generative head prior and benchmark avatar construction.

The prior is a linear latent decoder over a procedurally generated
population of splat heads: splats are placed on the canonical mesh by
area-weighted face sampling, population members vary by smooth band-limited
noise fields over the surface (colors, normal-direction position offsets,
scales, plus small rotation/opacity variation), and the decoder is the
top-d PCA basis of the standardized population residuals (Gram-matrix
eigenproblem). decode(0) is exactly the population mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractViolation, DegenerateInputError
from .gaussians import GaussianSet, inverse_sigmoid
from .geometry import Camera, _rng
from .headmodel import HeadPose, MeshInstance, ParametricHead, evaluate_mesh
from .render import DEFAULT_RENDER_CONFIG, RenderOutput, render
from .rigging import face_frames, gather_frames, local_to_global

LOG_SCALE_MIN = float(np.log(1e-4))
LOG_SCALE_MAX = float(np.log(1.0))

_GROUPS = ("position", "rotation", "log_scale", "opacity_logit", "color_logit")
_GROUP_DIMS = {"position": 3, "rotation": 4, "log_scale": 3, "opacity_logit": 1, "color_logit": 3}


@dataclass(frozen=True)
class AttributeLayout:
    """Maps flat decoder coordinates to per-splat attribute arrays."""

    n: int

    def slices(self) -> Dict[str, slice]:
        out = {}
        off = 0
        for g in _GROUPS:
            w = _GROUP_DIMS[g] * self.n
            out[g] = slice(off, off + w)
            off += w
        return out

    @property
    def flat_dim(self) -> int:
        return 14 * self.n

    def flatten(self, position, rotation, log_scale, opacity_logit, color_logit) -> np.ndarray:
        return np.concatenate(
            [
                np.asarray(position, dtype=np.float64).ravel(),
                np.asarray(rotation, dtype=np.float64).ravel(),
                np.asarray(log_scale, dtype=np.float64).ravel(),
                np.asarray(opacity_logit, dtype=np.float64).ravel(),
                np.asarray(color_logit, dtype=np.float64).ravel(),
            ]
        )

    def unflatten(self, flat: np.ndarray):
        s = self.slices()
        n = self.n
        return (
            flat[s["position"]].reshape(n, 3),
            flat[s["rotation"]].reshape(n, 4),
            flat[s["log_scale"]].reshape(n, 3),
            flat[s["opacity_logit"]].reshape(n),
            flat[s["color_logit"]].reshape(n, 3),
        )

    def flatten_set(self, gset: GaussianSet) -> np.ndarray:
        return self.flatten(
            gset.position, gset.rotation, gset.log_scale, gset.opacity_logit, gset.color_logit
        )

    def expand_group_scales(self, group_scales: Dict[str, float]) -> np.ndarray:
        out = np.empty(self.flat_dim)
        for g, sl in self.slices().items():
            out[sl] = group_scales[g]
        return out

    def to_json_dict(self) -> dict:
        return {"n": self.n, "order": list(_GROUPS)}

    @staticmethod
    def from_json_dict(d: dict) -> "AttributeLayout":
        if list(d["order"]) != list(_GROUPS):
            raise ContractViolation("unsupported attribute layout order")
        return AttributeLayout(int(d["n"]))


@dataclass(frozen=True)
class PriorConfig:
    population: int = 128
    n_gaussians: int = 5000
    latent_dim: int = 32
    seed: int = 0
    coverage: float = 1.6          # splat radius relative to mean splat spacing
    flatten: float = 0.4           # normal-direction scale relative to tangent
    base_opacity: float = 0.92
    base_color: Tuple[float, float, float] = (0.76, 0.60, 0.52)
    color_amp: float = 0.9
    pos_amp: float = 0.0035        # world units along the face normal
    scale_amp: float = 0.12        # log units
    rot_amp: float = 0.05
    opac_amp: float = 0.35
    noise_waves: int = 8
    wave_numbers: Tuple[float, float] = (25.0, 110.0)

    def to_json_dict(self) -> dict:
        return {
            "population": self.population,
            "n_gaussians": self.n_gaussians,
            "latent_dim": self.latent_dim,
            "seed": self.seed,
        }


def _smooth_field(points: np.ndarray, rng, cfg: PriorConfig) -> np.ndarray:
    """Band-limited random scalar field over 3D points, unit RMS."""
    f = np.zeros(points.shape[0])
    for _ in range(cfg.noise_waves):
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        k = rng.uniform(cfg.wave_numbers[0], cfg.wave_numbers[1])
        phase = rng.uniform(0.0, 2.0 * np.pi)
        f += rng.standard_normal() * np.cos(k * (points @ d) + phase)
    rms = np.sqrt(np.mean(f * f))
    return f / max(rms, 1e-12)


@dataclass
class AvatarModel:
    """Local-space splats rigged to a parametric head at shape `beta`."""

    gaussians: GaussianSet
    head: ParametricHead
    beta: np.ndarray
    latent: Optional[np.ndarray] = None
    _canonical: Optional[MeshInstance] = field(default=None, repr=False)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if self.gaussians.space != "local" or self.gaussians.binding is None:
            raise ContractViolation("AvatarModel requires a bound local-space set")
        if np.any(self.gaussians.binding >= self.head.triangles.shape[0]):
            raise ContractViolation("binding indexes a nonexistent face")

    @property
    def binding(self) -> np.ndarray:
        return self.gaussians.binding

    def canonical_instance(self) -> MeshInstance:
        if self._canonical is None:
            self._canonical = evaluate_mesh(
                self.head, self.beta, HeadPose(), np.zeros(self.head.n_expr)
            )
        return self._canonical

    def instance_at(self, pose: HeadPose, psi) -> MeshInstance:
        return evaluate_mesh(self.head, self.beta, pose, psi)

    def global_set(self, pose: Optional[HeadPose] = None, psi=None) -> GaussianSet:
        inst = (
            self.canonical_instance()
            if pose is None and psi is None
            else self.instance_at(pose or HeadPose(), np.zeros(self.head.n_expr) if psi is None else psi)
        )
        return local_to_global(self.gaussians, self.binding, face_frames(inst))

    def render_at(self, pose: HeadPose, psi, camera: Camera, config=DEFAULT_RENDER_CONFIG) -> RenderOutput:
        return render(self.global_set(pose, psi), camera, config=config)

    def centroid(self) -> np.ndarray:
        return self.canonical_instance().vertices.mean(axis=0)


@dataclass
class GenerativePrior:
    head: ParametricHead
    beta: np.ndarray
    binding: np.ndarray
    mean_flat: np.ndarray
    basis: np.ndarray            # frozen PCA basis g0, (A, d), orthonormal columns
    component_scale: np.ndarray  # (d,) population std along each basis column
    layout: AttributeLayout
    group_scales: Dict[str, float]
    seed: int = 0

    def __post_init__(self):
        self.scale_vec = self.layout.expand_group_scales(self.group_scales)
        self._canonical = None

    @property
    def n(self) -> int:
        return self.layout.n

    @property
    def d(self) -> int:
        return self.basis.shape[1]

    @property
    def g0(self) -> np.ndarray:
        return self.basis

    def fresh_g(self) -> np.ndarray:
        return self.basis.copy()

    @staticmethod
    def from_serialized(head, beta, mean_set, basis, component_scale, layout, group_scales, seed):
        prior = GenerativePrior(
            head=head,
            beta=beta,
            binding=mean_set.binding.copy(),
            mean_flat=layout.flatten_set(mean_set),
            basis=basis,
            component_scale=component_scale,
            layout=layout,
            group_scales=group_scales,
            seed=seed,
        )
        return prior

    def canonical_instance(self) -> MeshInstance:
        if self._canonical is None:
            self._canonical = evaluate_mesh(
                self.head, self.beta, HeadPose(), np.zeros(self.head.n_expr)
            )
        return self._canonical

    def mean_set(self) -> GaussianSet:
        pos, rot, ls, op, col = self.layout.unflatten(self.mean_flat)
        return GaussianSet(pos, rot, ls, op, col, "local", self.binding.copy())

    # --- decoding ---------------------------------------------------------

    def decode_flat(self, w: np.ndarray, g: Optional[np.ndarray] = None):
        """(flat attributes, unclamped mask). Linear outside the log-scale
        clamp; differentiable with grad_w / grad_g below."""
        w = np.asarray(w, dtype=np.float64).reshape(-1)
        if w.shape[0] != self.d:
            raise ContractViolation("latent dimension mismatch")
        G = self.basis if g is None else g
        flat = self.mean_flat + self.scale_vec * (G @ (self.component_scale * w))
        sl = self.layout.slices()["log_scale"]
        ls = flat[sl]
        unclamped = np.ones(flat.shape[0], dtype=bool)
        unclamped[sl] = (ls > LOG_SCALE_MIN) & (ls < LOG_SCALE_MAX)
        flat[sl] = np.clip(ls, LOG_SCALE_MIN, LOG_SCALE_MAX)
        return flat, unclamped

    def decode(self, w: np.ndarray, g: Optional[np.ndarray] = None) -> GaussianSet:
        flat, _ = self.decode_flat(w, g)
        pos, rot, ls, op, col = self.layout.unflatten(flat)
        return GaussianSet(pos, rot, ls, op, col, "local", self.binding.copy())

    def decode_avatar(self, w, g=None, beta=None, latent_record=True) -> AvatarModel:
        return AvatarModel(
            self.decode(w, g),
            self.head,
            self.beta if beta is None else beta,
            latent=np.asarray(w, dtype=np.float64).copy() if latent_record else None,
        )

    def encode_flat(self, flat: np.ndarray) -> np.ndarray:
        y = (flat - self.mean_flat) / self.scale_vec
        return (self.basis.T @ y) / self.component_scale

    def grad_w(self, d_flat: np.ndarray, unclamped: np.ndarray, g: Optional[np.ndarray] = None):
        G = self.basis if g is None else g
        masked = np.where(unclamped, d_flat, 0.0) * self.scale_vec
        return self.component_scale * (G.T @ masked)

    def grad_g(self, d_flat: np.ndarray, unclamped: np.ndarray, w: np.ndarray):
        masked = np.where(unclamped, d_flat, 0.0) * self.scale_vec
        return np.outer(masked, self.component_scale * np.asarray(w, dtype=np.float64))


def build_prior(head: ParametricHead, config: PriorConfig = PriorConfig(), beta=None) -> GenerativePrior:
    """Fit the PCA decoder to a procedurally generated avatar population."""
    if config.population < config.latent_dim + 1:
        raise ContractViolation("population must exceed latent_dim")
    if config.n_gaussians < 100:
        raise ContractViolation("need at least 100 splats")
    beta = np.zeros(head.n_shape) if beta is None else np.asarray(beta, dtype=np.float64)
    inst = evaluate_mesh(head, beta, HeadPose(), np.zeros(head.n_expr))
    frames = face_frames(inst)
    tris = inst.triangles
    v = inst.vertices
    areas = 0.5 * np.linalg.norm(
        np.cross(v[tris[:, 1]] - v[tris[:, 0]], v[tris[:, 2]] - v[tris[:, 0]]), axis=1
    )

    rng = _rng(config.seed, "prior-placement")
    n = config.n_gaussians
    face_idx = rng.choice(tris.shape[0], size=n, p=areas / areas.sum())
    bary = np.full((n, 3), 1.0 / 3.0) + rng.uniform(-0.2, 0.2, size=(n, 3))
    bary = np.clip(bary, 0.05, None)
    bary /= bary.sum(axis=1, keepdims=True)
    pts = np.einsum("nk,nkj->nj", bary, v[tris[face_idx]])

    bf = gather_frames(frames, face_idx)
    pos_local = np.einsum("nji,nj->ni", bf.rot, pts - bf.trans) / bf.scale[:, None]

    sigma = config.coverage * np.sqrt(areas.sum() / n)
    base_ls = np.stack(
        [
            np.log(sigma / bf.scale),
            np.log(sigma / bf.scale),
            np.log(config.flatten * sigma / bf.scale),
        ],
        axis=1,
    )
    base_ls = np.clip(base_ls, LOG_SCALE_MIN + 0.5, LOG_SCALE_MAX - 0.1)
    base_rot = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1))
    base_opac = np.full(n, inverse_sigmoid(config.base_opacity))
    base_col = np.tile(inverse_sigmoid(np.array(config.base_color)), (n, 1))

    layout = AttributeLayout(n)
    members = np.empty((config.population, layout.flat_dim))
    for j in range(config.population):
        mrng = _rng(config.seed, "prior-member", j)
        col = base_col + config.color_amp * np.stack(
            [_smooth_field(pts, mrng, config) for _ in range(3)], axis=1
        )
        pos = pos_local.copy()
        pos[:, 2] += config.pos_amp * _smooth_field(pts, mrng, config) / bf.scale
        ls = base_ls + config.scale_amp * _smooth_field(pts, mrng, config)[:, None]
        rot = base_rot.copy()
        rot[:, 1:] += config.rot_amp * np.stack(
            [_smooth_field(pts, mrng, config) for _ in range(3)], axis=1
        )
        opac = base_opac + config.opac_amp * _smooth_field(pts, mrng, config)
        members[j] = layout.flatten(pos, rot, ls, opac, col)

    mean_flat = members.mean(axis=0)
    resid = members - mean_flat
    group_scales = {}
    for gname, sl in layout.slices().items():
        group_scales[gname] = float(max(np.sqrt(np.mean(resid[:, sl] ** 2)), 1e-12))
    scale_vec = layout.expand_group_scales(group_scales)
    Y = resid / scale_vec

    gram = Y @ Y.T
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1][: config.latent_dim]
    lam = evals[order]
    if lam[-1] / max(lam[0], 1e-300) < 1e-12 or lam[-1] <= 0:
        raise DegenerateInputError("degenerate prior: population is rank deficient")
    V = evecs[:, order]
    basis = Y.T @ (V / np.sqrt(lam))
    component_scale = np.sqrt(lam / (config.population - 1))

    return GenerativePrior(
        head=head,
        beta=beta,
        binding=face_idx.astype(np.int64),
        mean_flat=mean_flat,
        basis=basis,
        component_scale=component_scale,
        layout=layout,
        group_scales=group_scales,
        seed=config.seed,
    )


def make_ground_truth_avatar(prior: GenerativePrior, seed: int, beta=None):
    """Sample w ~ N(0, I) truncated to +-2 and decode the avatar."""
    rng = _rng(seed, "gt-latent")
    w = np.empty(prior.d)
    for i in range(prior.d):
        x = rng.standard_normal()
        while abs(x) > 2.0:
            x = rng.standard_normal()
        w[i] = x
    avatar = prior.decode_avatar(w, beta=beta)
    return avatar, w


@dataclass(frozen=True)
class DegradeConfig:
    factor: int = 4
    color_blur_k: int = 8
    jitter_sigma: float = 0.06   # local units
    decimation: int = 4
    seed: int = 0


def degrade_avatar(gt: AvatarModel, config: DegradeConfig = DegradeConfig()) -> AvatarModel:
    """Low-quality counterpart: kNN color blur, local position jitter, and
    decimation with coverage-preserving scale inflation."""
    if config.factor < 2:
        raise ContractViolation("degrade factor must be >= 2")
    if config.color_blur_k < 1 or config.decimation < 1:
        raise ContractViolation("color_blur_k and decimation must be >= 1")
    gset = gt.gaussians.copy()
    n = len(gset)

    if config.color_blur_k > 1:
        glob = gt.global_set()
        _, idx = cKDTree(glob.position).query(glob.position, k=config.color_blur_k)
        gset.color_logit = gset.color_logit[idx].mean(axis=1)

    if config.jitter_sigma > 0:
        rng = _rng(config.seed, "degrade-jitter")
        gset.position = gset.position + rng.normal(0.0, config.jitter_sigma, size=(n, 3))

    if config.decimation > 1:
        keep = np.ones(n, dtype=bool)
        keep[:: config.decimation] = False
        gset = gset.subset(keep)
        gset.log_scale = gset.log_scale + np.log(config.decimation) / 3.0
    if len(gset) < 50:
        raise ContractViolation("over-decimated: fewer than 50 splats remain")
    return AvatarModel(gset, gt.head, gt.beta.copy())
