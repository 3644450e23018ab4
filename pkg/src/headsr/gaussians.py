"""Gaussian splat attribute containers and attribute activations.

A GaussianSet stores raw (pre-activation) per-splat parameters:
  position (N,3), rotation (N,4) wxyz quaternion parameters (normalized
  where a rotation is actually needed), log_scale (N,3), opacity_logit
  (N,), color_logit (N,3).
Activated opacity/color are sigmoids of the logits, scales are exp of the
log-scales, so the composed covariance R diag(s^2) R^T is SPD by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractViolation, ShapeError

ATTRIBUTE_NAMES = ("position", "rotation", "log_scale", "opacity_logit", "color_logit")
ATTRIBUTE_DIMS = {"position": 3, "rotation": 4, "log_scale": 3, "opacity_logit": 1, "color_logit": 3}
FLAT_WIDTH = 14  # sum of the per-splat attribute dims above


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0.0) or np.any(y >= 1.0):
        raise ContractViolation("saturated attribute: inverse sigmoid needs values in (0, 1)")
    return np.log(y / (1.0 - y))


def activate_scale(log_scale):
    return np.exp(np.asarray(log_scale, dtype=np.float64))


def inverse_scale(scale):
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0.0):
        raise ContractViolation("saturated attribute: scales must be positive")
    return np.log(scale)


@dataclass
class GaussianSet:
    """Attribute arrays for N splats, in 'global' or 'local' coordinates.

    Local-space sets must carry a per-splat face binding.
    """

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    color_logit: np.ndarray
    space: str = "global"
    binding: Optional[np.ndarray] = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(-1, 3)
        n = self.position.shape[0]
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(n, 4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(n, 3)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64).reshape(n)
        self.color_logit = np.asarray(self.color_logit, dtype=np.float64).reshape(n, 3)
        if self.space not in ("global", "local"):
            raise ContractViolation(f"unknown coordinate space {self.space!r}")
        if self.binding is not None:
            self.binding = np.asarray(self.binding, dtype=np.int64).reshape(n)
        if self.space == "local" and self.binding is None:
            raise ContractViolation("local-space GaussianSet requires a binding")

    def __len__(self) -> int:
        return self.position.shape[0]

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.position.copy(),
            self.rotation.copy(),
            self.log_scale.copy(),
            self.opacity_logit.copy(),
            self.color_logit.copy(),
            self.space,
            None if self.binding is None else self.binding.copy(),
        )

    def subset(self, idx) -> "GaussianSet":
        return GaussianSet(
            self.position[idx],
            self.rotation[idx],
            self.log_scale[idx],
            self.opacity_logit[idx],
            self.color_logit[idx],
            self.space,
            None if self.binding is None else self.binding[idx],
        )

    @staticmethod
    def empty(space: str = "global") -> "GaussianSet":
        z = np.zeros((0, 3))
        return GaussianSet(z, np.zeros((0, 4)), z.copy(), np.zeros(0), z.copy(), space,
                           np.zeros(0, dtype=np.int64) if space == "local" else None)

    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    def color(self) -> np.ndarray:
        return sigmoid(self.color_logit)

    def scale(self) -> np.ndarray:
        return activate_scale(self.log_scale)

    def to_flat(self) -> np.ndarray:
        """Concatenated (position, rotation, log_scale, opacity, color)."""
        return np.concatenate(
            [
                self.position.ravel(),
                self.rotation.ravel(),
                self.log_scale.ravel(),
                self.opacity_logit.ravel(),
                self.color_logit.ravel(),
            ]
        )


@dataclass(frozen=True)
class Gaussian:
    """A single splat, mainly for targeted tests and debugging."""

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    color_logit: np.ndarray

    def as_set(self) -> GaussianSet:
        return GaussianSet(
            np.asarray(self.position)[None],
            np.asarray(self.rotation)[None],
            np.asarray(self.log_scale)[None],
            np.asarray([self.opacity_logit]),
            np.asarray(self.color_logit)[None],
        )


@dataclass
class RenderOutput:
    """color in [0,1], depth in world units (+inf where alpha <= floor),
    alpha is the accumulated transmittance-weighted opacity."""

    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray


@dataclass
class GradientBuffer:
    """Per-splat partials of a scalar loss w.r.t. the raw attributes."""

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    color_logit: np.ndarray

    @staticmethod
    def zeros(n: int) -> "GradientBuffer":
        return GradientBuffer(
            np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3))
        )

    def check_finite(self):
        for name in ATTRIBUTE_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ShapeError(f"non-finite gradient in {name}")

    def scaled(self, k: float) -> "GradientBuffer":
        return GradientBuffer(
            self.position * k,
            self.rotation * k,
            self.log_scale * k,
            self.opacity_logit * k,
            self.color_logit * k,
        )

    def add_(self, other: "GradientBuffer", k: float = 1.0):
        self.position += k * other.position
        self.rotation += k * other.rotation
        self.log_scale += k * other.log_scale
        self.opacity_logit += k * other.opacity_logit
        self.color_logit += k * other.color_logit
        return self

    def to_flat(self) -> np.ndarray:
        return np.concatenate(
            [
                self.position.ravel(),
                self.rotation.ravel(),
                self.log_scale.ravel(),
                self.opacity_logit.ravel(),
                self.color_logit.ravel(),
            ]
        )
