"""Image upsampling: separable bicubic default, external-command contract.

The external contract matches the CLI --sr-cmd flag: the harness writes
in.ppm, runs `<program> in.ppm out.ppm <factor>`, and reads out.ppm; the
program must emit an image exactly factor times larger within the timeout.
"""

from __future__ import annotations

import subprocess
import tempfile
from pathlib import Path

import numpy as np

from .errors import ContractViolation, UpsamplerContractError
from .formats import read_ppm, write_ppm

_CUBIC_A = -0.5  # Catmull-Rom


def _cubic_kernel(t: np.ndarray) -> np.ndarray:
    t = np.abs(t)
    a = _CUBIC_A
    out = np.zeros_like(t)
    near = t <= 1.0
    mid = (t > 1.0) & (t < 2.0)
    out[near] = (a + 2) * t[near] ** 3 - (a + 3) * t[near] ** 2 + 1
    out[mid] = a * t[mid] ** 3 - 5 * a * t[mid] ** 2 + 8 * a * t[mid] - 4 * a
    return out


def _resample_matrix(n_in: int, factor: int) -> np.ndarray:
    """(n_in*factor, n_in) bicubic weights, center-aligned, edge-clamped,
    rows normalized so constants are preserved exactly."""
    n_out = n_in * factor
    dst = np.arange(n_out)
    src = (dst + 0.5) / factor - 0.5
    base = np.floor(src).astype(np.int64)
    frac = src - base
    M = np.zeros((n_out, n_in))
    for k in range(-1, 3):
        w = _cubic_kernel(frac - k)
        idx = np.clip(base + k, 0, n_in - 1)
        np.add.at(M, (dst, idx), w)
    M /= M.sum(axis=1, keepdims=True)
    return M


def upsample_image(img: np.ndarray, factor: int, method: str = "bicubic") -> np.ndarray:
    """Upsample HxW or HxWxC by an integer factor in {2, 4}."""
    if factor not in (2, 4):
        raise ContractViolation("upsample factor must be 2 or 4")
    if method != "bicubic":
        raise ContractViolation(f"unknown upsample method {method!r}")
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    My = _resample_matrix(img.shape[0], factor)
    Mx = _resample_matrix(img.shape[1], factor)
    out = np.einsum("oi,ijc->ojc", My, img)
    out = np.einsum("pj,ojc->opc", Mx, out)
    return out[:, :, 0] if squeeze else out


def box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Average over factor x factor blocks (trailing remainder cropped)."""
    img = np.asarray(img, dtype=np.float64)
    h = (img.shape[0] // factor) * factor
    w = (img.shape[1] // factor) * factor
    img = img[:h, :w]
    if img.ndim == 2:
        return img.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return img.reshape(h // factor, factor, w // factor, factor, -1).mean(axis=(1, 3))


class BicubicUpsampler:
    def __call__(self, img: np.ndarray, factor: int) -> np.ndarray:
        return upsample_image(img, factor)


class ExternalUpsampler:
    """Runs `<program> in.ppm out.ppm <factor>` in a scratch directory."""

    def __init__(self, program: str, timeout_s: float = 60.0):
        self.program = program
        self.timeout_s = timeout_s

    def __call__(self, img: np.ndarray, factor: int) -> np.ndarray:
        with tempfile.TemporaryDirectory(prefix="headsr-sr-") as tmp:
            inp = Path(tmp) / "in.ppm"
            outp = Path(tmp) / "out.ppm"
            write_ppm(inp, img)
            try:
                proc = subprocess.run(
                    [self.program, str(inp), str(outp), str(factor)],
                    timeout=self.timeout_s,
                    capture_output=True,
                )
            except subprocess.TimeoutExpired as e:
                raise UpsamplerContractError(
                    f"upsampler contract violation: timed out after {self.timeout_s}s"
                ) from e
            if proc.returncode != 0:
                raise UpsamplerContractError(
                    f"upsampler contract violation: exit code {proc.returncode}"
                )
            if not outp.exists():
                raise UpsamplerContractError("upsampler contract violation: no out.ppm")
            out = read_ppm(outp)
        expect = (img.shape[0] * factor, img.shape[1] * factor, 3)
        if out.shape != expect:
            raise UpsamplerContractError(
                f"upsampler contract violation: got {out.shape}, expected {expect}"
            )
        return out
