"""Fixed random-convolution perceptual distance.

A frozen bank of 32 zero-mean, unit-norm 5x5x3 filters is applied at two
scales (full resolution and 2x box-downsampled); the distance is the mean
over scales of the RMS feature difference. The filter weights come from a
fixed seed so the bank is identical across runs and machines.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import _rng
from .upsample import box_downsample

PERCEPTUAL_SEED = 61803
_TINY = 1e-30


class FeatureBank:
    def __init__(self, n_filters: int = 32, ksize: int = 5, seed: int = PERCEPTUAL_SEED):
        rng = _rng(seed, "perceptual-bank")
        w = rng.standard_normal((n_filters, ksize, ksize, 3))
        w -= w.mean(axis=(1, 2, 3), keepdims=True)
        w /= np.sqrt(np.sum(w * w, axis=(1, 2, 3), keepdims=True))
        self.weights = w
        self.ksize = ksize
        # forward matrix, window flattening order (c, u, v)
        self._wf = np.transpose(w, (3, 1, 2, 0)).reshape(3 * ksize * ksize, n_filters)
        # backward matrix, window flattening order (k, u, v), kernel flipped
        self._wb = w[:, ::-1, ::-1, :].reshape(n_filters * ksize * ksize, 3)

    def _conv(self, img: np.ndarray) -> np.ndarray:
        k = self.ksize
        h, w = img.shape[0], img.shape[1]
        if h < k or w < k:
            return np.zeros((0, 0, self.weights.shape[0]))
        win = sliding_window_view(img, (k, k), axis=(0, 1))  # (h-k+1, w-k+1, 3, k, k)
        cols = win.reshape(win.shape[0], win.shape[1], -1)
        return cols @ self._wf

    def _conv_backward(self, d_feat: np.ndarray, h: int, w: int) -> np.ndarray:
        k = self.ksize
        if d_feat.size == 0:
            return np.zeros((h, w, 3))
        pad = np.zeros((h + k - 1, w + k - 1, d_feat.shape[2]))
        pad[k - 1 : k - 1 + d_feat.shape[0], k - 1 : k - 1 + d_feat.shape[1]] = d_feat
        win = sliding_window_view(np.transpose(pad, (2, 0, 1)), (k, k), axis=(1, 2))
        # win: (K, h, w, k, k) -> (h, w, K*k*k) in (k-index, u, v) order
        cols = np.transpose(win, (1, 2, 0, 3, 4)).reshape(h, w, -1)
        return cols @ self._wb

    def features(self, img: np.ndarray):
        img = np.asarray(img, dtype=np.float64)
        return [self._conv(img), self._conv(box_downsample(img, 2))]

    def distance_and_grad(self, img: np.ndarray, target_feats):
        """(distance, d distance / d img) against precomputed target features."""
        img = np.asarray(img, dtype=np.float64)
        h, w = img.shape[0], img.shape[1]
        feats = self.features(img)
        n_scales = len(feats)
        value = 0.0
        grad = np.zeros_like(img)
        for s, (f, tf) in enumerate(zip(feats, target_feats)):
            if f.size == 0:
                continue
            diff = f - tf
            rms = np.sqrt(np.mean(diff * diff))
            value += rms / n_scales
            d_f = diff / (max(rms, _TINY) * diff.size * n_scales)
            if s == 0:
                grad += self._conv_backward(d_f, h, w)
            else:
                h2, w2 = (h // 2) * 2, (w // 2) * 2
                d_half = self._conv_backward(d_f, h2 // 2, w2 // 2)
                up = np.repeat(np.repeat(d_half, 2, axis=0), 2, axis=1) / 4.0
                grad[:h2, :w2] += up
        return value, grad

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        return self.distance_and_grad(a, self.features(b))[0]
