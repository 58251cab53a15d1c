"""Quantitative evaluation: cosine similarity, PSNR, SSIM.

PSNR/SSIM stand in for learned perceptual metrics (LPIPS) which would need a
pretrained network; reports carry a note to that effect.
"""

from __future__ import annotations

import numpy as np


def cosine_similarity(u, v) -> float:
    """u . v / (|u| |v|) in float64, clamped to [-1, 1]."""
    a = np.asarray(u, dtype=np.float64).reshape(-1)
    b = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine_similarity: zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; inf for identical images."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"psnr: shapes {x.shape} and {y.shape} differ")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def _to_gray(img: np.ndarray) -> np.ndarray:
    """(C, H, W) or (H, W) -> (H, W) by channel mean."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        return arr.mean(axis=0)
    if arr.ndim == 2:
        return arr
    raise ValueError(f"expected (C,H,W) or (H,W) image, got shape {arr.shape}")


def ssim(a, b, window: int = 8, c1: float = 1e-4, c2: float = 9e-4) -> float:
    """Mean local SSIM over non-overlapping windows of the grayscale images."""
    x = _to_gray(a)
    y = _to_gray(b)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shapes {x.shape} and {y.shape} differ")
    h, w = x.shape
    if h < window or w < window:
        raise ValueError(f"ssim: image {x.shape} smaller than window {window}")
    values = []
    for i in range(0, h - window + 1, window):
        for j in range(0, w - window + 1, window):
            wx = x[i : i + window, j : j + window]
            wy = y[i : i + window, j : j + window]
            mx, my = wx.mean(), wy.mean()
            vx, vy = wx.var(), wy.var()
            cov = ((wx - mx) * (wy - my)).mean()
            values.append(((2 * mx * my + c1) * (2 * cov + c2))
                          / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(values))
