import math

import numpy as np
from scipy.signal import convolve2d

from dualsearch.dataclasses.exposure_pair import ExposurePair
from dualsearch.errors import ImageTooSmall
from dualsearch.metrics.basic import ImageLike, luma_triple

VIF_SIGMA_NSQ = 2.0
VIF_SCALES = 4

QABF_TG, QABF_KG, QABF_DG = 0.9994, -15.0, 0.5
QABF_TA, QABF_KA, QABF_DA = 0.9879, -22.0, 0.8

SOBEL_Y = np.array([[1, 2, 1], [0, 0, 0], [-1, -2, -1]], dtype=np.float64)
SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)


def gaussian_mask(size: int, sigma: float) -> np.ndarray:
    """Normalized 2D Gaussian, matching fspecial('gaussian', ...)."""
    m = (size - 1.0) / 2.0
    y, x = np.ogrid[-m:m + 1, -m:m + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def _valid(image: np.ndarray, window: np.ndarray, what: str) -> np.ndarray:
    if min(image.shape) < window.shape[0]:
        raise ImageTooSmall(f"{what}: {image.shape} is smaller than the {window.shape[0]}x{window.shape[0]} window")
    return convolve2d(image, window, mode="valid")


def vif_single(ref: np.ndarray, dist: np.ndarray) -> float:
    """Pixel-domain multi-scale VIF of dist against ref."""
    num, den = 0.0, 0.0
    for scale in range(1, VIF_SCALES + 1):
        size = 2 ** (VIF_SCALES - scale + 1) + 1
        win = gaussian_mask(size, size / 5.0)
        if scale > 1:
            ref = _valid(ref, win, "VIF")[::2, ::2]
            dist = _valid(dist, win, "VIF")[::2, ::2]
        mu1 = _valid(ref, win, "VIF")
        mu2 = _valid(dist, win, "VIF")
        sigma1_sq = _valid(ref * ref, win, "VIF") - mu1 * mu1
        sigma2_sq = _valid(dist * dist, win, "VIF") - mu2 * mu2
        sigma12 = _valid(ref * dist, win, "VIF") - mu1 * mu2
        sigma1_sq[sigma1_sq < 0] = 0
        sigma2_sq[sigma2_sq < 0] = 0

        g = sigma12 / (sigma1_sq + 1e-10)
        sv_sq = sigma2_sq - g * sigma12

        flat_ref = sigma1_sq < 1e-10
        g[flat_ref] = 0
        sv_sq[flat_ref] = sigma2_sq[flat_ref]
        sigma1_sq[flat_ref] = 0

        flat_dist = sigma2_sq < 1e-10
        g[flat_dist] = 0
        sv_sq[flat_dist] = 0

        negative = g < 0
        sv_sq[negative] = sigma2_sq[negative]
        g[negative] = 0
        sv_sq[sv_sq <= 1e-10] = 1e-10

        num += np.sum(np.log10(1 + g ** 2 * sigma1_sq / (sv_sq + VIF_SIGMA_NSQ)))
        den += np.sum(np.log10(1 + sigma1_sq / VIF_SIGMA_NSQ))
    if den == 0:
        # a reference without texture carries no information to preserve
        return 1.0 if num == 0 else 0.0
    return float(num / den)


def vif(f: ImageLike, pair: ExposurePair) -> float:
    """Fusion VIF: single-source VIF of f against each exposure, summed."""
    y_f, y_u, y_o = luma_triple(f, pair)
    return vif_single(y_u, y_f) + vif_single(y_o, y_f)


def _sobel(image: np.ndarray):
    padded = np.pad(image, 1, mode="edge")
    # convolve2d flips the kernel; flipping first makes this a plain correlation
    sx = convolve2d(padded, np.flip(SOBEL_X), mode="valid")
    sy = convolve2d(padded, np.flip(SOBEL_Y), mode="valid")
    strength = np.sqrt(sx * sx + sy * sy)
    angle = np.full(image.shape, math.pi / 2)
    nonzero = sx != 0
    angle[nonzero] = np.arctan(sy[nonzero] / sx[nonzero])
    return strength, angle


def _preservation(g_src: np.ndarray, a_src: np.ndarray, g_f: np.ndarray, a_f: np.ndarray) -> np.ndarray:
    high = np.maximum(g_src, g_f)
    low = np.minimum(g_src, g_f)
    relative = np.divide(low, high, out=np.zeros_like(high), where=high > 0)
    orientation = 1 - np.abs(a_src - a_f) / (math.pi / 2)
    q_g = QABF_TG / (1 + np.exp(QABF_KG * (relative - QABF_DG)))
    q_a = QABF_TA / (1 + np.exp(QABF_KA * (orientation - QABF_DA)))
    return q_g * q_a


def qabf(f: ImageLike, pair: ExposurePair) -> float:
    """Edge-preservation score Q^AB/F in [0, 1]."""
    y_f, y_u, y_o = luma_triple(f, pair)
    if min(y_f.shape) < 3:
        raise ImageTooSmall(f"QABF needs at least 3x3, got {y_f.shape}")
    g_u, a_u = _sobel(y_u)
    g_o, a_o = _sobel(y_o)
    g_f, a_f = _sobel(y_f)
    weight = np.sum(g_u + g_o)
    if weight == 0:
        return 0.0
    score = np.sum(_preservation(g_u, a_u, g_f, a_f) * g_u + _preservation(g_o, a_o, g_f, a_f) * g_o) / weight
    return float(np.clip(score, 0.0, 1.0))
