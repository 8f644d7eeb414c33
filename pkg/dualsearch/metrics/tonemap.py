import logging
import math

import numpy as np
from scipy.signal import convolve2d
from scipy.stats import beta as beta_dist, norm

from dualsearch.metrics.basic import ImageLike, luma_pair
from dualsearch.metrics.fidelity import gaussian_mask
from dualsearch.metrics.similarity import downsample, scale_count, scale_weights
from dualsearch.structural import SSIM_SIGMA, SSIM_WINDOW

logger = logging.getLogger(__name__)

TMQI_A = 0.8012
TMQI_ALPHA = 0.3046
TMQI_BETA = 0.7088
TMQI_C1 = 0.01
TMQI_C2 = 10.0
TMQI_SCALES = 5
NATURAL_BLOCK = 11
NATURAL_BETA = (4.4, 10.1)
NATURAL_SIGMA_SCALE = 64.29
NATURAL_MU = 115.94
NATURAL_SIGMA = 27.99


def _contrast_threshold(spatial_frequency: float) -> float:
    csf = 100 * 2.6 * (0.0192 + 0.114 * spatial_frequency) * math.exp(-(0.114 * spatial_frequency) ** 1.1)
    return 128.0 / (1.4 * csf)


def local_fidelity(reference: np.ndarray, fused: np.ndarray, spatial_frequency: float) -> float:
    window = gaussian_mask(SSIM_WINDOW, SSIM_SIGMA)
    mu1 = convolve2d(reference, window, mode="valid")
    mu2 = convolve2d(fused, window, mode="valid")
    sigma1 = np.sqrt(np.maximum(convolve2d(reference * reference, window, mode="valid") - mu1 * mu1, 0))
    sigma2 = np.sqrt(np.maximum(convolve2d(fused * fused, window, mode="valid") - mu2 * mu2, 0))
    sigma12 = convolve2d(reference * fused, window, mode="valid") - mu1 * mu2
    u = _contrast_threshold(spatial_frequency)
    sigma1p = norm.cdf(sigma1, loc=u, scale=u / 3)
    sigma2p = norm.cdf(sigma2, loc=u, scale=u / 3)
    s_map = ((2 * sigma1p * sigma2p + TMQI_C1) / (sigma1p * sigma1p + sigma2p * sigma2p + TMQI_C1)
             * ((sigma12 + TMQI_C2) / (sigma1 * sigma2 + TMQI_C2)))
    return float(np.clip(np.mean(s_map), 0.0, 1.0))


def structural_fidelity(reference: np.ndarray, fused: np.ndarray) -> float:
    scales = scale_count(*reference.shape, max_scales=TMQI_SCALES, what="TMQI")
    weights = scale_weights(scales)
    frequency = 32.0
    result = 1.0
    for level in range(scales):
        frequency /= 2
        result *= local_fidelity(reference, fused, frequency) ** weights[level]
        if level < scales - 1:
            reference, fused = downsample(reference), downsample(fused)
    return float(result)


def _block_std(image: np.ndarray) -> float:
    """Pixel-weighted mean of the standard deviations of non-overlapping 11x11 blocks."""
    height, width = image.shape
    total = 0.0
    for top in range(0, height, NATURAL_BLOCK):
        for left in range(0, width, NATURAL_BLOCK):
            block = image[top:top + NATURAL_BLOCK, left:left + NATURAL_BLOCK]
            spread = float(np.std(block, ddof=1)) if block.size > 1 else 0.0
            total += spread * block.size
    return total / image.size


def statistical_naturalness(fused: np.ndarray) -> float:
    a, b = NATURAL_BETA
    mode = (a - 1) / (a + b - 2)
    contrast = beta_dist.pdf(_block_std(fused) / NATURAL_SIGMA_SCALE, a, b) / beta_dist.pdf(mode, a, b)
    brightness = (norm.pdf(float(np.mean(fused)), NATURAL_MU, NATURAL_SIGMA)
                  / norm.pdf(NATURAL_MU, NATURAL_MU, NATURAL_SIGMA))
    return float(contrast * brightness)


def tmqi(f: ImageLike, r: ImageLike) -> float:
    """Tone-mapped image quality of f with r as the high-range reference, both on the [0, 255] scale."""
    y_f, y_r = luma_pair(f, r)
    s = structural_fidelity(y_r, y_f)
    n = statistical_naturalness(y_f)
    q = TMQI_A * s ** TMQI_ALPHA + (1 - TMQI_A) * n ** TMQI_BETA
    return float(np.clip(q, 0.0, 1.0))
