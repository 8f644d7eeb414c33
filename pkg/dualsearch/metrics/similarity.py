import logging
from typing import Union

import numpy as np
import torch

from dualsearch.dataclasses.exposure_pair import ExposurePair
from dualsearch.errors import ImageTooSmall
from dualsearch.metrics.basic import ImageLike, luma_pair, luma_triple
from dualsearch.structural import SSIM_WINDOW, gaussian_window, mef_ssim_index, ssim_components

logger = logging.getLogger(__name__)

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def scale_count(height: int, width: int, max_scales: int = len(MS_SSIM_WEIGHTS), what: str = "MS-SSIM") -> int:
    """Largest number of dyadic scales whose coarsest level still holds an 11x11 window."""
    smallest = min(height, width)
    if smallest < SSIM_WINDOW:
        raise ImageTooSmall(f"{what} needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {height}x{width}")
    scales = max_scales
    while scales > 1 and smallest < SSIM_WINDOW * 2 ** (scales - 1):
        scales -= 1
    if scales < max_scales:
        logger.warning("%s: %dx%d is too small for %d scales, using %d", what, height, width, max_scales, scales)
    return scales


def scale_weights(scales: int) -> np.ndarray:
    weights = np.asarray(MS_SSIM_WEIGHTS[:scales], dtype=np.float64)
    return weights / weights.sum()


def downsample(image: np.ndarray) -> np.ndarray:
    """2x2 mean over (i, i+1) x (j, j+1) with symmetric bottom/right border, then every second pixel."""
    p = np.pad(image, ((0, 1), (0, 1)), mode="symmetric")
    return (0.25 * (p[:-1, :-1] + p[1:, :-1] + p[:-1, 1:] + p[1:, 1:]))[::2, ::2]


def _tensor(y: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(y)).reshape(1, 1, *y.shape)


def ms_ssim(f: ImageLike, r: ImageLike) -> float:
    """Multi-scale SSIM of the luminance on the [0, 255] range."""
    y_f, y_r = luma_pair(f, r)
    scales = scale_count(*y_f.shape)
    weights = scale_weights(scales)
    x, y = y_f, y_r
    window = gaussian_window(dtype=torch.float64)
    result = 1.0
    for level in range(scales):
        ssim_map, cs_map = ssim_components(_tensor(x), _tensor(y), 255.0, window)
        if level == scales - 1:
            value = float(torch.relu(ssim_map.mean()))
        else:
            value = float(torch.relu(cs_map.mean()))
            x, y = downsample(x), downsample(y)
        result *= value ** weights[level]
    return float(result)


def mef_ssim_metric(f: ImageLike, pair: ExposurePair) -> float:
    """MEF-SSIM similarity of the fused luminance against both exposures."""
    y_f, y_u, y_o = luma_triple(f, pair)
    with torch.no_grad():
        value = mef_ssim_index(_tensor(y_f / 255.0), [_tensor(y_u / 255.0), _tensor(y_o / 255.0)])
    return float(value[0])
