from typing import Tuple, Union

import numpy as np
import torch

from dualsearch.dataclasses.exposure_pair import ExposurePair, Image
from dualsearch.errors import ConstantImage, ShapeMismatch
from dualsearch.utils.image_utils import luminance_255

ImageLike = Union[Image, torch.Tensor, np.ndarray]


def luma(image: ImageLike) -> np.ndarray:
    return luminance_255(image)


def luma_pair(f: ImageLike, r: ImageLike) -> Tuple[np.ndarray, np.ndarray]:
    y_f, y_r = luma(f), luma(r)
    if y_f.shape != y_r.shape:
        raise ShapeMismatch(f"Shapes differ: {y_f.shape} vs {y_r.shape}")
    return y_f, y_r


def luma_triple(f: ImageLike, pair: ExposurePair) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    y_f = luma(f)
    y_u, y_o = luma(pair.under), luma(pair.over)
    if not (y_f.shape == y_u.shape == y_o.shape):
        raise ShapeMismatch(f"Shapes differ: fused {y_f.shape}, under {y_u.shape}, over {y_o.shape}")
    return y_f, y_u, y_o


def sd(f: ImageLike) -> float:
    """Population standard deviation of the luminance."""
    return float(np.std(luma(f)))


def en(f: ImageLike) -> float:
    """Shannon entropy in bits of the 256-level luminance histogram."""
    levels = np.clip(np.rint(luma(f)), 0, 255).astype(np.int64)
    counts = np.bincount(levels.ravel(), minlength=256)
    p = counts[counts > 0] / levels.size
    return float(abs(-np.sum(p * np.log2(p))))


def cc(f: ImageLike, r: ImageLike) -> float:
    """Pearson correlation of the luminance of f and r."""
    y_f, y_r = luma_pair(f, r)
    a = y_f - y_f.mean()
    b = y_r - y_r.mean()
    denominator = np.sqrt(np.sum(a * a) * np.sum(b * b))
    if denominator == 0:
        raise ConstantImage("Correlation is undefined for a constant image")
    return float(np.clip(np.sum(a * b) / denominator, -1.0, 1.0))
