import logging
import os
from typing import Union

import numpy as np
import torch
from PIL import Image as PILImage, UnidentifiedImageError

from dualsearch.dataclasses.exposure_pair import Image
from dualsearch.errors import DecodeError, MissingFile

logger = logging.getLogger(__name__)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
SIXTEEN_BIT_MODES = ("I;16", "I;16B", "I;16L", "I;16N", "I")


def _unit_range(array: np.ndarray, mode: str) -> np.ndarray:
    """Scale decoded samples to [0, 1] by the bit depth they were stored with."""
    if mode in SIXTEEN_BIT_MODES:
        peak = 65535.0
    elif np.issubdtype(array.dtype, np.bool_):
        peak = 1.0
    elif np.issubdtype(array.dtype, np.integer):
        peak = float(np.iinfo(array.dtype).max)
    else:
        peak = 1.0
    return array.astype(np.float64) / peak


def decode_image(image_path: str) -> Image:
    """Decode an 8- or 16-bit PNG/JPEG file into an Image with values in [0, 1]."""
    if not os.path.exists(image_path):
        raise MissingFile(f"Image file not found: {image_path}")
    try:
        with PILImage.open(image_path) as img:
            img.load()
            if img.mode == "P":
                img = img.convert("RGBA" if "transparency" in img.info else "RGB")
            elif img.mode in ("CMYK", "YCbCr", "LAB", "HSV"):
                img = img.convert("RGB")
            mode = img.mode
            array = _unit_range(np.asarray(img), mode)
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise DecodeError(f"Unable to decode {image_path}: {e}") from e
    if array.ndim == 2:
        array = array[None, :, :]
    else:
        # Alpha is dropped.
        array = array[:, :, :1] if mode == "LA" else array[:, :, :3]
        array = array.transpose(2, 0, 1)
    pixels = torch.from_numpy(np.clip(array, 0.0, 1.0).astype(np.float32))
    try:
        return Image.from_tensor(pixels)
    except ValueError as e:
        raise DecodeError(f"Unusable image {image_path}: {e}") from e


def to_uint8(pixels: torch.Tensor) -> np.ndarray:
    """C×H×W tensor in [0, 1] to an H×W(×3) uint8 array."""
    array = (pixels.detach().to("cpu", torch.float64).clamp(0, 1) * 255.0).round().to(torch.uint8).numpy()
    if array.shape[0] == 1:
        return array[0]
    return np.ascontiguousarray(array.transpose(1, 2, 0))


def encode_png(image: Union[Image, torch.Tensor], image_path: str):
    pixels = image.pixels if isinstance(image, Image) else image
    directory = os.path.dirname(os.path.abspath(image_path))
    os.makedirs(directory, exist_ok=True)
    array = to_uint8(pixels)
    PILImage.fromarray(array).save(image_path, format="PNG")


def luminance(pixels: torch.Tensor) -> torch.Tensor:
    """Y = 0.299R + 0.587G + 0.114B over the channel axis; single-channel input passes through."""
    channel_dim = pixels.dim() - 3
    if pixels.shape[channel_dim] == 1:
        return pixels
    r, g, b = pixels.unbind(dim=channel_dim)
    y = LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b
    return y.unsqueeze(channel_dim)


def luminance_255(image: Union[Image, torch.Tensor, np.ndarray]) -> np.ndarray:
    """Luminance as a float64 H×W array on the [0, 255] scale."""
    if isinstance(image, Image):
        pixels = image.pixels
    elif isinstance(image, np.ndarray):
        pixels = torch.from_numpy(image)
    else:
        pixels = image
    pixels = pixels.detach().to("cpu", torch.float64)
    if pixels.dim() == 2:
        pixels = pixels.unsqueeze(0)
    return luminance(pixels)[0].numpy() * 255.0
