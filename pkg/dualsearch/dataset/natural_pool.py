import csv
import logging
import math
import os
from typing import Tuple

import torch
import torch.nn.functional as F

from dualsearch.dataclasses.exposure_pair import Image, NaturalPool
from dualsearch.errors import DuplicateId, EmptyPool, MalformedManifest, MissingFile
from dualsearch.utils.image_utils import decode_image, luminance

logger = logging.getLogger(__name__)

POOL_HEADER = ["id", "path"]


def load_natural_pool(manifest_path: str, seed: int = 0) -> NaturalPool:
    """Load natural-light positives listed in a CSV with header `id,path`."""
    if not os.path.exists(manifest_path):
        raise MissingFile(f"Natural pool manifest not found: {manifest_path}")
    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    images = []
    seen = set()
    with open(manifest_path, "r", encoding="utf-8", newline="") as openfile:
        reader = csv.reader(openfile)
        header = next(reader, None)
        if header is None or [name.strip() for name in header] != POOL_HEADER:
            raise MalformedManifest(f"header must be '{','.join(POOL_HEADER)}', got {header}", row=1)
        for row_number, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 2 or not row[0].strip() or not row[1].strip():
                raise MalformedManifest("expected 'id,path'", row=row_number)
            image_id = row[0].strip()
            if image_id in seen:
                raise DuplicateId(f"Duplicate id '{image_id}' at row {row_number}")
            seen.add(image_id)
            path = row[1].strip()
            if not os.path.isabs(path):
                path = os.path.normpath(os.path.join(base_dir, path))
            images.append(decode_image(path))
    logger.debug("Loaded %d natural images from %s", len(images), manifest_path)
    return NaturalPool(tuple(images), seed)


def _match_channels(pixels: torch.Tensor, channels: int) -> torch.Tensor:
    if pixels.shape[0] == channels:
        return pixels
    if channels == 3:
        return pixels.expand(3, -1, -1).clone()
    return luminance(pixels)


def sample_natural(pool: NaturalPool, shape: Tuple[int, int, int], rng: torch.Generator) -> Image:
    """
    Draw one pool image and fit it to shape (H, W, C).

    Images smaller than the target are bilinearly upsampled first, keeping their aspect
    ratio; the result is then center-cropped, never warped.
    """
    if len(pool) == 0:
        raise EmptyPool("Natural pool is empty")
    height, width, channels = shape
    index = int(torch.randint(0, len(pool), (1,), generator=rng))
    pixels = _match_channels(pool.images[index].pixels, channels)
    src_h, src_w = pixels.shape[1:]
    if src_h < height or src_w < width:
        scale = max(height / src_h, width / src_w)
        size = (max(height, math.ceil(src_h * scale)), max(width, math.ceil(src_w * scale)))
        pixels = F.interpolate(pixels.unsqueeze(0), size=size, mode="bilinear", align_corners=False)[0]
        pixels = pixels.clamp(0, 1)
        src_h, src_w = size
    top = (src_h - height) // 2
    left = (src_w - width) // 2
    cropped = pixels[:, top:top + height, left:left + width].clone()
    return Image.from_tensor(cropped)
