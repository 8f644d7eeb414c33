import os
from typing import List, Optional

import numpy as np
import pytest
import torch
import torch.nn as nn
from PIL import Image as PILImage

from dualsearch import shared
from dualsearch.dataclasses.exposure_pair import ExposurePair, Image, PairBatch
from dualsearch.dataclasses.run_config import NetworkConfig

shared.show_progress = False


def smooth_scene(seed: int, size: int) -> np.ndarray:
    """H×W×3 scene in [0, 1] built from a few random sinusoids plus mild texture."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size] / float(size)
    scene = np.zeros((size, size, 3))
    for channel in range(3):
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            scene[..., channel] += np.sin(2 * np.pi * (fx * x + fy * y) + phase)
    scene = (scene - scene.min()) / (scene.max() - scene.min() + 1e-12)
    scene = 0.85 * scene + 0.15 * rng.uniform(size=scene.shape)
    return np.clip(scene, 0, 1)


def exposures(scene: np.ndarray):
    under = 0.45 * scene ** 2.2
    over = 1 - 0.45 * (1 - scene) ** 2.2
    return under, over


def write_png(path: str, array: np.ndarray):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    PILImage.fromarray(np.rint(np.clip(array, 0, 1) * 255).astype(np.uint8)).save(path)


def make_pair_files(root: str, count: int = 8, size: int = 32, with_reference=lambda i: i % 2 == 0,
                    prefix: str = "s", manifest_name: str = "manifest.csv") -> str:
    """Write synthetic exposure pairs as PNG plus their manifest; returns the manifest path."""
    rows = ["id,under,over,reference"]
    for i in range(count):
        image_id = f"{prefix}{i:02d}"
        scene = smooth_scene(i, size)
        under, over = exposures(scene)
        write_png(os.path.join(root, "images", f"{image_id}_u.png"), under)
        write_png(os.path.join(root, "images", f"{image_id}_o.png"), over)
        reference = ""
        if with_reference(i):
            write_png(os.path.join(root, "images", f"{image_id}_r.png"), scene)
            reference = f"images/{image_id}_r.png"
        rows.append(f"{image_id},images/{image_id}_u.png,images/{image_id}_o.png,{reference}")
    path = os.path.join(root, manifest_name)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(rows) + "\n")
    return path


def make_natural_files(root: str, count: int = 3, size: int = 40) -> str:
    rows = ["id,path"]
    for i in range(count):
        write_png(os.path.join(root, "natural", f"n{i}.png"), smooth_scene(100 + i, size))
        rows.append(f"n{i},natural/n{i}.png")
    path = os.path.join(root, "natural.csv")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(rows) + "\n")
    return path


def tensor_image(array: np.ndarray) -> Image:
    pixels = torch.from_numpy(np.ascontiguousarray(array.transpose(2, 0, 1))).float()
    return Image.from_tensor(pixels)


def make_pair(seed: int = 0, size: int = 16, reference: bool = True, image_id: str = "p") -> ExposurePair:
    scene = smooth_scene(seed, size)
    under, over = exposures(scene)
    return ExposurePair(tensor_image(under), tensor_image(over), tensor_image(scene) if reference else None, image_id)


def make_batch(seeds: List[int], size: int = 16, references: Optional[List[bool]] = None,
               dtype=torch.float32) -> PairBatch:
    references = references or [True] * len(seeds)
    pairs = [make_pair(s, size, r, f"p{s}") for s, r in zip(seeds, references)]
    return PairBatch.from_pairs(pairs).to(dtype=dtype)


class IdentityExtractor(nn.Module):
    """Single 'layer' that returns its input."""

    def forward(self, x):
        return [x]


class SmoothExtractor(nn.Module):
    """Two tanh conv layers with fixed weights; smooth everywhere for gradient checks."""

    def __init__(self, dtype=torch.float64):
        super().__init__()
        generator = torch.Generator().manual_seed(7)
        self.conv1 = nn.Conv2d(3, 4, 3, padding=1).to(dtype)
        self.conv2 = nn.Conv2d(4, 4, 3, padding=1).to(dtype)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=generator, dtype=dtype) * 0.3)
                conv.bias.zero_()
        for param in self.parameters():
            param.requires_grad_(False)

    def forward(self, x):
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        h1 = torch.tanh(self.conv1(x))
        h2 = torch.tanh(self.conv2(h1))
        return [h1, h2]


@pytest.fixture
def tiny_network() -> NetworkConfig:
    return NetworkConfig(width=4, stream_edges=1, iterations=1)


@pytest.fixture
def toy_manifest(tmp_path) -> str:
    return make_pair_files(str(tmp_path), count=8, size=32)


@pytest.fixture
def natural_manifest(tmp_path) -> str:
    return make_natural_files(str(tmp_path))


@pytest.fixture(autouse=True)
def reset_status():
    shared.status.interrupted = False
    shared.status.interrupted_after_epoch = False
    yield
    shared.status.interrupted = False
    shared.status.interrupted_after_epoch = False
