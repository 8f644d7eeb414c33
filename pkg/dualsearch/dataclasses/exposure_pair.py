from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch

from dualsearch.errors import DimensionMismatch

COLOR_SPACES = ("RGB", "grayscale")
MIN_SIDE = 8


@dataclass(frozen=True)
class Image:
    """
    A decoded image.

    pixels is a C×H×W float tensor with values in [0, 1]; C is 1 (grayscale) or 3 (RGB).
    """
    pixels: torch.Tensor
    color_space: str = "RGB"

    def __post_init__(self):
        pixels = self.pixels
        if not isinstance(pixels, torch.Tensor) or pixels.dim() != 3:
            raise ValueError("Image pixels must be a C×H×W tensor")
        channels, height, width = pixels.shape
        if channels not in (1, 3):
            raise ValueError(f"Image must have 1 or 3 channels, got {channels}")
        if height < MIN_SIDE or width < MIN_SIDE:
            raise ValueError(f"Image must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}")
        if self.color_space not in COLOR_SPACES:
            raise ValueError(f"Unknown color space '{self.color_space}'")
        if (self.color_space == "RGB") != (channels == 3):
            raise ValueError(f"Color space {self.color_space} does not match {channels} channel(s)")
        if not bool(torch.all((pixels >= 0) & (pixels <= 1))):
            raise ValueError("Image values must lie in [0, 1]")

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.height, self.width, self.channels

    @classmethod
    def from_tensor(cls, pixels: torch.Tensor) -> "Image":
        pixels = pixels.detach().to("cpu", torch.float32)
        return cls(pixels, "RGB" if pixels.shape[0] == 3 else "grayscale")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    under: str
    over: str
    reference: Optional[str] = None


@dataclass(frozen=True)
class DatasetManifest:
    entries: Tuple[ManifestEntry, ...]
    split: str = "train"

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def ids(self) -> List[str]:
        return [entry.id for entry in self.entries]


@dataclass(frozen=True)
class ExposurePair:
    under: Image
    over: Image
    reference: Optional[Image] = None
    id: str = ""

    def __post_init__(self):
        images = [self.under, self.over] + ([self.reference] if self.reference is not None else [])
        shapes = {image.shape for image in images}
        if len(shapes) != 1:
            raise DimensionMismatch(f"Pair '{self.id}' has mismatched shapes: {sorted(shapes)}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.under.shape

    @property
    def has_reference(self) -> bool:
        return self.reference is not None


@dataclass(frozen=True)
class NaturalPool:
    images: Tuple[Image, ...]
    rng_seed: int = 0

    def __len__(self):
        return len(self.images)


def _rgb(pixels: torch.Tensor) -> torch.Tensor:
    return pixels.expand(3, -1, -1) if pixels.shape[0] == 1 else pixels


@dataclass
class PairBatch:
    """Batched pairs as B×3×H×W tensors; grayscale pairs are expanded and reference rows are zero where has_reference is False."""
    under: torch.Tensor
    over: torch.Tensor
    reference: Optional[torch.Tensor] = None
    has_reference: Optional[torch.Tensor] = None
    ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.has_reference is None:
            self.has_reference = torch.full((self.under.shape[0],), self.reference is not None, dtype=torch.bool)
        if self.reference is None:
            self.reference = torch.zeros_like(self.under)

    def __len__(self):
        return self.under.shape[0]

    @property
    def any_reference(self) -> bool:
        return bool(self.has_reference.any())

    def to(self, device=None, dtype=None) -> "PairBatch":
        return PairBatch(
            under=self.under.to(device=device, dtype=dtype),
            over=self.over.to(device=device, dtype=dtype),
            reference=self.reference.to(device=device, dtype=dtype),
            has_reference=self.has_reference.to(device=device),
            ids=list(self.ids),
        )

    @classmethod
    def from_pairs(cls, pairs: Sequence[ExposurePair]) -> "PairBatch":
        if not pairs:
            raise ValueError("Cannot batch an empty list of pairs")
        under = torch.stack([_rgb(pair.under.pixels) for pair in pairs])
        over = torch.stack([_rgb(pair.over.pixels) for pair in pairs])
        reference = torch.stack([
            _rgb(pair.reference.pixels) if pair.reference is not None else torch.zeros_like(_rgb(pair.under.pixels))
            for pair in pairs
        ])
        has_reference = torch.tensor([pair.reference is not None for pair in pairs], dtype=torch.bool)
        return cls(under, over, reference, has_reference, [pair.id for pair in pairs])
