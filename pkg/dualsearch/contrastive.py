import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import load_file

from dualsearch.dataclasses.exposure_pair import Image
from dualsearch.dataclasses.run_config import ExtractorConfig
from dualsearch.errors import EmptyNegatives, ExtractorUnavailable, ShapeMismatch

logger = logging.getLogger(__name__)

# Slices of torchvision's vgg16().features ending at relu1_1, relu1_2, relu2_1 and relu2_2.
VGG16_STAGES = ((0, 2), (2, 4), (4, 7), (7, 9))
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
FALLBACK_CHANNELS = (16, 16, 32, 32)
CONSTRAINT_MODES = ("hybrid", "reference_only", "natural_only", "fixed")

Negatives = Sequence[Tuple[torch.Tensor, torch.Tensor]]


class FeatureExtractor(nn.Module):
    """Frozen multi-stage feature network returning the outputs of the configured stages."""

    def __init__(self, backend: str, stages: Sequence[nn.Module], layers: Sequence[int] = (0, 1, 2, 3),
                 mean: Sequence[float] = (0.5, 0.5, 0.5), std: Sequence[float] = (1.0, 1.0, 1.0)):
        super().__init__()
        if not layers or max(layers) >= len(stages):
            raise ValueError(f"Layer ids {list(layers)} out of range for {len(stages)} stages")
        self.backend = backend
        self.layers = tuple(sorted(set(layers)))
        self.stages = nn.ModuleList(stages)
        self.register_buffer("mean", torch.tensor(mean).reshape(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).reshape(1, 3, 1, 1))
        for param in self.parameters():
            param.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # Always frozen.
        return super().train(False)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        if x.shape[1] != 3:
            raise ShapeMismatch(f"Extractor expects 1 or 3 channels, got {x.shape[1]}")
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        outputs = []
        for index, stage in enumerate(self.stages):
            x = stage(x)
            if index in self.layers:
                outputs.append(x)
            if index >= self.layers[-1]:
                break
        return outputs


def _fallback_stages(seed: int) -> List[nn.Module]:
    generator = torch.Generator()
    generator.manual_seed(seed)
    stages = []
    in_channels = 3
    for index, out_channels in enumerate(FALLBACK_CHANNELS):
        conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        fan_in = in_channels * 9
        with torch.no_grad():
            weight = torch.randn(conv.weight.shape, generator=generator, dtype=torch.float64) * math.sqrt(2.0 / fan_in)
            conv.weight.copy_(weight.to(conv.weight.dtype))
            conv.bias.zero_()
        layers = [nn.AvgPool2d(2)] if index == 2 else []
        stages.append(nn.Sequential(*layers, conv, nn.ReLU()))
        in_channels = out_channels
    return stages


def _vgg16_stages(weights_path: str) -> List[nn.Module]:
    if not weights_path or not os.path.exists(weights_path):
        raise ExtractorUnavailable(f"VGG16 weights not found: {weights_path or '<unset>'}")
    try:
        from torchvision.models import vgg16
        features = vgg16(weights=None).features[:VGG16_STAGES[-1][1]]
        state = load_file(weights_path)
        state = {key[len("features."):] if key.startswith("features.") else key: value
                 for key, value in state.items()}
        state = {key: value for key, value in state.items() if key in features.state_dict()}
        features.load_state_dict(state, strict=True)
    except ExtractorUnavailable:
        raise
    except Exception as e:
        raise ExtractorUnavailable(f"Unable to load VGG16 weights from {weights_path}: {e}") from e
    for module in features.modules():
        if isinstance(module, nn.ReLU):
            module.inplace = False
    return [features[start:end] for start, end in VGG16_STAGES]


def build_extractor(config: ExtractorConfig = None, weights_path: str = "") -> FeatureExtractor:
    config = config or ExtractorConfig()
    if config.backend == "pretrained_vgg16":
        logger.info("Loading pretrained VGG16 extractor from %s", weights_path)
        return FeatureExtractor("pretrained_vgg16", _vgg16_stages(weights_path), config.layers,
                                IMAGENET_MEAN, IMAGENET_STD)
    return FeatureExtractor("deterministic_fallback", _fallback_stages(config.fallback_seed), config.layers)


def extract_features(g: Callable, img) -> List[torch.Tensor]:
    if g is None:
        raise ExtractorUnavailable("No feature extractor configured")
    pixels = img.pixels if isinstance(img, Image) else img
    return list(g(pixels))


@dataclass
class ContrastBatch:
    fused: torch.Tensor
    positives: List[torch.Tensor]
    negatives: List[Tuple[torch.Tensor, torch.Tensor]] = field(default_factory=list)

    def __post_init__(self):
        if not self.negatives:
            raise EmptyNegatives("At least one negative pair is required")
        shape = tuple(self.fused.shape[-3:])
        images = list(self.positives) + [image for pair in self.negatives for image in pair]
        for image in images:
            if tuple(image.shape[-3:]) != shape:
                raise ShapeMismatch(f"Contrast image of shape {tuple(image.shape)} does not match {shape}")


def _mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(a, b.expand_as(a))


def gamma_p(g: Callable, f, positive, negatives: Negatives, epsilon: float = 1e-8) -> torch.Tensor:
    """
    Contrastive ratio of the fused image against one positive.

    Per layer: MSE to the positive over the summed MSE to every negative (under, over) pair,
    summed over layers. Only the fused image carries gradients.
    """
    batch = ContrastBatch(_pixels(f), [_pixels(positive)], [(_pixels(u), _pixels(o)) for u, o in negatives])
    features = extract_features(g, batch.fused)
    with torch.no_grad():
        positive_features = extract_features(g, batch.positives[0])
        negative_features = [(extract_features(g, u), extract_features(g, o)) for u, o in batch.negatives]
    total = None
    for i, feature in enumerate(features):
        numerator = _mse(feature, positive_features[i])
        denominator = None
        for under_features, over_features in negative_features:
            term = _mse(feature, under_features[i]) + _mse(feature, over_features[i])
            denominator = term if denominator is None else denominator + term
        value = numerator / (denominator + epsilon)
        total = value if total is None else total + value
    return total


def _pixels(x):
    return x.pixels if isinstance(x, Image) else x


def gamma_h(g: Callable, f, reference, natural, negatives: Negatives, reference_mask: Optional[torch.Tensor] = None,
            mode: str = "hybrid", epsilon: float = 1e-8) -> torch.Tensor:
    """
    Hybrid constraint: the reference term (skipped without a reference) plus the natural-image term.

    reference_mask selects the rows of a batch that actually carry a reference.
    """
    if mode not in CONSTRAINT_MODES or mode == "fixed":
        raise ValueError(f"Unknown constraint mode '{mode}'")
    f = _pixels(f)
    total = torch.zeros((), dtype=f.dtype, device=f.device)
    if mode in ("hybrid", "natural_only"):
        if natural is None:
            raise ValueError("The natural-image term needs a natural positive")
        natural = _pixels(natural)
        if natural.dim() == 3:
            natural = natural.unsqueeze(0)
        total = total + gamma_p(g, f, natural.expand_as(f), negatives, epsilon)
    if mode in ("hybrid", "reference_only") and reference is not None:
        reference = _pixels(reference)
        if reference_mask is not None:
            rows = reference_mask.to(f.device).nonzero(as_tuple=True)[0]
            if len(rows) == 0:
                return total
            if len(rows) < f.shape[0]:
                f = f[rows]
                reference = reference[rows]
                negatives = [(_pixels(u)[rows], _pixels(o)[rows]) for u, o in negatives]
        total = total + gamma_p(g, f, reference, negatives, epsilon)
    return total
