import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from dualsearch.dataclasses.exposure_pair import ExposurePair, Image, PairBatch
from dualsearch.errors import (ExtractorUnavailable, ImageTooSmall, NoEvaluableCandidates, NotColorImage,
                               ShapeMismatch)
from dualsearch.structural import mef_ssim_index, ssim_index

logger = logging.getLogger(__name__)

TensorLike = Union[torch.Tensor, Image]
PSNR_CAP = 100.0
COLOR_MIN_NORM = 1e-6
SOBEL_EPS = 1e-12


class LossFamily(Enum):
    L1 = "L1"
    L2 = "L2"
    SSIM = "SSIM"
    MEF_SSIM = "MEF_SSIM"
    GRAD = "GRAD"
    PERC = "PERC"
    PSNR = "PSNR"
    COLOR = "COLOR"
    TV = "TV"


class LossReference(Enum):
    I_o = "I_o"
    I_u = "I_u"
    I_r = "I_r"
    MAX_GRAD_PAIR = "max_grad_pair"
    SOURCE_PAIR = "source_pair"
    NONE = "none"


_SINGLE = (LossReference.I_o, LossReference.I_u, LossReference.I_r)
VALID_REFERENCES = {
    LossFamily.L1: _SINGLE,
    LossFamily.L2: _SINGLE,
    LossFamily.SSIM: _SINGLE,
    LossFamily.MEF_SSIM: (LossReference.SOURCE_PAIR,),
    LossFamily.GRAD: (LossReference.MAX_GRAD_PAIR,),
    LossFamily.PERC: _SINGLE,
    LossFamily.PSNR: (LossReference.I_r,),
    LossFamily.COLOR: (LossReference.I_r,),
    LossFamily.TV: (LossReference.NONE,),
}


@dataclass(frozen=True)
class LossCandidate:
    family: LossFamily
    reference: LossReference

    def __post_init__(self):
        if self.reference not in VALID_REFERENCES[self.family]:
            raise ValueError(f"{self.family.value} cannot be paired with {self.reference.value}")

    @property
    def name(self) -> str:
        return f"{self.family.value}:{self.reference.value}"

    @property
    def requires_reference(self) -> bool:
        return self.reference == LossReference.I_r

    @classmethod
    def from_name(cls, name: str) -> "LossCandidate":
        family, reference = name.split(":", 1)
        return cls(LossFamily(family), LossReference(reference))


LOSS_CANDIDATES: Tuple[LossCandidate, ...] = tuple(
    LossCandidate(family, reference)
    for family in LossFamily
    for reference in VALID_REFERENCES[family]
)


def _as_batch(x: TensorLike) -> torch.Tensor:
    if isinstance(x, Image):
        return x.pixels.unsqueeze(0)
    if x.dim() == 3:
        return x.unsqueeze(0)
    return x


def _sources(pair) -> Tuple[torch.Tensor, torch.Tensor]:
    if isinstance(pair, (PairBatch, ExposurePair)):
        return _as_batch(pair.under), _as_batch(pair.over)
    under, over = pair
    return _as_batch(under), _as_batch(over)


def _check_shapes(*tensors: torch.Tensor):
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise ShapeMismatch(f"Shapes differ: {sorted(shapes)}")


def _reduce(values: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "none":
        return values
    if reduction == "mean":
        return values.mean()
    raise ValueError(f"Unknown reduction '{reduction}'")


def pixel_loss(f: TensorLike, r: TensorLike, norm: int = 1, reduction: str = "mean") -> torch.Tensor:
    f, r = _as_batch(f), _as_batch(r)
    _check_shapes(f, r)
    diff = f - r
    if norm == 1:
        values = diff.abs()
    elif norm == 2:
        values = diff * diff
    else:
        raise ValueError(f"norm must be 1 or 2, got {norm}")
    return _reduce(values.flatten(1).mean(dim=1), reduction)


def ssim_loss(f: TensorLike, r: TensorLike, reduction: str = "mean") -> torch.Tensor:
    f, r = _as_batch(f), _as_batch(r)
    _check_shapes(f, r)
    return _reduce(1.0 - ssim_index(f, r, data_range=1.0), reduction)


def mef_ssim_loss(f: TensorLike, pair, reduction: str = "mean") -> torch.Tensor:
    f = _as_batch(f)
    under, over = _sources(pair)
    _check_shapes(f, under, over)
    return _reduce(1.0 - mef_ssim_index(f, [under, over]), reduction)


def sobel_magnitude(x: torch.Tensor) -> torch.Tensor:
    """Per-channel Sobel gradient magnitude with replicate padding."""
    b, c, h, w = x.shape
    kx = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=x.dtype, device=x.device)
    kernel = torch.stack([kx, kx.t()]).unsqueeze(1)
    padded = F.pad(x.reshape(b * c, 1, h, w), (1, 1, 1, 1), mode="replicate")
    grads = F.conv2d(padded, kernel)
    magnitude = torch.sqrt(grads[:, 0] ** 2 + grads[:, 1] ** 2 + SOBEL_EPS)
    return magnitude.reshape(b, c, h, w)


def grad_loss(f: TensorLike, pair, reduction: str = "mean") -> torch.Tensor:
    f = _as_batch(f)
    under, over = _sources(pair)
    _check_shapes(f, under, over)
    with torch.no_grad():
        target = torch.maximum(sobel_magnitude(over), sobel_magnitude(under))
    values = (sobel_magnitude(f) - target).abs()
    return _reduce(values.flatten(1).mean(dim=1), reduction)


def perceptual_loss(f: TensorLike, r: TensorLike, extractor, reduction: str = "mean") -> torch.Tensor:
    if extractor is None:
        raise ExtractorUnavailable("Perceptual loss needs a feature extractor")
    f, r = _as_batch(f), _as_batch(r)
    _check_shapes(f, r)
    features_f = extractor(f)
    with torch.no_grad():
        features_r = extractor(r)
    values = None
    for phi_f, phi_r in zip(features_f, features_r):
        term = ((phi_f - phi_r) ** 2).flatten(1).mean(dim=1)
        values = term if values is None else values + term
    return _reduce(values, reduction)


def psnr_loss(f: TensorLike, r: TensorLike, reduction: str = "mean") -> torch.Tensor:
    """Negative PSNR for unit dynamic range, capped at 100 dB."""
    f, r = _as_batch(f), _as_batch(r)
    _check_shapes(f, r)
    mse = ((f - r) ** 2).flatten(1).mean(dim=1)
    floor = 10.0 ** (-PSNR_CAP / 10.0)
    psnr = 10.0 * torch.log10(1.0 / mse.clamp_min(floor))
    return _reduce(-psnr, reduction)


def color_loss(f: TensorLike, r: TensorLike, reduction: str = "mean") -> torch.Tensor:
    """Mean angle in radians between the RGB vectors of f and r."""
    f, r = _as_batch(f), _as_batch(r)
    _check_shapes(f, r)
    if f.shape[1] != 3:
        raise NotColorImage(f"Color loss needs RGB input, got {f.shape[1]} channel(s)")
    valid = (f.norm(dim=1) >= COLOR_MIN_NORM) & (r.norm(dim=1) >= COLOR_MIN_NORM)
    cross = torch.cross(f, r, dim=1)
    dot = (f * r).sum(dim=1)
    sine = torch.sqrt((cross ** 2).sum(dim=1) + 1e-20)
    # Substitute harmless values on invalid pixels so their gradients stay finite.
    angle = torch.atan2(torch.where(valid, sine, torch.zeros_like(sine)),
                        torch.where(valid, dot, torch.ones_like(dot)))
    angle = torch.where(valid, angle, torch.zeros_like(angle))
    return _reduce(angle.flatten(1).mean(dim=1), reduction)


def tv_loss(f: TensorLike, reduction: str = "mean") -> torch.Tensor:
    f = _as_batch(f)
    height, width = f.shape[-2:]
    if height < 2 or width < 2:
        raise ImageTooSmall(f"Total variation needs H, W >= 2, got {height}x{width}")
    dx = f[..., :, 1:] - f[..., :, :-1]
    dy = f[..., 1:, :] - f[..., :-1, :]
    per_channel = ((dx ** 2).sum(dim=(-2, -1)) + (dy ** 2).sum(dim=(-2, -1))) / (height * width)
    return _reduce(per_channel.mean(dim=1), reduction)


def evaluate_candidate(candidate: LossCandidate, f: torch.Tensor, under: torch.Tensor, over: torch.Tensor,
                       reference: Optional[torch.Tensor], extractor=None) -> torch.Tensor:
    """Per-sample value of one candidate loss."""
    targets = {LossReference.I_o: over, LossReference.I_u: under, LossReference.I_r: reference}
    family = candidate.family
    if family in (LossFamily.L1, LossFamily.L2):
        return pixel_loss(f, targets[candidate.reference], 1 if family == LossFamily.L1 else 2, reduction="none")
    if family == LossFamily.SSIM:
        return ssim_loss(f, targets[candidate.reference], reduction="none")
    if family == LossFamily.MEF_SSIM:
        return mef_ssim_loss(f, (under, over), reduction="none")
    if family == LossFamily.GRAD:
        return grad_loss(f, (under, over), reduction="none")
    if family == LossFamily.PERC:
        return perceptual_loss(f, targets[candidate.reference], extractor, reduction="none")
    if family == LossFamily.PSNR:
        return psnr_loss(f, reference, reduction="none")
    if family == LossFamily.COLOR:
        return color_loss(f, reference, reduction="none")
    return tv_loss(f, reduction="none")


def candidate_values(candidates: Sequence[LossCandidate], batch: Union[PairBatch, ExposurePair], f: TensorLike,
                     extractor=None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Evaluate every candidate on every sample.

    Returns:
        (values, mask): B×K tensors; mask is False where a candidate needs a reference the
        sample does not have, and the value there is 0.
    """
    if isinstance(batch, ExposurePair):
        batch = PairBatch.from_pairs([batch])
    f = _as_batch(f)
    under = batch.under.to(f.device, f.dtype)
    over = batch.over.to(f.device, f.dtype)
    reference = batch.reference.to(f.device, f.dtype)
    has_reference = batch.has_reference.to(f.device)
    ref_rows = has_reference.nonzero(as_tuple=True)[0]
    columns, mask_columns = [], []
    for candidate in candidates:
        if not candidate.requires_reference:
            columns.append(evaluate_candidate(candidate, f, under, over, reference, extractor))
            mask_columns.append(torch.ones_like(has_reference))
            continue
        value = torch.zeros(f.shape[0], dtype=f.dtype, device=f.device)
        if len(ref_rows):
            sub = evaluate_candidate(candidate, f[ref_rows], under[ref_rows], over[ref_rows], reference[ref_rows],
                                     extractor)
            value = value.index_copy(0, ref_rows, sub)
        columns.append(value)
        mask_columns.append(has_reference)
    return torch.stack(columns, dim=1), torch.stack(mask_columns, dim=1)


def masked_weights(beta: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax of beta restricted to each row's evaluable candidates."""
    if not bool(mask.any(dim=1).all()):
        raise NoEvaluableCandidates("No loss candidate can be evaluated for at least one sample")
    logits = beta.unsqueeze(0).expand(mask.shape[0], -1)
    logits = logits.masked_fill(~mask, float("-inf"))
    return torch.softmax(logits, dim=1)


def aggregate(weights: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    return (weights * values).sum(dim=1).mean()


class LossParams(nn.Module):
    """Logits over the loss candidates; softmax(beta) are the loss weights."""

    def __init__(self, candidates: Sequence[LossCandidate] = LOSS_CANDIDATES, beta: Optional[Sequence[float]] = None):
        super().__init__()
        if len(candidates) == 0:
            raise ValueError("At least one loss candidate is required")
        self.candidates: Tuple[LossCandidate, ...] = tuple(candidates)
        initial = torch.zeros(len(candidates)) if beta is None else torch.as_tensor(beta, dtype=torch.float32)
        if initial.shape != (len(candidates),):
            raise ShapeMismatch(f"beta must have {len(candidates)} entries, got {tuple(initial.shape)}")
        self.beta = nn.Parameter(initial.clone())

    @property
    def names(self) -> List[str]:
        return [candidate.name for candidate in self.candidates]

    def weights(self) -> torch.Tensor:
        return torch.softmax(self.beta, dim=0)

    def report(self) -> Dict[str, float]:
        weights = torch.softmax(self.beta.detach().to(torch.float64), dim=0).tolist()
        return dict(zip(self.names, weights))

    def to_dict(self) -> dict:
        return {
            "beta": [float(v) for v in self.beta.detach().to(torch.float64).tolist()],
            "candidates": self.names,
            "weights": self.report(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LossParams":
        candidates = [LossCandidate.from_name(name) for name in data["candidates"]]
        return cls(candidates, data["beta"])


def combine(params: LossParams, batch: Union[PairBatch, ExposurePair], f: TensorLike, extractor=None,
            detach_weights: bool = False) -> torch.Tensor:
    """Weighted sum of candidate losses, renormalized per sample over evaluable candidates."""
    values, mask = candidate_values(params.candidates, batch, f, extractor)
    beta = params.beta.detach() if detach_weights else params.beta
    return aggregate(masked_weights(beta.to(values.dtype), mask), values)
