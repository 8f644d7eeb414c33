import logging
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from dualsearch.errors import ShapeMismatch

logger = logging.getLogger(__name__)

# kind -> (kernel height, kernel width, dilation); declaration order is the tie-break order.
OP_KINDS: Dict[str, Tuple[int, int, int]] = {
    "conv1x1": (1, 1, 1),
    "conv3x3": (3, 3, 1),
    "conv5x5": (5, 5, 1),
    "conv7x7": (7, 7, 1),
    "conv1x3": (1, 3, 1),
    "conv3x1": (3, 1, 1),
    "conv1x5": (1, 5, 1),
    "conv5x1": (5, 1, 1),
    "dil3x3": (3, 3, 2),
    "dil5x5": (5, 5, 2),
    "dil7x7": (7, 7, 2),
}
OP_NAMES: Tuple[str, ...] = tuple(OP_KINDS)


class CandidateOp(nn.Module):
    """Convolution followed by LeakyReLU(0.2), padded so H×W is preserved."""

    def __init__(self, kind: str, channels: int):
        super().__init__()
        if kind not in OP_KINDS:
            raise ValueError(f"Unknown op kind '{kind}'")
        if channels < 1:
            raise ValueError(f"channels must be >= 1, got {channels}")
        kernel_h, kernel_w, dilation = OP_KINDS[kind]
        padding = (dilation * (kernel_h - 1) // 2, dilation * (kernel_w - 1) // 2)
        self.kind = kind
        self.dilation = dilation
        self.channels = channels
        self.conv = nn.Conv2d(channels, channels, (kernel_h, kernel_w), padding=padding, dilation=dilation)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.conv(x))

    def extra_repr(self) -> str:
        return f"kind={self.kind}"


def build_candidate_set(channels: int) -> List[CandidateOp]:
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    return [CandidateOp(kind, channels) for kind in OP_NAMES]


class MixedEdge(nn.Module):
    """
    Continuous relaxation over candidate ops.

    `alpha` keeps one logit per original candidate; pruned candidates are dropped from
    both the forward sum and the softmax support through `active_mask`.
    """

    def __init__(self, channels: int, candidates: Optional[Sequence[nn.Module]] = None,
                 kinds: Optional[Sequence[str]] = None):
        super().__init__()
        if candidates is None:
            candidates = build_candidate_set(channels)
        if len(candidates) == 0:
            raise ValueError("A mixed edge needs at least one candidate")
        if kinds is None:
            kinds = [getattr(op, "kind", OP_NAMES[i % len(OP_NAMES)]) for i, op in enumerate(candidates)]
        if len(kinds) != len(candidates):
            raise ValueError("kinds and candidates must have the same length")
        self.channels = channels
        self.kinds = tuple(kinds)
        self.candidates = nn.ModuleList(candidates)
        self.alpha = nn.Parameter(torch.zeros(len(candidates)))
        self.register_buffer("active_mask", torch.ones(len(candidates), dtype=torch.bool))

    @property
    def active_indices(self) -> List[int]:
        return [i for i, active in enumerate(self.active_mask.tolist()) if active]

    @property
    def active_kinds(self) -> List[str]:
        return [self.kinds[i] for i in self.active_indices]

    @property
    def num_active(self) -> int:
        return int(self.active_mask.sum())

    @property
    def active_alpha(self) -> torch.Tensor:
        return self.alpha[self.active_mask]

    def deactivate(self, index: int):
        if self.num_active <= 1:
            raise ValueError("Cannot deactivate the last active candidate")
        self.active_mask[index] = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return mixed_forward(self, x)


def arch_weights(edge: MixedEdge) -> torch.Tensor:
    return torch.softmax(edge.active_alpha, dim=0)


def mixed_forward(edge: MixedEdge, x: torch.Tensor) -> torch.Tensor:
    if x.dim() != 4 or x.shape[1] != edge.channels:
        raise ShapeMismatch(f"Edge expects {edge.channels} channels, got input of shape {tuple(x.shape)}")
    weights = arch_weights(edge)
    out = None
    for weight, index in zip(weights, edge.active_indices):
        term = weight * edge.candidates[index](x)
        out = term if out is None else out + term
    return out


def init_alpha(edge: MixedEdge, rng: torch.Generator, scale: float = 1e-3) -> MixedEdge:
    noise = torch.randn(edge.alpha.shape, generator=rng, dtype=torch.float64) * scale
    with torch.no_grad():
        edge.alpha.copy_(noise.to(edge.alpha.dtype))
    return edge


def edge_to_dict(edge: MixedEdge, name: str = "") -> dict:
    return {
        "name": name,
        "kinds": list(edge.kinds),
        "active_mask": [bool(v) for v in edge.active_mask.tolist()],
        "alpha": [float(v) for v in edge.alpha.detach().to(torch.float64).tolist()],
    }


def load_edge_dict(edge: MixedEdge, data: dict):
    """Restore alpha and the active mask saved by edge_to_dict."""
    if list(data["kinds"]) != list(edge.kinds):
        raise ShapeMismatch(f"Edge kinds {data['kinds']} do not match {list(edge.kinds)}")
    with torch.no_grad():
        edge.alpha.copy_(torch.tensor(data["alpha"], dtype=torch.float64).to(edge.alpha.dtype))
        edge.active_mask.copy_(torch.tensor(data["active_mask"], dtype=torch.bool))


class ArchParams:
    """The searchable edges of a supernet together with the prune threshold and retain count."""

    def __init__(self, edges: Sequence[Tuple[str, MixedEdge]], theta: Optional[float] = None, retain_p: int = 2):
        if retain_p < 1:
            raise ValueError(f"retain_p must be >= 1, got {retain_p}")
        if theta is not None and not 0 < theta < 1:
            raise ValueError(f"theta must be in (0, 1), got {theta}")
        self.named_edges: List[Tuple[str, MixedEdge]] = list(edges)
        self.theta = theta
        self.retain_p = retain_p

    @property
    def edges(self) -> List[MixedEdge]:
        return [edge for _, edge in self.named_edges]

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.named_edges]

    def threshold_for(self, edge: MixedEdge) -> float:
        # Default rule: half the uniform weight over the currently active candidates.
        if self.theta is not None:
            return self.theta
        return 0.5 / edge.num_active

    def parameters(self) -> List[nn.Parameter]:
        return [edge.alpha for edge in self.edges]

    def to_dict(self) -> dict:
        return {
            "theta": self.theta,
            "retain_p": self.retain_p,
            "edges": [edge_to_dict(edge, name) for name, edge in self.named_edges],
        }

    def load_dict(self, data: dict):
        saved = {item["name"]: item for item in data["edges"]}
        for name, edge in self.named_edges:
            if name not in saved:
                raise ShapeMismatch(f"Architecture is missing edge '{name}'")
            load_edge_dict(edge, saved[name])
        self.theta = data.get("theta")
        self.retain_p = int(data.get("retain_p", self.retain_p))
