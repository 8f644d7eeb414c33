import json
import logging
import os
from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn

from dualsearch.errors import ShapeMismatch
from dualsearch.ops import ArchParams, arch_weights
from dualsearch.utils.utils import atomic_write_text

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PruneEvent:
    edge_index: int
    pruned_kind: str
    weight_at_prune: float
    step: int
    threshold: float
    edge_name: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def tie_break(weights: Sequence[float]) -> int:
    """Index of the minimum weight; exact ties resolve to the lowest index."""
    values = [float(w) for w in weights]
    if not values:
        raise ValueError("tie_break needs at least one weight")
    return min(range(len(values)), key=lambda i: (values[i], i))


@torch.no_grad()
def prune_step(arch: ArchParams, step: int = 0) -> Tuple[ArchParams, List[PruneEvent]]:
    """Drop at most one weak candidate per edge, never going below retain_p active candidates."""
    events = []
    for edge_index, (name, edge) in enumerate(arch.named_edges):
        if edge.num_active <= arch.retain_p:
            continue
        weights = arch_weights(edge).tolist()
        position = tie_break(weights)
        threshold = arch.threshold_for(edge)
        if weights[position] >= threshold:
            continue
        index = edge.active_indices[position]
        edge.deactivate(index)
        event = PruneEvent(edge_index, edge.kinds[index], float(weights[position]), int(step), float(threshold), name)
        logger.debug("Pruned %s from edge %s (weight %.4f < %.4f)", event.pruned_kind, name, event.weight_at_prune,
                     threshold)
        events.append(event)
    return arch, events


class FinalizedEdge(nn.Module):
    """Fixed convex combination of the retained ops of a searched edge."""

    def __init__(self, ops: Sequence[nn.Module], kinds: Sequence[str], weights: Sequence[float],
                 source_alpha: Sequence[float] = (), channels: int = None):
        super().__init__()
        if not (len(ops) == len(kinds) == len(weights)) or len(ops) == 0:
            raise ValueError("ops, kinds and weights must be non-empty and of equal length")
        self.ops = nn.ModuleList(ops)
        self.kinds = tuple(kinds)
        self.channels = channels
        self.source_alpha = tuple(float(a) for a in source_alpha)
        self.register_buffer("fixed_weights", torch.tensor([float(w) for w in weights], dtype=torch.float32))

    @property
    def retained(self) -> List[Tuple[str, float]]:
        return list(zip(self.kinds, [float(w) for w in self.fixed_weights.tolist()]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.channels is not None and (x.dim() != 4 or x.shape[1] != self.channels):
            raise ShapeMismatch(f"Edge expects {self.channels} channels, got input of shape {tuple(x.shape)}")
        weights = self.fixed_weights.to(x.dtype)
        out = None
        for weight, op in zip(weights, self.ops):
            term = weight * op(x)
            out = term if out is None else out + term
        return out

    def to_dict(self, name: str = "") -> dict:
        return {
            "name": name,
            "retained": [{"kind": kind, "weight": weight} for kind, weight in self.retained],
            "source_alpha": list(self.source_alpha),
        }


@torch.no_grad()
def retention_finalize(arch: ArchParams) -> List[FinalizedEdge]:
    """Keep the top-P active candidates of each edge, re-softmaxed into frozen weights."""
    finalized = []
    for name, edge in arch.named_edges:
        active = edge.active_indices
        logits = edge.active_alpha.detach().to(torch.float64)
        weights = torch.softmax(logits, dim=0).tolist()
        order = sorted(range(len(active)), key=lambda i: (-weights[i], i))
        keep = order[:min(arch.retain_p, len(active))]
        fixed = torch.softmax(logits[keep], dim=0).tolist()
        finalized_edge = FinalizedEdge(
            [edge.candidates[active[i]] for i in keep],
            [edge.kinds[active[i]] for i in keep],
            fixed,
            source_alpha=edge.alpha.detach().to(torch.float64).tolist(),
            channels=edge.channels,
        )
        logger.debug("Edge %s retains %s", name, finalized_edge.retained)
        finalized.append(finalized_edge)
    return finalized


def write_prune_log(events: Sequence[PruneEvent], log_path: str):
    atomic_write_text(log_path, "".join(event.json + "\n" for event in events))


def read_prune_log(log_path: str) -> List[PruneEvent]:
    events = []
    if not os.path.exists(log_path):
        return events
    with open(log_path, "r", encoding="utf-8") as openfile:
        for line in openfile:
            line = line.strip()
            if line:
                events.append(PruneEvent(**json.loads(line)))
    return events
