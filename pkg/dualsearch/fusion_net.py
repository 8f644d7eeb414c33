import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from dualsearch.dataclasses.exposure_pair import ExposurePair, Image
from dualsearch.dataclasses.run_config import NetworkConfig
from dualsearch.errors import ArtifactError, ShapeMismatch
from dualsearch.ops import OP_KINDS, ArchParams, CandidateOp, MixedEdge, edge_to_dict, init_alpha
from dualsearch.utils.utils import derive_seed, make_generator
from dualsearch.wsras import FinalizedEdge

logger = logging.getLogger(__name__)

EdgeFactory = Callable[[str], nn.Module]


class FusionModel(nn.Module):
    """
    Two-exposure fusion network.

    A shared searchable encoder embeds both sources, per-source attention heads merge them,
    and a Retinex-style pair of recurrent streams estimates intensity and illumination whose
    product is mapped back to RGB by a 1×1 conv + sigmoid head.
    """

    def __init__(self, width: int = 16, stream_edges: int = 2, iterations: int = 3, in_channels: int = 3,
                 edge_factory: Optional[EdgeFactory] = None):
        super().__init__()
        if iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {iterations}")
        if stream_edges < 1:
            raise ValueError(f"stream_edges must be >= 1, got {stream_edges}")
        if edge_factory is None:
            edge_factory = lambda name: MixedEdge(width)  # noqa: E731
        self.width = width
        self.stream_edges = stream_edges
        self.iterations = iterations
        self.in_channels = in_channels
        self.mode = "supernet"
        self.stem = nn.Sequential(nn.Conv2d(in_channels, width, 3, padding=1), nn.LeakyReLU(0.2))
        self.intensity_keys = [f"intensity_{i}" for i in range(stream_edges)]
        self.illumination_keys = [f"illumination_{i}" for i in range(stream_edges)]
        self.edges = nn.ModuleDict()
        for name in ["encoder", "attention"] + self.intensity_keys + self.illumination_keys:
            self.edges[name] = edge_factory(name)
        self.attention_heads = nn.ModuleDict({
            "under": nn.Conv2d(width, 1, 1),
            "over": nn.Conv2d(width, 1, 1),
        })
        self.head = nn.Conv2d(width, 3, 1)

    def network_dict(self) -> dict:
        return {"width": self.width, "stream_edges": self.stream_edges, "iterations": self.iterations}

    def searchable_edges(self) -> List[Tuple[str, nn.Module]]:
        return list(self.edges.items())

    def arch_parameters(self) -> List[nn.Parameter]:
        return [edge.alpha for edge in self.edges.values() if isinstance(edge, MixedEdge)]

    def weight_parameters(self) -> List[nn.Parameter]:
        return [param for name, param in self.named_parameters() if not name.endswith(".alpha")]

    def finalize(self, finalized: Sequence[FinalizedEdge]):
        names = list(self.edges.keys())
        if len(finalized) != len(names):
            raise ShapeMismatch(f"Expected {len(names)} finalized edges, got {len(finalized)}")
        for name, edge in zip(names, finalized):
            self.edges[name] = edge
        self.mode = "finalized"
        return self

    def _check_pair(self, under: torch.Tensor, over: torch.Tensor):
        if under.shape != over.shape:
            raise ShapeMismatch(f"Sources differ in shape: {tuple(under.shape)} vs {tuple(over.shape)}")
        if under.dim() != 4 or under.shape[1] != self.in_channels:
            raise ShapeMismatch(f"Expected B×{self.in_channels}×H×W sources, got {tuple(under.shape)}")

    def attention_maps(self, under: torch.Tensor, over: torch.Tensor):
        self._check_pair(under, over)
        f_u = self.edges["encoder"](self.stem(under))
        f_o = self.edges["encoder"](self.stem(over))
        logits = torch.cat([
            self.attention_heads["under"](self.edges["attention"](f_u)),
            self.attention_heads["over"](self.edges["attention"](f_o)),
        ], dim=1)
        weights = torch.softmax(logits, dim=1)
        return weights[:, 0:1], weights[:, 1:2], f_u, f_o

    def attention_merge(self, under: torch.Tensor, over: torch.Tensor) -> torch.Tensor:
        a_u, a_o, f_u, f_o = self.attention_maps(under, over)
        return a_u * f_u + a_o * f_o

    def _unroll(self, keys: List[str], f: torch.Tensor) -> torch.Tensor:
        # The same edges are reused on every iteration.
        for _ in range(self.iterations):
            for key in keys:
                f = self.edges[key](f)
        return f

    def intensity_stream(self, f: torch.Tensor) -> torch.Tensor:
        return self._unroll(self.intensity_keys, f)

    def illumination_stream(self, f: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self._unroll(self.illumination_keys, f))

    def compose_output(self, intensity: torch.Tensor, illumination: torch.Tensor) -> torch.Tensor:
        if intensity.shape != illumination.shape:
            raise ShapeMismatch(f"Intensity {tuple(intensity.shape)} and illumination "
                                f"{tuple(illumination.shape)} differ")
        return torch.sigmoid(self.head(intensity * illumination))

    def forward(self, under: torch.Tensor, over: torch.Tensor) -> torch.Tensor:
        merged = self.attention_merge(under, over)
        return self.compose_output(self.intensity_stream(merged), self.illumination_stream(merged))

    @classmethod
    def from_architecture(cls, document: dict, seed: int = 0) -> "FusionModel":
        """Build a finalized network with freshly initialized weights from an architecture document."""
        try:
            network = document["network"]
            width = int(network["width"])
            retained: Dict[str, list] = {item["name"]: item["retained"] for item in document["edges"]}
        except (KeyError, TypeError, ValueError) as e:
            raise ArtifactError(f"Malformed architecture document: {e!r}") from e

        def factory(name: str) -> FinalizedEdge:
            if name not in retained or not retained[name]:
                raise ArtifactError(f"Architecture document has no retained ops for edge '{name}'")
            items = retained[name]
            for item in items:
                if item.get("kind") not in OP_KINDS:
                    raise ArtifactError(f"Unknown op kind {item.get('kind')!r} on edge '{name}'")
            return FinalizedEdge(
                [CandidateOp(item["kind"], width) for item in items],
                [item["kind"] for item in items],
                [float(item["weight"]) for item in items],
                channels=width,
            )

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(seed, "omega"))
            model = cls(width, int(network["stream_edges"]), int(network["iterations"]), edge_factory=factory)
        model.mode = "finalized"
        return model


def build_supernet(network: NetworkConfig, seed: int = 0) -> FusionModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "omega"))
        model = FusionModel(network.width, network.stream_edges, network.iterations)
    generator = make_generator(seed, "alpha")
    for _, edge in model.searchable_edges():
        init_alpha(edge, generator, network.alpha_noise)
    return model


def arch_params_for(model: FusionModel, theta: Optional[float] = None, retain_p: int = 2) -> ArchParams:
    edges = [(name, edge) for name, edge in model.searchable_edges() if isinstance(edge, MixedEdge)]
    return ArchParams(edges, theta, retain_p)


def architecture_document(model: FusionModel, arch: ArchParams, finalized: Sequence[FinalizedEdge]) -> dict:
    """Architecture JSON: per edge the candidate kinds, active mask, alpha and retained ops."""
    edges = []
    for (name, edge), finalized_edge in zip(arch.named_edges, finalized):
        item = edge_to_dict(edge, name)
        item["retained"] = finalized_edge.to_dict(name)["retained"]
        edges.append(item)
    return {
        "network": model.network_dict(),
        "retain_p": arch.retain_p,
        "theta": arch.theta,
        "edges": edges,
    }


@torch.no_grad()
def fuse_pair(model: FusionModel, pair: ExposurePair) -> Image:
    device = next(model.parameters()).device
    under = pair.under.pixels
    over = pair.over.pixels
    if under.shape[0] == 1:
        under = under.expand(3, -1, -1)
        over = over.expand(3, -1, -1)
    fused = model(under.unsqueeze(0).to(device), over.unsqueeze(0).to(device))
    return Image.from_tensor(fused[0].clamp(0, 1))
