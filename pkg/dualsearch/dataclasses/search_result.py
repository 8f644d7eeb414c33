from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List


@dataclass(frozen=True)
class HistoryRecord:
    step: int
    epoch: int
    l_train: float
    l_val: float
    gamma_h: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class SearchResult:
    architecture: Dict[str, Any]
    loss_weights: Dict[str, Any]
    prune_events: List[Any] = field(default_factory=list)
    history: List[HistoryRecord] = field(default_factory=list)
    state: Any = None
    msg: str = ""
