import json
import os
from dataclasses import dataclass, field
from typing import Dict

import pandas as pd

from dualsearch.metrics import METRIC_NAMES
from dualsearch.utils.utils import atomic_write_text, dump_json


@dataclass
class MetricReport:
    per_image: Dict[str, Dict[str, float]] = field(default_factory=dict)
    aggregate: Dict[str, float] = field(default_factory=dict)
    errors: Dict[str, Dict[str, str]] = field(default_factory=dict)

    def __len__(self):
        return len(self.per_image)

    def add(self, image_id: str, values: Dict[str, float], errors: Dict[str, str] = None):
        self.per_image[image_id] = values
        if errors:
            self.errors[image_id] = errors

    def finalize(self) -> "MetricReport":
        """Recompute the aggregate as the per-metric mean over the images that have the metric."""
        self.aggregate = {}
        for name in METRIC_NAMES:
            values = [metrics[name] for metrics in self.per_image.values() if name in metrics]
            if values:
                self.aggregate[name] = float(sum(values) / len(values))
        return self

    @property
    def failed_all(self) -> bool:
        return len(self.per_image) > 0 and not any(self.per_image.values())

    def to_json(self) -> dict:
        return {"aggregate": self.aggregate, "errors": self.errors, "per_image": self.per_image}

    @property
    def json(self) -> str:
        return dump_json(self.to_json())

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame.from_dict(self.per_image, orient="index").reindex(columns=list(METRIC_NAMES))
        frame.index.name = "id"
        if self.aggregate:
            frame.loc["mean"] = pd.Series(self.aggregate)
        return frame

    def write_json(self, path: str):
        atomic_write_text(path, self.json)

    def write_csv(self, path: str):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.to_frame().to_csv(path, index_label="id")

    @classmethod
    def from_file(cls, path: str) -> "MetricReport":
        with open(path, "r") as f:
            data = json.load(f)
        return cls(data.get("per_image", {}), data.get("aggregate", {}), data.get("errors", {}))
