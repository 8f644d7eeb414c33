import logging
import os
from typing import Callable, Dict, Mapping, Optional, Union

from dualsearch import shared
from dualsearch.dataclasses.exposure_pair import DatasetManifest, ExposurePair, Image
from dualsearch.dataclasses.metric_report import MetricReport
from dualsearch.dataset.pair_dataset import load_exposure_pair
from dualsearch.errors import DualSearchError, MissingFile
from dualsearch.fusion_net import FusionModel, fuse_pair
from dualsearch.metrics import METRIC_NAMES
from dualsearch.metrics.basic import cc, en, sd
from dualsearch.metrics.fidelity import qabf, vif
from dualsearch.metrics.similarity import mef_ssim_metric, ms_ssim
from dualsearch.metrics.tonemap import tmqi
from dualsearch.utils.image_utils import decode_image
from helpers.mytqdm import mytqdm

logger = logging.getLogger(__name__)

FusedSource = Union[FusionModel, Mapping[str, Image], str]


def image_metrics(fused: Image, pair: ExposurePair):
    """Every applicable metric for one fused image. Returns (values, errors)."""
    jobs: Dict[str, Callable[[], float]] = {
        "SD": lambda: sd(fused),
        "VIF": lambda: vif(fused, pair),
        "MEF_SSIM": lambda: mef_ssim_metric(fused, pair),
        "EN": lambda: en(fused),
        "QABF": lambda: qabf(fused, pair),
    }
    if pair.reference is not None:
        jobs["CC"] = lambda: cc(fused, pair.reference)
        jobs["TMQI"] = lambda: tmqi(fused, pair.reference)
        jobs["MS_SSIM"] = lambda: ms_ssim(fused, pair.reference)
    values, errors = {}, {}
    for name in METRIC_NAMES:
        if name not in jobs:
            continue
        try:
            values[name] = jobs[name]()
        except (DualSearchError, ValueError) as e:
            logger.warning("%s failed for %s: %s", name, pair.id, e)
            errors[name] = str(e)
    return values, errors


def _fused_image(source: FusedSource, pair: ExposurePair) -> Image:
    if isinstance(source, FusionModel):
        return fuse_pair(source, pair)
    if isinstance(source, str):
        return decode_image(os.path.join(source, f"{pair.id}.png"))
    if pair.id not in source:
        raise MissingFile(f"No fused image for '{pair.id}'")
    return source[pair.id]


def evaluate_report(source: FusedSource, manifest: DatasetManifest,
                    pairs: Optional[Mapping[str, ExposurePair]] = None) -> MetricReport:
    """
    Score fused images against a manifest.

    source is a network (pairs are fused on the fly), a mapping id -> fused image, or a
    directory holding <id>.png. Failures are recorded in the report, never raised.
    """
    report = MetricReport()
    for entry in mytqdm(list(manifest), desc="Evaluating", disable=not shared.show_progress):
        try:
            pair = pairs[entry.id] if pairs and entry.id in pairs else load_exposure_pair(entry)
            fused = _fused_image(source, pair)
        except DualSearchError as e:
            logger.warning("Skipping %s: %s", entry.id, e)
            report.add(entry.id, {}, {"load": str(e)})
            continue
        values, errors = image_metrics(fused, pair)
        report.add(entry.id, values, errors)
    return report.finalize()
