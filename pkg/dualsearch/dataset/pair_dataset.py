import csv
import logging
import math
import os
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from torch.utils.data import DataLoader, Dataset

from dualsearch.dataclasses.exposure_pair import DatasetManifest, ExposurePair, Image, ManifestEntry, PairBatch
from dualsearch.dataset.pair_sampler import PairBatchSampler
from dualsearch.errors import CropTooLarge, DuplicateId, MalformedManifest, MissingFile
from dualsearch.utils.image_utils import decode_image
from dualsearch.utils.utils import make_generator, stable_hash

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ["id", "under", "over", "reference"]


def _resolve(base_dir: str, path: str) -> str:
    path = path.strip()
    if not path:
        return ""
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base_dir, path))


def load_manifest(manifest_path: str, split: str = "train") -> DatasetManifest:
    """
    Parse a pair manifest.

    The manifest is a UTF-8 CSV with header `id,under,over,reference`. Relative paths are
    resolved against the manifest's directory and `reference` may be left empty.
    """
    if not os.path.exists(manifest_path):
        raise MissingFile(f"Manifest not found: {manifest_path}")
    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    entries = []
    seen = set()
    with open(manifest_path, "r", encoding="utf-8", newline="") as openfile:
        reader = csv.reader(openfile)
        header = next(reader, None)
        if header is None or [name.strip() for name in header] != MANIFEST_HEADER:
            raise MalformedManifest(f"header must be '{','.join(MANIFEST_HEADER)}', got {header}", row=1)
        for row_number, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) not in (3, 4):
                raise MalformedManifest(f"expected 4 columns, got {len(row)}", row=row_number)
            image_id = row[0].strip()
            under = _resolve(base_dir, row[1])
            over = _resolve(base_dir, row[2])
            reference = _resolve(base_dir, row[3]) if len(row) == 4 else ""
            if not image_id or not under or not over:
                raise MalformedManifest("id, under and over are required", row=row_number)
            if image_id in seen:
                raise DuplicateId(f"Duplicate id '{image_id}' at row {row_number}")
            seen.add(image_id)
            for path in (under, over, reference):
                if path and not os.path.exists(path):
                    raise MissingFile(f"row {row_number}: image file not found: {path}")
            entries.append(ManifestEntry(image_id, under, over, reference or None))
    logger.debug("Loaded %d entries from %s", len(entries), manifest_path)
    return DatasetManifest(tuple(entries), split)


def load_exposure_pair(entry: ManifestEntry) -> ExposurePair:
    under = decode_image(entry.under)
    over = decode_image(entry.over)
    reference = decode_image(entry.reference) if entry.reference else None
    return ExposurePair(under, over, reference, entry.id)


def _crop_image(image: Optional[Image], top: int, left: int, size: int) -> Optional[Image]:
    if image is None:
        return None
    return Image(image.pixels[:, top:top + size, left:left + size].clone(), image.color_space)


def random_crop_pair(pair: ExposurePair, size: int, rng: torch.Generator) -> ExposurePair:
    height, width, _ = pair.shape
    if size > min(height, width):
        raise CropTooLarge(f"Crop size {size} exceeds pair '{pair.id}' of size {height}x{width}")
    top = int(torch.randint(0, height - size + 1, (1,), generator=rng))
    left = int(torch.randint(0, width - size + 1, (1,), generator=rng))
    return ExposurePair(
        _crop_image(pair.under, top, left, size),
        _crop_image(pair.over, top, left, size),
        _crop_image(pair.reference, top, left, size),
        pair.id,
    )


def split_train_val(manifest: DatasetManifest) -> Tuple[DatasetManifest, DatasetManifest]:
    """Deterministic half/half split ordered by the SHA-256 of each id."""
    ranked = sorted(manifest.entries, key=lambda entry: stable_hash(entry.id))
    train_ids = {entry.id for entry in ranked[:math.ceil(len(ranked) / 2)]}
    train = tuple(entry for entry in manifest.entries if entry.id in train_ids)
    val = tuple(entry for entry in manifest.entries if entry.id not in train_ids)
    return DatasetManifest(train, "train"), DatasetManifest(val, "val")


def collate_pairs(pairs: Sequence[ExposurePair]) -> PairBatch:
    return PairBatch.from_pairs(list(pairs))


class ExposurePairDataset(Dataset):
    """
    Random-crop view over a manifest.

    The crop offset of an item depends only on (seed, epoch, id), so the delivered
    batches do not depend on how many workers decode them.
    """

    def __init__(self, manifest: DatasetManifest, crop_size: Optional[int], seed: int = 0, cache: bool = True):
        self.entries: List[ManifestEntry] = list(manifest.entries)
        self.crop_size = crop_size
        self.seed = seed
        self.cache = cache
        self.epoch = 0
        self._pairs: Dict[str, ExposurePair] = {}

    def __len__(self):
        return len(self.entries)

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def load(self, index: int) -> ExposurePair:
        entry = self.entries[index]
        pair = self._pairs.get(entry.id)
        if pair is None:
            pair = load_exposure_pair(entry)
            if self.cache:
                self._pairs[entry.id] = pair
        return pair

    def __getitem__(self, index: int) -> ExposurePair:
        pair = self.load(index)
        if self.crop_size is None:
            return pair
        rng = make_generator(self.seed, f"crop/{self.epoch}/{pair.id}")
        return random_crop_pair(pair, self.crop_size, rng)


def make_loader(dataset: ExposurePairDataset, batch_size: int, seed: int, shuffle: bool = True,
                num_workers: int = 0) -> Tuple[DataLoader, PairBatchSampler]:
    sampler = PairBatchSampler(len(dataset), batch_size, seed, shuffle=shuffle)
    loader = DataLoader(dataset, batch_sampler=sampler, collate_fn=collate_pairs, num_workers=num_workers)
    return loader, sampler
