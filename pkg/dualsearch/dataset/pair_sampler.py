import math
from typing import Dict, Iterator, List

import torch

from dualsearch.utils.utils import make_generator


class PairBatchSampler:
    """Yields lists of dataset indices; the order of an epoch is a pure function of (seed, epoch)."""

    def __init__(self, dataset_len: int, batch_size: int, seed: int = 0, shuffle: bool = True,
                 drop_last: bool = False):
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        self.dataset_len = dataset_len
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle
        self.drop_last = drop_last
        self.epoch = 0
        self.counter = SampleCounter()

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def order(self) -> List[int]:
        if not self.shuffle:
            return list(range(self.dataset_len))
        generator = make_generator(self.seed, f"order/{self.epoch}")
        return torch.randperm(self.dataset_len, generator=generator).tolist()

    def __iter__(self) -> Iterator[List[int]]:
        order = self.order()
        for start in range(0, len(order), self.batch_size):
            batch = order[start:start + self.batch_size]
            if self.drop_last and len(batch) < self.batch_size:
                return
            for index in batch:
                self.counter.count(index)
            yield batch

    def __len__(self):
        if self.drop_last:
            return self.dataset_len // self.batch_size
        return math.ceil(self.dataset_len / self.batch_size)


class SampleCounter:
    def __init__(self):
        self.counts: Dict[int, int] = {}

    def count(self, key: int):
        self.counts[key] = self.counts.get(key, 0) + 1

    def min(self):
        return min(self.counts.values()) if len(self.counts) else 0

    def max(self):
        return max(self.counts.values()) if len(self.counts) else 0

    def get(self, key: int):
        return self.counts.get(key, 0)
