from typing import Iterable

from tqdm import tqdm

from dualsearch import shared


class mytqdm(tqdm):
    """tqdm whose progress is mirrored into `shared.status`, also when the bar itself is disabled."""

    def __init__(self, iterable: Iterable = None, **kwargs):
        if kwargs.get("total") is not None:
            shared.status.steps_total = kwargs["total"]
        if kwargs.get("desc"):
            shared.status.description = kwargs["desc"]
        super().__init__(iterable=iterable, **kwargs)
        if shared.status.steps_total <= 0 and self.total is not None:
            shared.status.steps_total = self.total

    def __iter__(self):
        for obj in super().__iter__():
            shared.status.advance()
            yield obj

    def update(self, n=1):
        shared.status.advance(n)
        return super().update(n)

    def set_description(self, desc=None, refresh=True):
        shared.status.description = desc
        super().set_description(desc, refresh)
