# Process-wide state read by the search and training loops and by the progress bars.
import logging
import os
import time
from typing import Optional

import torch

logger = logging.getLogger(__name__)

force_cpu = os.environ.get("DUALSEARCH_FORCE_CPU", "0") == "1"
show_progress = True


def get_device() -> torch.device:
    if torch.cuda.is_available() and not force_cpu:
        return torch.device("cuda")
    return torch.device("cpu")


def torch_gc():
    if torch.cuda.is_available():
        torch.cuda.empty_cache()


class RunState:
    """
    Progress of the running phase ("search" or "train").

    Loops poll `interrupted` before every step and `interrupted_after_epoch` at epoch ends;
    setting either from another thread stops the run at the next boundary.
    """

    def __init__(self):
        self.phase = ""
        self.description: Optional[str] = None
        self.steps_total = 0
        self.steps_done = 0
        self.current_epoch = 0
        self.current_step = 0
        self.interrupted = False
        self.interrupted_after_epoch = False
        self.started_at: Optional[float] = None

    @property
    def active(self) -> bool:
        return self.started_at is not None

    def interrupt(self):
        self.interrupted = True

    def interrupt_after_epoch(self):
        self.interrupted_after_epoch = True

    def advance(self, n: int = 1):
        self.steps_done = min(self.steps_done + n, max(self.steps_total, 0))

    def begin(self, phase: str):
        self.__init__()
        self.phase = phase
        self.started_at = time.time()
        torch_gc()

    def end(self):
        if self.started_at is not None:
            logger.info("%s finished in %s", self.phase or "Run",
                        time.strftime("%H:%M:%S", time.gmtime(time.time() - self.started_at)))
        self.phase = ""
        self.started_at = None
        torch_gc()


status = RunState()
