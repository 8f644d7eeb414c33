from __future__ import annotations

import contextlib
import hashlib
import json
import os
from typing import Any

import torch

SEED_MODULUS = 2 ** 63 - 1


def derive_seed(seed: int, name: str) -> int:
    """Stable subsystem seed from the run seed and a subsystem name."""
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % SEED_MODULUS


def make_generator(seed: int, name: str) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(derive_seed(seed, name))
    return generator


def stable_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def dump_json(obj: Any) -> str:
    # Sorted keys and fixed indentation keep artifacts byte-identical across runs.
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def atomic_write_text(path: str, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w", encoding="utf-8", newline="\n") as outfile:
        outfile.write(text)
    os.replace(tmp_path, path)



@contextlib.contextmanager
def deterministic_algorithms(enabled: bool = True):
    """Turn on torch deterministic algorithms for the block and restore the previous setting afterwards."""
    previous = torch.are_deterministic_algorithms_enabled()
    previous_warn_only = torch.is_deterministic_algorithms_warn_only_enabled()
    if enabled:
        torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous, warn_only=previous_warn_only)
