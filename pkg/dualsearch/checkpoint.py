import json
import logging
import os
from typing import Dict, Optional, Tuple

import torch
from safetensors import SafetensorError, safe_open
from safetensors.torch import load_file, save_file

from dualsearch.dataclasses.run_config import NetworkConfig
from dualsearch.errors import ArtifactError, MissingFile, ShapeMismatch
from dualsearch.fusion_net import FusionModel, arch_params_for, build_supernet
from dualsearch.utils.utils import dump_json

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dualsearch-checkpoint/1"
MODEL_PREFIX = "model."
OPTIMIZER_PREFIX = "optimizer."


def _optimizer_tensors(optimizer: torch.optim.Optimizer) -> Tuple[Dict[str, torch.Tensor], list]:
    state_dict = optimizer.state_dict()
    tensors = {}
    for param_index, state in state_dict["state"].items():
        for key, value in state.items():
            tensor = value if isinstance(value, torch.Tensor) else torch.tensor(value)
            tensors[f"{OPTIMIZER_PREFIX}{param_index}.{key}"] = tensor.detach().cpu().contiguous()
    return tensors, state_dict["param_groups"]


def save_checkpoint(checkpoint_path: str, model: FusionModel, architecture: dict, config: Optional[dict] = None,
                    optimizer: Optional[torch.optim.Optimizer] = None, epoch: int = 0, step: int = 0,
                    extra: Optional[Dict[str, str]] = None):
    """Write weights, optional optimizer state and the architecture/config snapshot to one archive."""
    tensors = {f"{MODEL_PREFIX}{key}": value.detach().cpu().contiguous() for key, value in model.state_dict().items()}
    metadata = {
        "format": CHECKPOINT_FORMAT,
        "mode": model.mode,
        "architecture": dump_json(architecture),
        "config": dump_json(config or {}),
        "epoch": str(epoch),
        "step": str(step),
    }
    if optimizer is not None:
        optimizer_tensors, param_groups = _optimizer_tensors(optimizer)
        tensors.update(optimizer_tensors)
        metadata["param_groups"] = json.dumps(param_groups)
    if extra:
        metadata.update({key: str(value) for key, value in extra.items()})
    os.makedirs(os.path.dirname(os.path.abspath(checkpoint_path)), exist_ok=True)
    tmp_path = f"{checkpoint_path}.tmp"
    save_file(tensors, tmp_path, metadata=metadata)
    os.replace(tmp_path, checkpoint_path)
    logger.debug("Saved checkpoint to %s", checkpoint_path)


def read_checkpoint(checkpoint_path: str) -> Tuple[Dict[str, torch.Tensor], Dict[str, str]]:
    if not os.path.exists(checkpoint_path):
        raise MissingFile(f"Checkpoint not found: {checkpoint_path}")
    try:
        tensors = load_file(checkpoint_path)
        with safe_open(checkpoint_path, framework="pt") as archive:
            metadata = archive.metadata() or {}
    except (SafetensorError, OSError, ValueError) as e:
        raise ArtifactError(f"Unreadable checkpoint {checkpoint_path}: {e}") from e
    if metadata.get("format") != CHECKPOINT_FORMAT:
        raise ArtifactError(f"{checkpoint_path} is not a dual search checkpoint")
    return tensors, metadata


def _load_model_state(model: FusionModel, tensors: Dict[str, torch.Tensor]):
    state = {key[len(MODEL_PREFIX):]: value for key, value in tensors.items() if key.startswith(MODEL_PREFIX)}
    expected = model.state_dict()
    for key, value in state.items():
        if key in expected and tuple(expected[key].shape) != tuple(value.shape):
            raise ShapeMismatch(f"Checkpoint tensor '{key}' has shape {tuple(value.shape)}, "
                                f"model expects {tuple(expected[key].shape)}")
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise ShapeMismatch(f"Checkpoint does not match the model: {e}") from e


def load_checkpoint(checkpoint_path: str) -> Tuple[FusionModel, Dict[str, str]]:
    """Rebuild the model described by a checkpoint and load its weights."""
    tensors, metadata = read_checkpoint(checkpoint_path)
    try:
        architecture = json.loads(metadata["architecture"])
    except (KeyError, json.JSONDecodeError) as e:
        raise ArtifactError(f"Checkpoint {checkpoint_path} has no readable architecture: {e}") from e
    if metadata.get("mode") == "finalized":
        model = FusionModel.from_architecture(architecture)
    else:
        model = build_supernet(NetworkConfig(**architecture["network"]))
        arch_params_for(model).load_dict(architecture)
    _load_model_state(model, tensors)
    model.eval()
    return model, metadata


def load_training_state(checkpoint_path: str, model: FusionModel, optimizer: Optional[torch.optim.Optimizer] = None,
                        expected_mode: Optional[str] = None) -> Dict[str, str]:
    """Restore weights (and optimizer state) in place; returns the checkpoint metadata."""
    tensors, metadata = read_checkpoint(checkpoint_path)
    if expected_mode is not None and metadata.get("mode") != expected_mode:
        raise ArtifactError(f"{checkpoint_path} holds a {metadata.get('mode')} network, expected {expected_mode}")
    _load_model_state(model, tensors)
    if optimizer is not None:
        if "param_groups" not in metadata:
            raise ArtifactError(f"Checkpoint {checkpoint_path} carries no optimizer state")
        state: Dict[int, Dict[str, torch.Tensor]] = {}
        for key, value in tensors.items():
            if not key.startswith(OPTIMIZER_PREFIX):
                continue
            param_index, name = key[len(OPTIMIZER_PREFIX):].split(".", 1)
            state.setdefault(int(param_index), {})[name] = value
        optimizer.load_state_dict({"state": state, "param_groups": json.loads(metadata["param_groups"])})
    return metadata
