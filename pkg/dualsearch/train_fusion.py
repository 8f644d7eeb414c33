import logging
import math
import os
from typing import List, Optional

import torch
from accelerate.utils import set_seed

from dualsearch import shared
from dualsearch.checkpoint import load_training_state, save_checkpoint
from dualsearch.contrastive import FeatureExtractor
from dualsearch.dataclasses.exposure_pair import DatasetManifest
from dualsearch.dataclasses.run_config import TrainConfig
from dualsearch.dataset.pair_dataset import ExposurePairDataset, make_loader
from dualsearch.errors import NonFiniteLoss
from dualsearch.fusion_net import FusionModel
from dualsearch.losses import LossParams, combine
from dualsearch.utils.utils import derive_seed, deterministic_algorithms
from helpers.mytqdm import mytqdm

logger = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoints"
FINAL_WEIGHTS = "fusion_final.safetensors"


def epoch_checkpoint_path(output_dir: str, epoch: int) -> str:
    return os.path.join(output_dir, CHECKPOINT_DIR, f"epoch_{epoch:04d}.safetensors")


def run_train(config: TrainConfig, architecture: dict, loss: LossParams, manifest: DatasetManifest,
              extractor: Optional[FeatureExtractor] = None, output_dir: Optional[str] = None,
              run_config: Optional[dict] = None, history: Optional[List[float]] = None,
              deterministic: bool = True) -> FusionModel:
    """
    Train a fresh finalized network under frozen loss weights.

    Args:
        config: Training settings; ``config.resume`` names a checkpoint to continue from.
        architecture: Architecture document produced by the search.
        loss: Searched loss weights. They are never updated here.
        manifest: Training pairs.
        extractor: Feature extractor, needed only when a perceptual candidate is present.
        output_dir: Where per-epoch checkpoints and the final weights go; nothing is written when None.
        history: Receives the mean loss of each finished epoch.

    Returns:
        The trained network.
    """
    seed = config.seed or 0
    set_seed(seed)
    device = shared.get_device()
    model = FusionModel.from_architecture(architecture, seed).to(device)
    model.train()
    loss.beta.requires_grad_(False)
    loss = loss.to(device)
    if extractor is not None:
        extractor = extractor.to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999))

    start_epoch, global_step = 0, 0
    if config.resume:
        metadata = load_training_state(config.resume, model, optimizer, expected_mode="finalized")
        start_epoch = int(metadata.get("epoch", 0))
        global_step = int(metadata.get("step", 0))
        logger.info("Resuming from %s at epoch %d", config.resume, start_epoch)

    dataset = ExposurePairDataset(manifest, config.crop_size, derive_seed(seed, "train/crops"))
    loader, sampler = make_loader(dataset, config.batch_size, derive_seed(seed, "train/order"),
                                  num_workers=config.num_workers)

    logger.debug("  ***** Running training *****")
    logger.debug(f"  Num pairs = {len(dataset)}")
    logger.debug(f"  Num batches each epoch = {len(sampler)}")
    logger.debug(f"  Num Epochs = {config.epochs}")
    logger.debug(f"  Batch Size Per Device = {config.batch_size}")
    logger.debug(f"  Learning rate = {config.lr}")

    with deterministic_algorithms(deterministic):
        shared.status.begin("train")
        shared.status.steps_total = max(config.epochs - start_epoch, 0) * len(sampler)
        completed_epoch = start_epoch
        try:
            for epoch in range(start_epoch, config.epochs):
                shared.status.current_epoch = epoch
                dataset.set_epoch(epoch)
                sampler.set_epoch(epoch)
                total, count = 0.0, 0
                for batch in mytqdm(loader, desc=f"Train epoch {epoch + 1}", disable=not shared.show_progress):
                    if shared.status.interrupted:
                        break
                    batch = batch.to(device, next(model.parameters()).dtype)
                    fused = model(batch.under, batch.over)
                    value = combine(loss, batch, fused, extractor, detach_weights=True)
                    if not math.isfinite(float(value.detach())):
                        raise NonFiniteLoss("Loss is NaN, your model is dead. Cancelling training.",
                                            step=global_step)
                    optimizer.zero_grad(set_to_none=True)
                    value.backward()
                    optimizer.step()
                    global_step += 1
                    shared.status.current_step = global_step
                    total += float(value.detach())
                    count += 1
                if shared.status.interrupted:
                    logger.warning("Training interrupted during epoch %d", epoch + 1)
                    break
                mean_loss = total / max(count, 1)
                logger.info("Epoch %d: loss %.6f", epoch + 1, mean_loss)
                if history is not None:
                    history.append(mean_loss)
                last = epoch + 1 == config.epochs
                if output_dir and ((epoch + 1) % config.save_every == 0 or last):
                    save_checkpoint(epoch_checkpoint_path(output_dir, epoch + 1), model, architecture, run_config,
                                    optimizer, epoch + 1, global_step)
                completed_epoch = epoch + 1
                if shared.status.interrupted_after_epoch:
                    break
        finally:
            shared.status.end()

    if output_dir:
        save_checkpoint(os.path.join(output_dir, FINAL_WEIGHTS), model, architecture, run_config,
                        epoch=completed_epoch, step=global_step)
    model.eval()
    return model
