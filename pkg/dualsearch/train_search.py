import logging
import os
from typing import List, Optional

import torch
from accelerate.utils import set_seed

from dualsearch import shared
from dualsearch.checkpoint import save_checkpoint
from dualsearch.contrastive import FeatureExtractor, build_extractor, gamma_h
from dualsearch.dataclasses.exposure_pair import DatasetManifest, NaturalPool, PairBatch
from dualsearch.dataclasses.run_config import ExtractorConfig, NetworkConfig, SearchConfig
from dualsearch.dataclasses.search_result import HistoryRecord, SearchResult
from dualsearch.dataset.natural_pool import sample_natural
from dualsearch.dataset.pair_dataset import ExposurePairDataset, make_loader, split_train_val
from dualsearch.errors import ConfigError, NonFiniteLoss
from dualsearch.fusion_net import FusionModel, arch_params_for, architecture_document, build_supernet
from dualsearch.losses import LossParams, aggregate, candidate_values, combine, masked_weights
from dualsearch.ops import ArchParams
from dualsearch.utils.utils import atomic_write_text, derive_seed, deterministic_algorithms, dump_json, make_generator
from dualsearch.wsras import PruneEvent, prune_step, retention_finalize, write_prune_log
from helpers.log_parser import write_history
from helpers.mytqdm import mytqdm

logger = logging.getLogger(__name__)

SEARCH_CHECKPOINT = "search_checkpoint.safetensors"
ARCHITECTURE_FILE = "architecture.json"
LOSS_WEIGHTS_FILE = "loss_weights.json"
PRUNE_LOG_FILE = "prune_log.ndjson"
HISTORY_FILE = "history.csv"


class SearchState:
    """Everything the alternating updates read and write, plus one Adam optimizer per parameter group."""

    def __init__(self, model: FusionModel, arch: ArchParams, loss: LossParams, extractor, config: SearchConfig,
                 epsilon: float = 1e-8):
        self.model = model
        self.arch = arch
        self.loss = loss
        self.extractor = extractor
        self.config = config
        self.epsilon = epsilon
        self.step = 0
        self.epoch = 0
        self.history: List[HistoryRecord] = []
        self.prune_events: List[PruneEvent] = []
        self.omega_optimizer = torch.optim.Adam(model.weight_parameters(), lr=config.lr_omega, betas=(0.9, 0.999))
        self.alpha_optimizer = torch.optim.Adam(arch.parameters(), lr=config.lr_alpha, betas=(0.9, 0.999))
        self.beta_optimizer = torch.optim.Adam([loss.beta], lr=config.lr_beta, betas=(0.9, 0.999))
        self._pending = {}

    @property
    def device(self) -> torch.device:
        return next(self.model.parameters()).device

    @property
    def dtype(self) -> torch.dtype:
        return next(self.model.parameters()).dtype

    def prepare(self, batch: PairBatch) -> PairBatch:
        return batch.to(self.device, self.dtype)

    def commit(self):
        record = HistoryRecord(
            step=self.step,
            epoch=self.epoch,
            l_train=self._pending.get("l_train", float("nan")),
            l_val=self._pending.get("l_val", float("nan")),
            gamma_h=self._pending.get("gamma_h", float("nan")),
        )
        self.history.append(record)
        self._pending = {}
        self.step += 1
        shared.status.current_step = self.step
        return record


def _check_finite(value: torch.Tensor, what: str, step: int):
    if not bool(torch.isfinite(value).all()):
        raise NonFiniteLoss(f"{what} is not finite, cancelling search", step=step)


def _apply_grads(params, grads, optimizer: torch.optim.Optimizer):
    for param, grad in zip(params, grads):
        param.grad = grad
    optimizer.step()
    for param in params:
        param.grad = None


def step_omega(state: SearchState, batch: PairBatch) -> SearchState:
    """One Adam step on the network weights under the current loss weights."""
    batch = state.prepare(batch)
    params = state.model.weight_parameters()
    fused = state.model(batch.under, batch.over)
    loss = combine(state.loss, batch, fused, state.extractor, detach_weights=True)
    _check_finite(loss, "Training loss", state.step)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    _apply_grads(params, grads, state.omega_optimizer)
    state._pending["l_train"] = float(loss.detach())
    return state


def _gamma(state: SearchState, batch: PairBatch, fused: torch.Tensor, natural: Optional[torch.Tensor]):
    reference = batch.reference if batch.any_reference else None
    return gamma_h(state.extractor, fused, reference, natural, [(batch.under, batch.over)],
                   reference_mask=batch.has_reference, mode=state.config.constraint, epsilon=state.epsilon)


def step_beta(state: SearchState, val_batch: PairBatch, natural=None) -> SearchState:
    """
    One Adam step on the loss logits against the contrastive constraint.

    The constraint is measured after a virtual plain-gradient step of the weights under the
    current loss weights; the weights are restored afterwards. Its derivative with respect to
    each candidate weight only needs the directional derivative of that candidate's loss
    along the constraint gradient, which is taken by a symmetric finite difference.
    """
    config = state.config
    if config.constraint == "fixed":
        return state
    batch = state.prepare(val_batch)
    if natural is not None:
        natural = (natural.pixels if hasattr(natural, "pixels") else natural).to(state.device, state.dtype)
    model = state.model
    params = model.weight_parameters()
    snapshot = [param.detach().clone() for param in params]
    try:
        fused = model(batch.under, batch.over)
        values, mask = candidate_values(state.loss.candidates, batch, fused, state.extractor)
        virtual_loss = aggregate(masked_weights(state.loss.beta.detach().to(values.dtype), mask), values)
        _check_finite(virtual_loss, "Validation loss", state.step)
        grads = torch.autograd.grad(virtual_loss, params, allow_unused=True)
        with torch.no_grad():
            for param, grad in zip(params, grads):
                if grad is not None:
                    param.sub_(config.lr_omega * grad)

        gamma = _gamma(state, batch, model(batch.under, batch.over), natural)
        _check_finite(gamma, "Contrastive constraint", state.step)
        if gamma.requires_grad:
            direction = torch.autograd.grad(gamma, params, allow_unused=True)
        else:
            # No term applies to this batch (reference_only without references).
            direction = [None] * len(params)
        direction = [torch.zeros_like(p) if d is None else d for p, d in zip(params, direction)]
        direction_norm = torch.sqrt(sum((d.to(torch.float64) ** 2).sum() for d in direction))

        with torch.no_grad():
            for param, saved in zip(params, snapshot):
                param.copy_(saved)
            if float(direction_norm) > 0:
                radius = config.fd_radius / float(direction_norm)
                for param, d in zip(params, direction):
                    param.add_(radius * d)
                plus, _ = candidate_values(state.loss.candidates, batch, model(batch.under, batch.over),
                                           state.extractor)
                for param, saved, d in zip(params, snapshot, direction):
                    param.copy_(saved)
                    param.sub_(radius * d)
                minus, _ = candidate_values(state.loss.candidates, batch, model(batch.under, batch.over),
                                            state.extractor)
                directional = (plus - minus) / (2 * radius)
            else:
                directional = torch.zeros_like(values)
    finally:
        with torch.no_grad():
            for param, saved in zip(params, snapshot):
                param.copy_(saved)

    beta = state.loss.beta
    weights = masked_weights(beta.to(directional.dtype), mask)
    surrogate = (weights * directional.detach()).sum() * (-config.lr_omega / len(batch))
    beta_grad, = torch.autograd.grad(surrogate, beta)
    _check_finite(beta_grad, "Loss-weight gradient", state.step)
    _apply_grads([beta], [beta_grad.to(beta.dtype)], state.beta_optimizer)
    state._pending["gamma_h"] = float(gamma.detach())
    return state


def step_alpha(state: SearchState, val_batch: PairBatch) -> SearchState:
    """One Adam step on the architecture logits with the weights held fixed; closes the step."""
    batch = state.prepare(val_batch)
    alphas = state.arch.parameters()
    fused = state.model(batch.under, batch.over)
    loss = combine(state.loss, batch, fused, state.extractor, detach_weights=True)
    _check_finite(loss, "Validation loss", state.step)
    grads = torch.autograd.grad(loss, alphas, allow_unused=True)
    _apply_grads(alphas, grads, state.alpha_optimizer)
    state._pending["l_val"] = float(loss.detach())
    state.commit()
    return state


def _needs_natural(constraint: str) -> bool:
    return constraint in ("hybrid", "natural_only")


def run_search(config: SearchConfig, manifest: DatasetManifest, pool: Optional[NaturalPool] = None,
               network: NetworkConfig = None, extractor_config: ExtractorConfig = None,
               extractor: Optional[FeatureExtractor] = None, weights_path: str = "",
               output_dir: Optional[str] = None, run_config: Optional[dict] = None,
               deterministic: bool = True) -> SearchResult:
    """
    Alternate weight, loss-weight and architecture updates over the search epochs.

    Half of the manifest (by hashed id) trains the weights; the other half drives the loss
    and architecture updates. Weak candidates are pruned once per epoch and the top
    candidates of every edge are retained at the end.
    """
    network = network or NetworkConfig()
    extractor_config = extractor_config or ExtractorConfig()
    seed = config.seed or 0
    set_seed(seed)
    if _needs_natural(config.constraint) and (pool is None or len(pool) == 0):
        raise ConfigError(f"Constraint '{config.constraint}' needs a non-empty natural pool")

    train_manifest, val_manifest = split_train_val(manifest)
    if len(val_manifest) == 0:
        raise ConfigError("Search needs at least two pairs so that both halves of the split are non-empty")

    device = shared.get_device()
    model = build_supernet(network, seed).to(device)
    arch = arch_params_for(model, config.theta, config.retain_p)
    loss = LossParams().to(device)
    if extractor is None:
        extractor = build_extractor(extractor_config, weights_path)
    extractor = extractor.to(device)
    state = SearchState(model, arch, loss, extractor, config, extractor_config.epsilon)

    train_set = ExposurePairDataset(train_manifest, config.crop_size, derive_seed(seed, "search/train-crops"))
    val_set = ExposurePairDataset(val_manifest, config.crop_size, derive_seed(seed, "search/val-crops"))
    train_loader, train_sampler = make_loader(train_set, config.batch_size, derive_seed(seed, "search/train-order"),
                                              num_workers=config.num_workers)
    val_loader, val_sampler = make_loader(val_set, config.batch_size, derive_seed(seed, "search/val-order"),
                                          num_workers=config.num_workers)
    natural_rng = make_generator(seed, "search/natural")

    logger.debug("  ***** Running search *****")
    logger.debug(f"  Train pairs = {len(train_set)}, validation pairs = {len(val_set)}")
    logger.debug(f"  Epochs = {config.search_epochs}, batch size = {config.batch_size}")
    logger.debug(f"  Learning rates: alpha = {config.lr_alpha}, beta = {config.lr_beta}, omega = {config.lr_omega}")
    logger.debug(f"  Constraint = {config.constraint}, prune = {config.prune_enabled}, P = {config.retain_p}")

    with deterministic_algorithms(deterministic):
        shared.status.begin("search")
        shared.status.steps_total = config.search_epochs * len(train_sampler)
        try:
            for epoch in range(config.search_epochs):
                state.epoch = epoch
                shared.status.current_epoch = epoch
                for item in (train_set, val_set, train_sampler, val_sampler):
                    item.set_epoch(epoch)
                val_batches = list(val_loader)
                progress = mytqdm(train_loader, desc=f"Search epoch {epoch + 1}", disable=not shared.show_progress)
                for index, batch in enumerate(progress):
                    if shared.status.interrupted:
                        break
                    val_batch = val_batches[index % len(val_batches)]
                    natural = None
                    if _needs_natural(config.constraint):
                        _, channels, height, width = val_batch.under.shape
                        natural = sample_natural(pool, (height, width, channels), natural_rng)
                    step_omega(state, batch)
                    step_beta(state, val_batch, natural)
                    step_alpha(state, val_batch)
                if shared.status.interrupted:
                    logger.warning("Search interrupted during epoch %d", epoch + 1)
                    break
                if config.prune_enabled:
                    _, events = prune_step(arch, state.step)
                    state.prune_events.extend(events)
                epoch_records = [record for record in state.history if record.epoch == epoch]
                if epoch_records:
                    logger.info("Epoch %d: L_train %.5f, L_val %.5f, gamma_h %.5f", epoch + 1,
                                sum(r.l_train for r in epoch_records) / len(epoch_records),
                                sum(r.l_val for r in epoch_records) / len(epoch_records),
                                sum(r.gamma_h for r in epoch_records) / len(epoch_records))
                if output_dir:
                    save_checkpoint(os.path.join(output_dir, SEARCH_CHECKPOINT), model,
                                    architecture_document(model, arch, retention_finalize(arch)), run_config,
                                    epoch=epoch + 1, step=state.step)
                if shared.status.interrupted_after_epoch:
                    break
        finally:
            shared.status.end()

    if shared.status.interrupted:
        msg = f"Search interrupted after {state.step} steps"
    else:
        msg = f"Search finished: {state.step} steps, {len(state.prune_events)} candidates pruned"
    finalized = retention_finalize(arch)
    document = architecture_document(model, arch, finalized)
    return SearchResult(
        architecture=document,
        loss_weights=loss.to_dict(),
        prune_events=list(state.prune_events),
        history=list(state.history),
        state=state,
        msg=msg,
    )


def write_search_artifacts(result: SearchResult, output_dir: str) -> dict:
    """Write the architecture, loss weights, prune log and history; returns the written paths by name."""
    paths = {
        "architecture": os.path.join(output_dir, ARCHITECTURE_FILE),
        "loss_weights": os.path.join(output_dir, LOSS_WEIGHTS_FILE),
        "prune_log": os.path.join(output_dir, PRUNE_LOG_FILE),
        "history": os.path.join(output_dir, HISTORY_FILE),
    }
    atomic_write_text(paths["architecture"], dump_json(result.architecture))
    atomic_write_text(paths["loss_weights"], dump_json(result.loss_weights))
    write_prune_log(result.prune_events, paths["prune_log"])
    write_history(result.history, paths["history"])
    logger.info("Search artifacts written to %s", output_dir)
    return paths
