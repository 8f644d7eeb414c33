import copy
import json
import os
import random

import pytest
import torch

from conftest import SmoothExtractor, make_batch, make_pair_files
from dualsearch import shared, train_search
from dualsearch.contrastive import gamma_h
from dualsearch.dataclasses.run_config import NetworkConfig, SearchConfig
from dualsearch.dataset.natural_pool import load_natural_pool
from dualsearch.dataset.pair_dataset import load_manifest
from dualsearch.errors import ConfigError, NonFiniteLoss
from dualsearch.fusion_net import FusionModel, arch_params_for, build_supernet
from dualsearch.losses import LossCandidate, LossParams, aggregate, candidate_values, combine, masked_weights
from dualsearch.ops import CandidateOp, MixedEdge, arch_weights
from dualsearch.train_search import (SearchState, run_search, step_alpha, step_beta, step_omega,
                                     write_search_artifacts)
from dualsearch.wsras import read_prune_log
from helpers.log_parser import read_history

CANDIDATES = ["L1:I_o", "L1:I_u", "TV:none", "SSIM:I_o", "L2:I_r"]
TINY = NetworkConfig(width=4, stream_edges=1, iterations=1)


def _state(constraint="hybrid", seed=0, **updates) -> SearchState:
    model = build_supernet(TINY, seed).double()
    arch = arch_params_for(model)
    loss = LossParams([LossCandidate.from_name(name) for name in CANDIDATES]).double()
    config = SearchConfig(constraint=constraint, lr_omega=1e-2, fd_radius=1e-6).model_copy(update=updates)
    return SearchState(model, arch, loss, SmoothExtractor(), config)


def _batch(seeds=(0, 1), references=(True, False)):
    return make_batch(list(seeds), size=12, references=list(references), dtype=torch.float64)


def _natural():
    return make_batch([9], size=12, dtype=torch.float64).reference[0]


def _snapshot(state: SearchState):
    return {
        "omega": [p.detach().clone() for p in state.model.weight_parameters()],
        "alpha": [p.detach().clone() for p in state.arch.parameters()],
        "beta": state.loss.beta.detach().clone(),
    }


def _same(a, b) -> bool:
    if isinstance(a, torch.Tensor):
        return torch.equal(a, b)
    return all(torch.equal(x, y) for x, y in zip(a, b))


def test_zero_learning_rates_leave_parameters_unchanged():
    state = _state(lr_omega=0.0, lr_alpha=0.0, lr_beta=0.0)
    before = _snapshot(state)
    step_omega(state, _batch())
    step_beta(state, _batch((2, 3)), _natural())
    step_alpha(state, _batch((2, 3)))
    after = _snapshot(state)
    for group in ("omega", "alpha", "beta"):
        assert _same(before[group], after[group]), group


def test_each_step_updates_only_its_group():
    state = _state()
    rng = random.Random(0)
    batches = [_batch((seed, seed + 1), (seed % 3 == 0, True)) for seed in range(0, 8, 2)]
    steps = {
        "omega": lambda: step_omega(state, rng.choice(batches)),
        "beta": lambda: step_beta(state, rng.choice(batches), _natural()),
        "alpha": lambda: step_alpha(state, rng.choice(batches)),
    }
    for _ in range(100):
        group = rng.choice(sorted(steps))
        before = _snapshot(state)
        steps[group]()
        after = _snapshot(state)
        for other in steps:
            if other != group:
                assert _same(before[other], after[other]), (group, other)
        assert not _same(before[group], after[group]), group


def test_step_omega_decreases_training_loss():
    state = _state(lr_omega=1e-4)
    batch = _batch()

    def training_loss():
        with torch.no_grad():
            return float(combine(state.loss, batch, state.model(batch.under, batch.over), state.extractor))

    before = training_loss()
    step_omega(state, batch)
    assert training_loss() < before


def test_non_finite_batch_is_rejected():
    state = _state()
    batch = _batch()
    batch.under[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLoss):
        step_omega(state, batch)


def test_step_beta_gradient_matches_finite_differences():
    state = _state()
    # Plain descent with unit rate exposes the raw gradient as the parameter change.
    state.beta_optimizer = torch.optim.SGD([state.loss.beta], lr=1.0)
    val = _batch((4, 5))
    natural = _natural()
    lr = state.config.lr_omega

    def constraint_after_virtual_step(beta):
        model = copy.deepcopy(state.model)
        params = model.weight_parameters()
        values, mask = candidate_values(state.loss.candidates, val, model(val.under, val.over), state.extractor)
        grads = torch.autograd.grad(aggregate(masked_weights(beta, mask), values), params, allow_unused=True)
        with torch.no_grad():
            for param, grad in zip(params, grads):
                if grad is not None:
                    param.sub_(lr * grad)
            return float(gamma_h(state.extractor, model(val.under, val.over), val.reference, natural,
                                 [(val.under, val.over)], reference_mask=val.has_reference))

    beta0 = state.loss.beta.detach().clone()
    h = 1e-4
    expected = torch.zeros_like(beta0)
    for j in range(len(beta0)):
        offset = torch.zeros_like(beta0)
        offset[j] = h
        expected[j] = (constraint_after_virtual_step(beta0 + offset)
                       - constraint_after_virtual_step(beta0 - offset)) / (2 * h)

    step_beta(state, val, natural)
    measured = beta0 - state.loss.beta.detach()
    assert float(measured.norm()) > 0
    cosine = float((measured * expected).sum() / (measured.norm() * expected.norm()))
    assert cosine > 0.99
    assert float(measured.norm()) == pytest.approx(float(expected.norm()), rel=0.05)
    assert float(state.loss.weights().sum()) == pytest.approx(1.0)


def test_step_alpha_gradient_matches_finite_differences():
    state = _state()
    state.alpha_optimizer = torch.optim.SGD(state.arch.parameters(), lr=1.0)
    val = _batch((6, 7))
    edge = state.arch.edges[0]
    alpha0 = edge.alpha.detach().clone()

    def validation_loss(alpha):
        with torch.no_grad():
            edge.alpha.copy_(alpha)
            fused = state.model(val.under, val.over)
            value = float(combine(state.loss, val, fused, state.extractor))
            edge.alpha.copy_(alpha0)
        return value

    h = 1e-6
    expected = []
    for j in range(3):
        offset = torch.zeros_like(alpha0)
        offset[j] = h
        expected.append((validation_loss(alpha0 + offset) - validation_loss(alpha0 - offset)) / (2 * h))
    step_alpha(state, val)
    measured = (alpha0 - edge.alpha.detach())[:3]
    assert measured.tolist() == pytest.approx(expected, rel=1e-4, abs=1e-10)


def test_single_candidate_edge_keeps_its_weight():
    model = FusionModel(width=4, stream_edges=1, iterations=1,
                        edge_factory=lambda name: MixedEdge(4, [CandidateOp("conv3x3", 4)])).double()
    arch = arch_params_for(model)
    loss = LossParams([LossCandidate.from_name(name) for name in CANDIDATES]).double()
    state = SearchState(model, arch, loss, SmoothExtractor(), SearchConfig(constraint="fixed"))
    before = [p.detach().clone() for p in arch.parameters()]
    step_alpha(state, _batch())
    assert _same(before, [p.detach() for p in arch.parameters()])
    assert all(float(arch_weights(edge)[0]) == 1.0 for edge in arch.edges)


def test_fixed_constraint_skips_loss_weights_and_records_history():
    state = _state(constraint="fixed")
    beta = state.loss.beta.detach().clone()
    step_omega(state, _batch())
    step_beta(state, _batch((2, 3)), None)
    step_alpha(state, _batch((2, 3)))
    assert torch.equal(beta, state.loss.beta)
    assert state.step == 1
    record = state.history[0]
    assert record.step == 0 and record.epoch == 0
    assert record.l_train == record.l_train and record.l_val == record.l_val
    assert record.gamma_h != record.gamma_h


def _toy_search(tmp_path, **updates):
    manifest = load_manifest(make_pair_files(str(tmp_path / "data"), count=8, size=32))
    settings = dict(batch_size=2, crop_size=16, search_epochs=2, constraint="reference_only", seed=3)
    config = SearchConfig(**{**settings, **updates})
    return run_search(config, manifest, network=TINY, extractor=SmoothExtractor(torch.float32))


def test_run_search_is_deterministic(tmp_path):
    runs = []
    for name in ("first", "second"):
        result = _toy_search(tmp_path, theta=0.2)
        paths = write_search_artifacts(result, str(tmp_path / name))
        contents = {}
        for key in ("architecture", "loss_weights", "history", "prune_log"):
            with open(paths[key], "rb") as f:
                contents[key] = f.read()
        runs.append(contents)
    assert runs[0] == runs[1]


def test_run_search_prunes_below_threshold_and_keeps_floor(tmp_path):
    result = _toy_search(tmp_path, theta=0.08, search_epochs=3)
    assert result.prune_events
    for event in result.prune_events:
        assert event.weight_at_prune < event.threshold
    for edge in result.state.arch.edges:
        assert edge.num_active >= 2
    assert all(len(item["retained"]) == 2 for item in result.architecture["edges"])


def test_run_search_keeps_retain_floor(tmp_path):
    result = _toy_search(tmp_path, theta=0.2, retain_p=10, search_epochs=3)
    assert len(result.prune_events) == 4
    assert result.msg.endswith("4 candidates pruned")
    for item in result.architecture["edges"]:
        assert sum(item["active_mask"]) == 10
        assert len(item["retained"]) == 10
    # One step per train batch: 4 of 8 pairs train, batch size 2, 3 epochs.
    assert [r.step for r in result.history] == list(range(6))


def test_run_search_argument_checks(tmp_path):
    manifest = load_manifest(make_pair_files(str(tmp_path / "data"), count=8, size=32))
    with pytest.raises(ConfigError):
        run_search(SearchConfig(crop_size=16, constraint="hybrid"), manifest, pool=None, network=TINY,
                   extractor=SmoothExtractor(torch.float32))
    single = load_manifest(make_pair_files(str(tmp_path / "single"), count=1, size=32))
    with pytest.raises(ConfigError):
        run_search(SearchConfig(crop_size=16, constraint="reference_only"), single, network=TINY,
                   extractor=SmoothExtractor(torch.float32))


def test_search_artifacts(tmp_path, natural_manifest):
    manifest = load_manifest(make_pair_files(str(tmp_path / "data"), count=8, size=32))
    config = SearchConfig(batch_size=2, crop_size=16, search_epochs=1, constraint="hybrid", seed=0, theta=0.2)
    out = str(tmp_path / "out")
    result = run_search(config, manifest, load_natural_pool(natural_manifest), network=TINY,
                        extractor=SmoothExtractor(torch.float32), output_dir=out)
    paths = write_search_artifacts(result, out)
    assert os.path.exists(os.path.join(out, "search_checkpoint.safetensors"))
    with open(paths["loss_weights"], encoding="utf-8") as f:
        weights = json.load(f)["weights"]
    assert len(weights) == 17 and sum(weights.values()) == pytest.approx(1.0)
    assert len(read_prune_log(paths["prune_log"])) == len(result.prune_events) == 4
    history = read_history(paths["history"])
    assert len(history) == len(result.history) == 2
    assert history["Gamma_H"].notna().all()


@pytest.mark.slow
def test_constraint_decreases_over_search(tmp_path, natural_manifest):
    manifest = load_manifest(make_pair_files(str(tmp_path / "data"), count=8, size=32))
    config = SearchConfig(batch_size=2, crop_size=24, search_epochs=6, constraint="hybrid", seed=0,
                          lr_omega=1e-3)
    result = run_search(config, manifest, load_natural_pool(natural_manifest), network=TINY)
    by_epoch = {}
    for record in result.history:
        by_epoch.setdefault(record.epoch, []).append(record.gamma_h)
    first, last = by_epoch[0], by_epoch[max(by_epoch)]
    assert sum(last) / len(last) <= sum(first) / len(first)


def test_interrupt_stops_search_at_next_step(tmp_path, monkeypatch):
    original = train_search.step_alpha

    def step_then_interrupt(state, val_batch):
        result = original(state, val_batch)
        shared.status.interrupt()
        return result

    monkeypatch.setattr(train_search, "step_alpha", step_then_interrupt)
    result = _toy_search(tmp_path, search_epochs=3)
    assert len(result.history) == 1
    assert result.prune_events == []
    assert result.msg == "Search interrupted after 1 steps"
    assert not shared.status.active


def test_disabled_pruning_keeps_every_candidate(tmp_path):
    result = _toy_search(tmp_path, theta=0.5, prune_enabled=False)
    assert result.prune_events == []
    assert result.msg.startswith("Search finished") and result.msg.endswith("0 candidates pruned")
    for edge in result.state.arch.edges:
        assert edge.num_active == len(edge.candidates)
    assert all(len(item["retained"]) == 2 for item in result.architecture["edges"])


def test_plain_argmax_selection_without_pruning_or_retention(tmp_path):
    result = _toy_search(tmp_path, prune_enabled=False, retain_p=1)
    assert result.prune_events == []
    for edge, item in zip(result.state.arch.edges, result.architecture["edges"]):
        assert edge.num_active == len(edge.candidates)
        weights = arch_weights(edge).tolist()
        best = max(range(len(weights)), key=lambda i: (weights[i], -i))
        assert [entry["kind"] for entry in item["retained"]] == [edge.kinds[best]]
        assert item["retained"][0]["weight"] == pytest.approx(1.0)
