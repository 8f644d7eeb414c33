import math

import pytest
import torch

from dualsearch.ops import ArchParams, MixedEdge, arch_weights, build_candidate_set
from dualsearch.wsras import (PruneEvent, prune_step, read_prune_log, retention_finalize, tie_break,
                              write_prune_log)


def _edge_with_weights(weights):
    ops = build_candidate_set(2)[:len(weights)]
    edge = MixedEdge(2, ops, [op.kind for op in ops])
    with torch.no_grad():
        edge.alpha.copy_(torch.log(torch.tensor(weights)))
    return edge


def test_prune_removes_weakest_below_threshold():
    edge = _edge_with_weights([0.4, 0.35, 0.15, 0.10])
    arch, events = prune_step(ArchParams([("e", edge)], theta=0.12, retain_p=2), step=7)
    assert edge.num_active == 3
    assert edge.active_mask.tolist() == [True, True, True, False]
    assert len(events) == 1
    event = events[0]
    assert event.pruned_kind == edge.kinds[3]
    assert event.weight_at_prune == pytest.approx(0.10)
    assert event.weight_at_prune < event.threshold
    assert event.step == 7


def test_prune_respects_floor():
    edge = _edge_with_weights([0.5, 0.5])
    _, events = prune_step(ArchParams([("e", edge)], theta=0.9, retain_p=2))
    assert events == [] and edge.num_active == 2


def test_prune_needs_weight_below_threshold():
    edge = _edge_with_weights([0.34, 0.33, 0.33])
    _, events = prune_step(ArchParams([("e", edge)], theta=0.1, retain_p=2))
    assert events == [] and edge.num_active == 3


def test_prune_at_most_one_per_edge_per_step():
    edge = _edge_with_weights([0.9, 0.04, 0.03, 0.03])
    arch = ArchParams([("e", edge)], theta=0.1, retain_p=1)
    _, events = prune_step(arch)
    assert len(events) == 1
    assert edge.num_active == 3


@pytest.mark.parametrize("weights, expected", [([0.2, 0.2, 0.6], 0), ([0.6, 0.2, 0.2], 1), ([0.1], 0)])
def test_tie_break(weights, expected):
    assert tie_break(weights) == expected


def test_retention_top_two_renormalized():
    edge = _edge_with_weights([0.5, 0.3, 0.2])
    (finalized,) = retention_finalize(ArchParams([("e", edge)], retain_p=2))
    assert list(finalized.kinds) == list(edge.kinds[:2])
    assert [w for _, w in finalized.retained] == pytest.approx([0.625, 0.375], abs=1e-6)


def test_retention_single_is_argmax():
    edge = _edge_with_weights([0.2, 0.5, 0.3])
    (finalized,) = retention_finalize(ArchParams([("e", edge)], retain_p=1))
    assert finalized.retained == [(edge.kinds[1], 1.0)]


def test_retention_keeps_all_when_p_covers_active():
    edge = _edge_with_weights([0.5, 0.3, 0.2])
    (finalized,) = retention_finalize(ArchParams([("e", edge)], retain_p=5))
    assert [w for _, w in finalized.retained] == pytest.approx([0.5, 0.3, 0.2], abs=1e-6)


def test_retention_matches_brute_force_on_random_edges():
    generator = torch.Generator().manual_seed(0)
    edges = []
    for i in range(5):
        edge = MixedEdge(2)
        with torch.no_grad():
            edge.alpha.copy_(torch.randn(11, generator=generator))
        edge.deactivate(i)
        edges.append((f"e{i}", edge))
    finalized = retention_finalize(ArchParams(edges, retain_p=3))
    for (_, edge), result in zip(edges, finalized):
        weights = arch_weights(edge).tolist()
        kinds = edge.active_kinds
        expected = sorted(range(len(weights)), key=lambda i: (-weights[i], i))[:3]
        assert list(result.kinds) == [kinds[i] for i in expected]
        total = sum(weights[i] for i in expected)
        assert [w for _, w in result.retained] == pytest.approx([weights[i] / total for i in expected], abs=1e-6)


def test_finalized_edge_forward_is_weighted_sum():
    edge = _edge_with_weights([0.5, 0.3, 0.2])
    (finalized,) = retention_finalize(ArchParams([("e", edge)], retain_p=2))
    x = torch.randn(1, 2, 8, 8)
    expected = 0.625 * edge.candidates[0](x) + 0.375 * edge.candidates[1](x)
    assert torch.allclose(finalized(x), expected, atol=1e-6)


def test_prune_log_round_trip(tmp_path):
    events = [PruneEvent(0, "conv3x3", 0.01, 3, 0.05, "encoder"), PruneEvent(2, "dil5x5", 0.02, 6, 0.05, "x")]
    path = str(tmp_path / "prune_log.ndjson")
    write_prune_log(events, path)
    assert read_prune_log(path) == events
    assert len(open(path).read().splitlines()) == 2
