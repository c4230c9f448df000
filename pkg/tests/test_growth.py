from types import SimpleNamespace

import numpy as np
import pytest

from dirad.data import make_xor_task
from dirad.engine import backward_pass, forward_pass
from dirad.growth import (
    GrowthConfig,
    adaptation_step,
    compute_ap,
    decay_K,
    destructive_step,
    edge_node_conversion,
    generate_edge,
    perturb_zero_weight_gradients,
    select_edge_source,
    _exhaustion_flags,
)
from dirad.network import MODULATORY, Network, NetworkError


def cfg_with(**kw) -> GrowthConfig:
    cfg = GrowthConfig()
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


def trace_for(net, batch, targets, floor=0.0):
    return backward_pass(net, forward_pass(net, batch), targets, floor)


# -- adaptive potentials -------------------------------------------------------


def test_exhaustion_balanced_conflict():
    # net 0, directional means 0.25 each: 5*0 < 0.25 -> exhausted; total 2.0
    vals = np.array([[0.5], [-0.5], [0.5], [-0.5]])
    net, total, exhausted = _exhaustion_flags(vals, GrowthConfig())
    assert net[0] == 0.0
    assert total[0] == 2.0
    assert exhausted[0]


def test_exhaustion_agreeing_samples_not_exhausted():
    vals = np.full((4, 1), 0.5)
    net, total, exhausted = _exhaustion_flags(vals, GrowthConfig())
    assert net[0] == 0.5
    assert not exhausted[0]


def test_exhaustion_all_clamped_is_exhausted():
    # everything below delta_min clamps to zero: no potential at all
    vals = np.full((4, 1), 0.005)
    net, total, exhausted = _exhaustion_flags(
        np.where(np.abs(vals) < 0.01, 0.0, vals), GrowthConfig()
    )
    assert total[0] == 0.0
    assert exhausted[0]


def test_exhaustion_mild_imbalance():
    # net 0.25, pos mean 0.375: 5*0.25 > 0.375 and 5*0.25 > 0.125 -> alive
    vals = np.array([[0.5], [0.5], [0.5], [-0.5]])
    _net, _total, exhausted = _exhaustion_flags(vals, GrowthConfig())
    assert not exhausted[0]


def test_edge_r2_exhaustion_without_conflict():
    net = Network.fresh(1, 1)
    net.insert_edge(0, 1, 0, 1.0)
    batch = np.array([[1.0], [1.0]])
    acts = forward_pass(net, batch)
    targets = acts.outputs() - 0.5  # large agreeing mismatch
    trace = backward_pass(net, acts, targets, 0.0)
    ap = compute_ap(trace, GrowthConfig())
    # agreeing per-sample gradients, but |net| < R2 * |w| = 0.1
    assert abs(ap.edge_net[0]) < 0.1
    assert ap.edge_exhausted[0]
    # the output node itself keeps adapting: deltas agree
    assert not ap.node_fully_exhausted(net, 1)


def test_node_exhaustion_requires_exhausted_in_edges():
    net = Network.fresh(1, 1)
    net.insert_edge(0, 1, 0, 0.1)
    batch = np.array([[1.0], [-1.0]])
    acts = forward_pass(net, batch)
    targets = np.stack([acts.outputs()[0] - 0.3, acts.outputs()[1] + 0.3])
    trace = backward_pass(net, acts, targets, 0.0)
    ap = compute_ap(trace, GrowthConfig())
    # the output's deltas cancel, but its in-edge gradients agree (input
    # flips sign), so the node is not treated as exhausted
    assert not ap.edge_exhausted[0]
    assert not ap.node_exhausted_of(1, 0)


# -- zero-weight perturbation --------------------------------------------------


def test_perturbation_statistics():
    g = np.full((100_000, 1), 2.0)
    trace = SimpleNamespace(compiled=SimpleNamespace(ew=np.array([0.0])), edge_grad=g.copy())
    perturb_zero_weight_gradients(trace, GrowthConfig(), np.random.default_rng(0))
    noise = trace.edge_grad[:, 0] - 2.0
    assert abs(noise.mean()) < 0.002
    assert 0.045 * 2.0 < noise.std() < 0.055 * 2.0


def test_perturbation_skips_nonzero_weights_and_zero_gradients():
    g = np.array([[1.0, 1.0], [0.0, 0.0]])
    trace = SimpleNamespace(
        compiled=SimpleNamespace(ew=np.array([0.5, 0.0])), edge_grad=g.copy()
    )
    perturb_zero_weight_gradients(trace, GrowthConfig(), np.random.default_rng(0))
    assert np.array_equal(trace.edge_grad[:, 0], g[:, 0])  # weighted edge untouched
    assert trace.edge_grad[1, 1] == 0.0  # zero gradient stays exactly zero
    assert trace.edge_grad[0, 1] != 1.0


# -- edge generation -----------------------------------------------------------


def test_select_edge_source_prefers_delta_alignment():
    net = Network.fresh(2, 1)
    batch = np.array([[1.0, 2.0], [1.0, -2.0]])
    targets = np.array([[0.4], [0.6]])  # symmetric mismatch around 0.5
    trace = trace_for(net, batch, targets)
    # input 0 is constant, so its activation-delta product cancels;
    # input 1 flips with the deltas and scores |2*d| + |2*d| > 0
    source = select_edge_source(net, trace, 2, 0, GrowthConfig(), np.random.default_rng(0))
    assert source == 1


def test_select_edge_source_uniform_fallback():
    net = Network.fresh(2, 1)
    batch = np.array([[1.0, 2.0], [1.0, -2.0]])
    targets = np.full((2, 1), 0.5)  # zero mismatch -> all scores zero
    trace = trace_for(net, batch, targets)
    picks = {
        select_edge_source(net, trace, 2, 0, GrowthConfig(), np.random.default_rng(s))
        for s in range(30)
    }
    assert picks == {0, 1}  # random but never None


def test_select_edge_source_respects_refraction_and_existing():
    net = Network.fresh(2, 1)
    net.insert_edge(1, 2, 0, 0.3)
    net.nodes[0].refraction_remaining = 3
    trace = trace_for(net, np.ones((2, 2)), np.full((2, 1), 0.9))
    assert select_edge_source(net, trace, 2, 0, GrowthConfig(), np.random.default_rng(0)) is None


def test_generate_edge_neutral():
    net = Network.fresh(2, 1)
    batch = np.array([[0.3, -0.7], [1.1, 0.2]])
    event = generate_edge(net, 2, 0, 0, GrowthConfig(), probe_batch=batch)
    assert event.kind == "EdgeGen"
    assert net.edges[(0, 2, 0)].weight == 0.0
    assert event.probe_dev == 0.0
    assert net.nodes[2].refraction_remaining == GrowthConfig().refraction_steps


# -- edge-node conversion ------------------------------------------------------


def test_enc_identities_and_neutrality():
    net = Network.fresh(2, 1)
    net.insert_edge(0, 2, 0, 0.8)
    net.insert_edge(1, 2, 0, -0.4)
    batch = np.array([[0.5, -1.0], [2.0, 0.3], [-0.7, 0.9]])
    targets = np.array([[0.2], [0.9], [0.6]])
    event = edge_node_conversion(net, (0, 2, 0), GrowthConfig(), batch, targets)
    k = event.ids["node"]
    node = net.nodes[k]
    assert node.kind == MODULATORY
    assert node.K == pytest.approx(1.0 / 0.8)
    assert node.bias1 == 0.0
    assert net.edges[(0, k, 0)].weight == 1.0
    assert net.edges[(k, 2, 0)].weight == 0.8
    assert (0, 2, 0) not in net.edges
    assert event.probe_dev == 0.0  # response-neutral by construction
    assert event.delta_transfer_dev < 1e-9


def test_enc_negative_weight_gives_negative_K():
    net = Network.fresh(1, 1)
    net.insert_edge(0, 1, 0, -0.5)
    event = edge_node_conversion(net, (0, 1, 0), GrowthConfig())
    assert net.nodes[event.ids["node"]].K == pytest.approx(-2.0)


def test_enc_rejects_zero_weight_and_refraction():
    net = Network.fresh(1, 1)
    edge = net.insert_edge(0, 1, 0, 0.0)
    with pytest.raises(NetworkError):
        edge_node_conversion(net, (0, 1, 0), GrowthConfig())
    edge.weight = 0.5
    edge.refraction_remaining = 2
    with pytest.raises(NetworkError):
        edge_node_conversion(net, (0, 1, 0), GrowthConfig())


# -- maintenance ---------------------------------------------------------------


def test_decay_K():
    net = Network.fresh(1, 1)
    h = net.insert_node(MODULATORY)
    net.nodes[h].K = 11.0
    decay_K(net, GrowthConfig())
    assert net.nodes[h].K == pytest.approx(11.0 * 0.9 + 0.1)
    net.nodes[h].K = 1.0
    decay_K(net, GrowthConfig())
    assert net.nodes[h].K == pytest.approx(1.0)  # fixed point


def test_destructive_removes_aged_zero_weight_edges():
    net = Network.fresh(1, 1)
    net.insert_edge(0, 1, 0, 0.0)
    net.step = 5
    young = destructive_step(net, GrowthConfig(), np.random.default_rng(0))
    assert not young and (0, 1, 0) in net.edges  # still protected at age 5
    net.step = 6
    events = destructive_step(net, GrowthConfig(), np.random.default_rng(0))
    assert [e.kind for e in events] == ["EdgeRemoval"]
    assert not net.edges


def test_destructive_keeps_weighted_edges():
    net = Network.fresh(1, 1)
    net.insert_edge(0, 1, 0, 0.7)
    net.step = 100
    assert not destructive_step(net, GrowthConfig(), np.random.default_rng(0))
    assert (0, 1, 0) in net.edges


def test_orphan_removal_probability():
    hits = 0
    trials = 600
    for s in range(trials):
        net = Network.fresh(1, 1)
        net.insert_node(MODULATORY)  # orphan: no out-edges
        events = destructive_step(net, GrowthConfig(), np.random.default_rng(s))
        hits += any(e.kind == "NodeRemoval" for e in events)
    assert 0.25 < hits / trials < 0.35


def test_orphan_removal_no_cascade():
    net = Network.fresh(1, 1)
    a = net.insert_node(MODULATORY)
    b = net.insert_node(MODULATORY)
    net.insert_edge(b, a, 0, 0.5)
    cfg = cfg_with(node_removal_prob=1.0)
    rng = np.random.default_rng(0)
    destructive_step(net, cfg, rng)
    assert a not in net.nodes
    assert b in net.nodes  # became an orphan mid-sweep; survives the step
    destructive_step(net, cfg, rng)
    assert b not in net.nodes


# -- priority-ordered step -----------------------------------------------------


def test_first_xor_step_generates_one_edge():
    net = Network.fresh(2, 1)
    batch, targets = make_xor_task()
    rep = adaptation_step(net, batch, targets, GrowthConfig(), np.random.default_rng(0))
    kinds = [e.kind for e in rep.events]
    assert kinds == ["EdgeGen"]
    assert rep.events[0].ids["dst"] == 2
    assert rep.events[0].probe_dev == 0.0


def test_refraction_blocks_further_gps():
    net = Network.fresh(2, 1)
    batch, targets = make_xor_task()
    cfg = GrowthConfig()
    rng = np.random.default_rng(0)
    assert adaptation_step(net, batch, targets, cfg, rng).events
    for _ in range(cfg.refraction_steps - 1):
        assert not adaptation_step(net, batch, targets, cfg, rng).events


def test_one_gp_per_target_per_step():
    net = Network.fresh(2, 2)
    batch = np.array([[1.0, -1.0], [-1.0, 1.0]])
    targets = np.array([[0.0, 1.0], [1.0, 0.0]])  # both outputs conflicted
    rep = adaptation_step(net, batch, targets, GrowthConfig(), np.random.default_rng(1))
    gen = [e for e in rep.events if e.kind == "EdgeGen"]
    assert len(gen) == 2
    assert {e.ids["dst"] for e in gen} == {2, 3}


def test_source_filter_is_enforced():
    net = Network.fresh(2, 1)
    batch, targets = make_xor_task()
    rep = adaptation_step(
        net, batch, targets, GrowthConfig(), np.random.default_rng(0),
        source_filter=lambda nid, target: nid == 1,
    )
    assert [e.ids["src"] for e in rep.events if e.kind == "EdgeGen"] == [1]
