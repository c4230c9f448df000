import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dirad.engine import (
    aggregate,
    backward_pass,
    batch_cost,
    finite_difference_oracle,
    forward_pass,
)
from dirad.network import MODULATORY, Network, NetworkError


def random_net(rng, max_hidden: int = 4) -> Network:
    net = Network.fresh(int(rng.integers(1, 4)), int(rng.integers(1, 3)))
    hidden = [net.insert_node(MODULATORY) for _ in range(rng.integers(0, max_hidden + 1))]
    for h in hidden:
        net.nodes[h].K = float(rng.uniform(0.5, 2.0))
        net.nodes[h].bias1 = float(rng.uniform(-1, 1))
    for out in net.outputs:
        net.nodes[out].bias0 = float(rng.uniform(-1, 1))
    ids = sorted(net.nodes)
    for _ in range(int(rng.integers(3, 12))):
        src, dst = rng.choice(ids, size=2)
        node = net.nodes[dst]
        if node.kind == 0 or net.would_create_cycle(src, dst):
            continue
        term = int(rng.integers(0, 2)) if node.kind == MODULATORY else 0
        if (src, dst, term) in net.edges:
            continue
        net.insert_edge(src, dst, term, float(rng.uniform(-2, 2)))
    return net


def analytic_grads(net, batch, targets):
    trace = backward_pass(net, forward_pass(net, batch), targets, mismatch_floor=0.0)
    grads = aggregate(trace)
    cn = grads.compiled
    out = {}
    for i, key in enumerate(cn.edge_keys):
        out[("w", key)] = grads.edge_net[i]
    for p, nid in enumerate(cn.order):
        kind = net.nodes[nid].kind
        if kind == 1:
            out[("b0", nid)] = grads.node_net[p, 0]
        elif kind == MODULATORY:
            out[("b1", nid)] = grads.node_net[p, 1]
    return out


@pytest.mark.parametrize("seed", range(20))
def test_analytic_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng)
    batch = rng.normal(size=(6, len(net.inputs)))
    targets = rng.uniform(size=(6, len(net.outputs)))
    analytic = analytic_grads(net, batch, targets)
    oracle = finite_difference_oracle(net, batch, targets)
    for param, fd in oracle.items():
        rel = abs(analytic[param] - fd) / max(1e-6, abs(fd))
        assert rel < 1e-4, (param, analytic[param], fd)


def test_batch_cost_example():
    net = Network.fresh(1, 2)
    net.nodes[1].bias0 = 0.0
    net.nodes[2].bias0 = 0.0
    acts = forward_pass(net, np.array([[0.0]]))
    # both outputs sit at logistic(0)=0.5
    cost = batch_cost(acts, np.array([[1.0, 0.0]]))
    assert cost[0] == pytest.approx(0.5 * (0.25 + 0.25), abs=1e-15)


def test_mismatch_floor_zeroes_satisfied_outputs():
    net = Network.fresh(1, 1)
    acts = forward_pass(net, np.array([[0.0], [0.0]]))
    targets = np.array([[0.5005], [0.9]])  # first sample within 0.01 of output
    trace = backward_pass(net, acts, targets, mismatch_floor=0.01)
    deltas = trace.delta(net.outputs[0], 0)
    assert deltas[0] == 0.0
    assert deltas[1] != 0.0


def test_dimension_errors():
    net = Network.fresh(2, 1)
    with pytest.raises(NetworkError):
        forward_pass(net, np.zeros((3, 5)))
    acts = forward_pass(net, np.zeros((3, 2)))
    with pytest.raises(NetworkError):
        backward_pass(net, acts, np.zeros((3, 4)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_aggregate_signed_decomposition(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng, max_hidden=2)
    batch = rng.normal(size=(5, len(net.inputs)))
    targets = rng.uniform(size=(5, len(net.outputs)))
    trace = backward_pass(net, forward_pass(net, batch), targets, 0.0)
    g = aggregate(trace)
    assert np.allclose(g.edge_net, g.edge_pos + g.edge_neg, atol=1e-15)
    assert np.allclose(g.node_net, g.node_pos + g.node_neg, atol=1e-15)
    assert np.all(g.edge_pos >= 0) and np.all(g.edge_neg <= 0)
    assert np.all(g.node_pos >= 0) and np.all(g.node_neg <= 0)
