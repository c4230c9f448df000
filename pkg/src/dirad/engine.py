"""Forward evaluation, per-sample reverse-mode gradients and parameter updates.

Evaluation runs on a flattened, cached view of the network (see
``kernels.CompiledNet``).  The cache is owned here: call sites mutate the
``Network`` through its own primitives and the next evaluation recompiles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .network import INPUT, MODULATORY, OUTPUT, Network, NetworkError

def compiled(net: Network) -> kernels.CompiledNet:
    """Flat view of `net`, rebuilt whenever the cached topo order is stale."""
    topo = net.topo_order()  # also validates acyclicity
    entry = getattr(net, "_compiled_entry", None)
    if entry is not None and entry[0] is topo:
        cn = entry[1]
        # weights/biases may have changed without a structural mutation
        _refresh_params(net, cn)
        return cn
    cn = kernels.CompiledNet(net)
    net._compiled_entry = (topo, cn)
    return cn


def _refresh_params(net: Network, cn: kernels.CompiledNet) -> None:
    for p, nid in enumerate(cn.order):
        node = net.nodes[nid]
        cn.b0[p] = node.bias0
        cn.b1[p] = node.bias1
        cn.K[p] = node.K
    for i, key in enumerate(cn.edge_keys):
        cn.ew[i] = net.edges[key].weight


@dataclass
class Activations:
    """Per-sample node states for one batch, aligned with `compiled.order`."""

    compiled: kernels.CompiledNet
    a: np.ndarray  # (m, n) final states
    z0: np.ndarray  # (m, n) term-0 activations
    z1: np.ndarray  # (m, n) term-1 activations (modulatory only)

    def state(self, nid: int) -> np.ndarray:
        return self.a[:, self.compiled.pos[nid]]

    def outputs(self) -> np.ndarray:
        return self.a[:, self.compiled.out_pos]


@dataclass
class BatchTrace:
    """Activations plus per-sample deltas and edge gradients for one batch."""

    acts: Activations
    delta0: np.ndarray  # (m, n) dC/dz term 0
    delta1: np.ndarray  # (m, n) dC/dz term 1
    edge_grad: np.ndarray  # (m, e) dC/dw, column order = compiled.edge_keys
    cost: np.ndarray  # (m,) half summed squared error over outputs

    @property
    def compiled(self) -> kernels.CompiledNet:
        return self.acts.compiled

    def delta(self, nid: int, term: int) -> np.ndarray:
        p = self.compiled.pos[nid]
        return (self.delta0 if term == 0 else self.delta1)[:, p]

    def edge_grads(self, key: tuple[int, int, int]) -> np.ndarray:
        return self.edge_grad[:, self.compiled.edge_index[key]]


@dataclass
class NetGradients:
    """Batch-mean gradients plus signed direction components.

    ``edge_pos``/``edge_neg`` are the means of the positive- and
    negative-signed per-sample gradients, each divided by the full batch
    size, so ``edge_net = edge_pos + edge_neg``; same for node deltas.
    """

    compiled: kernels.CompiledNet
    edge_net: np.ndarray  # (e,)
    edge_pos: np.ndarray
    edge_neg: np.ndarray
    node_net: np.ndarray  # (n, 2)
    node_pos: np.ndarray
    node_neg: np.ndarray


def forward_pass(net: Network, batch: np.ndarray) -> Activations:
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    cn = compiled(net)
    if batch.shape[1] != cn.n_inputs:
        raise NetworkError(
            f"batch has {batch.shape[1]} columns, network has {cn.n_inputs} inputs"
        )
    a, z0, z1 = kernels.forward_arrays(cn, batch)
    if not np.all(np.isfinite(a)):
        bad = int(np.argwhere(~np.isfinite(a))[0][1])
        raise NetworkError(f"non-finite activation at node {cn.order[bad]}")
    return Activations(compiled=cn, a=a, z0=z0, z1=z1)


def batch_cost(acts: Activations, targets: np.ndarray) -> np.ndarray:
    diff = acts.outputs() - targets
    return 0.5 * np.sum(diff * diff, axis=1)


def backward_pass(
    net: Network,
    acts: Activations,
    targets: np.ndarray,
    mismatch_floor: float = 0.01,
) -> BatchTrace:
    """Per-sample deltas and edge gradients by reverse topological sweep.

    Output deltas of sample/output pairs whose absolute mismatch is below
    `mismatch_floor` are zeroed before propagation, which suppresses all
    upstream gradient contributions from satisfied samples.
    """
    cn = acts.compiled
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if targets.shape != (acts.a.shape[0], cn.out_pos.shape[0]):
        raise NetworkError(
            f"targets shaped {targets.shape}, expected "
            f"({acts.a.shape[0]}, {cn.out_pos.shape[0]})"
        )
    d0, d1, eg = kernels.backward_arrays(cn, acts.a, acts.z0, acts.z1, targets, mismatch_floor)
    if not (np.all(np.isfinite(eg)) and np.all(np.isfinite(d0)) and np.all(np.isfinite(d1))):
        raise NetworkError("non-finite gradient in backward pass")
    return BatchTrace(
        acts=acts, delta0=d0, delta1=d1, edge_grad=eg, cost=batch_cost(acts, targets)
    )


def _signed_means(per_sample: np.ndarray):
    m = per_sample.shape[0]
    pos = np.where(per_sample > 0, per_sample, 0.0).sum(axis=0) / m
    neg = np.where(per_sample < 0, per_sample, 0.0).sum(axis=0) / m
    return pos + neg, pos, neg


def aggregate(trace: BatchTrace) -> NetGradients:
    """Batch means (deterministic reduction order) of edge and node gradients."""
    e_net, e_pos, e_neg = _signed_means(trace.edge_grad)
    stacked = np.stack([trace.delta0, trace.delta1], axis=2)  # (m, n, 2)
    n_net, n_pos, n_neg = _signed_means(stacked)
    return NetGradients(
        compiled=trace.compiled,
        edge_net=e_net, edge_pos=e_pos, edge_neg=e_neg,
        node_net=n_net, node_pos=n_pos, node_neg=n_neg,
    )


def apply_updates(net: Network, grads: NetGradients, gamma: float) -> None:
    """Gradient-descent step on edge weights, output biases and term-1 biases."""
    cn = grads.compiled
    if not (np.all(np.isfinite(grads.edge_net)) and np.all(np.isfinite(grads.node_net))):
        raise NetworkError("non-finite net gradient in update")
    for i, key in enumerate(cn.edge_keys):
        net.edges[key].weight -= gamma * grads.edge_net[i]
    for p, nid in enumerate(cn.order):
        node = net.nodes[nid]
        if node.kind == OUTPUT:
            node.bias0 -= gamma * grads.node_net[p, 0]
        elif node.kind == MODULATORY:
            node.bias1 -= gamma * grads.node_net[p, 1]
        # term-0 bias of modulatory nodes stays frozen at 0; inputs have no bias


def parameters(net: Network) -> list[tuple]:
    """Adaptable parameters as (kind, key) descriptors, in deterministic order."""
    params: list[tuple] = [("w", key) for key in sorted(net.edges)]
    for nid in sorted(net.nodes):
        node = net.nodes[nid]
        if node.kind == OUTPUT:
            params.append(("b0", nid))
        elif node.kind == MODULATORY:
            params.append(("b1", nid))
    return params


def _get_param(net, kind, key):
    if kind == "w":
        return net.edges[key].weight
    node = net.nodes[key]
    return node.bias0 if kind == "b0" else node.bias1


def _set_param(net, kind, key, value):
    if kind == "w":
        net.edges[key].weight = value
    else:
        node = net.nodes[key]
        if kind == "b0":
            node.bias0 = value
        else:
            node.bias1 = value


def finite_difference_oracle(
    net: Network, batch: np.ndarray, targets: np.ndarray, h: float = 1e-5
) -> dict[tuple, float]:
    """Central-difference batch-mean gradient for every adaptable parameter.

    Independent of the backward sweep: evaluates total cost at p±h through
    the forward path only.  The output mismatch floor does not apply here,
    so compare against a backward pass run with ``mismatch_floor=0``.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))

    def total_cost():
        return float(np.mean(batch_cost(forward_pass(net, batch), targets)))

    grads: dict[tuple, float] = {}
    for kind, key in parameters(net):
        orig = _get_param(net, kind, key)
        _set_param(net, kind, key, orig + h)
        c_plus = total_cost()
        _set_param(net, kind, key, orig - h)
        c_minus = total_cost()
        _set_param(net, kind, key, orig)
        grads[(kind, key)] = (c_plus - c_minus) / (2.0 * h)
    return grads
