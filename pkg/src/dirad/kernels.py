"""Hot numeric kernels: batch forward and backward sweeps over a flattened net.

Two implementations are provided with identical semantics: numba ``@njit``
kernels (default) and a pure-numpy fallback.  Selection happens at import
time via the ``DIRAD_BACKEND`` environment variable:

    DIRAD_BACKEND=numpy   force the numpy path
    DIRAD_BACKEND=numba   force numba (default when numba imports cleanly)

``benchmarks/bench_kernels.py`` compares the two paths.
"""

from __future__ import annotations

import os

import numpy as np

from .network import INPUT, MODULATORY, OUTPUT, Network

_requested = os.environ.get("DIRAD_BACKEND", "numba").lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"DIRAD_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

USE_NUMBA = False
if _requested == "numba":
    try:
        import numba

        USE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USE_NUMBA = False

BACKEND = "numba" if USE_NUMBA else "numpy"


class CompiledNet:
    """Flat-array view of a Network, cached until the next mutation.

    Nodes are laid out in topological order; edges are grouped by
    (destination position, term) so each node's in-edges form contiguous
    slices ``e0s[p]:e0e[p]`` (term 0) and ``e1s[p]:e1e[p]`` (term 1).
    """

    def __init__(self, net: Network):
        order = net.topo_order()
        self.order = order
        self.pos = {nid: p for p, nid in enumerate(order)}
        n = len(order)
        self.kind = np.empty(n, dtype=np.int8)
        self.b0 = np.empty(n, dtype=np.float64)
        self.b1 = np.empty(n, dtype=np.float64)
        self.K = np.empty(n, dtype=np.float64)
        self.in_slot = np.full(n, -1, dtype=np.int64)
        input_slots = {nid: i for i, nid in enumerate(net.inputs)}
        for p, nid in enumerate(order):
            node = net.nodes[nid]
            self.kind[p] = node.kind
            self.b0[p] = node.bias0
            self.b1[p] = node.bias1
            self.K[p] = node.K
            if node.kind == INPUT:
                self.in_slot[p] = input_slots[nid]

        self.e0s = np.zeros(n, dtype=np.int64)
        self.e0e = np.zeros(n, dtype=np.int64)
        self.e1s = np.zeros(n, dtype=np.int64)
        self.e1e = np.zeros(n, dtype=np.int64)
        edge_keys: list[tuple[int, int, int]] = []
        esrc: list[int] = []
        edst: list[int] = []
        eterm: list[int] = []
        ew: list[float] = []
        for p, nid in enumerate(order):
            for term, (s, e) in ((0, (self.e0s, self.e0e)), (1, (self.e1s, self.e1e))):
                s[p] = len(edge_keys)
                for edge in sorted(net.in_edges(nid, term), key=lambda x: x.src):
                    edge_keys.append(edge.key)
                    esrc.append(self.pos[edge.src])
                    edst.append(p)
                    eterm.append(term)
                    ew.append(edge.weight)
                e[p] = len(edge_keys)
        self.edge_keys = edge_keys
        self.edge_index = {k: i for i, k in enumerate(edge_keys)}
        self.esrc = np.asarray(esrc, dtype=np.int64)
        self.edst = np.asarray(edst, dtype=np.int64)
        self.eterm = np.asarray(eterm, dtype=np.int8)
        self.ew = np.asarray(ew, dtype=np.float64)
        self.out_pos = np.asarray([self.pos[nid] for nid in net.outputs], dtype=np.int64)
        self.n_nodes = n
        self.n_edges = len(edge_keys)
        self.n_inputs = len(net.inputs)


def sigma1(z: np.ndarray | float, k: np.ndarray | float):
    """Shifted/scaled logistic with range (-1, 3); equals 1 at z=0."""
    return 4.0 / (1.0 + np.exp(-np.asarray(k) * z)) - 1.0


def sigma1_prime(z, k):
    s = sigma1(z, k)
    return k * (s + 1.0) * (3.0 - s) / 4.0


# -- numpy reference implementation -----------------------------------------


def _forward_np(kind, b0, b1, K, in_slot, e0s, e0e, e1s, e1e, esrc, ew, batch):
    m = batch.shape[0]
    n = kind.shape[0]
    a = np.zeros((m, n))
    z0 = np.zeros((m, n))
    z1 = np.zeros((m, n))
    for p in range(n):
        if kind[p] == INPUT:
            a[:, p] = batch[:, in_slot[p]]
            z0[:, p] = a[:, p]
            continue
        z = np.full(m, b0[p])
        for ei in range(e0s[p], e0e[p]):
            z = z + ew[ei] * a[:, esrc[ei]]
        z0[:, p] = z
        if kind[p] == OUTPUT:
            a[:, p] = 1.0 / (1.0 + np.exp(-z))
        else:
            z = np.full(m, b1[p])
            for ei in range(e1s[p], e1e[p]):
                z = z + ew[ei] * a[:, esrc[ei]]
            z1[:, p] = z
            a[:, p] = z0[:, p] * (4.0 / (1.0 + np.exp(-K[p] * z)) - 1.0)
    return a, z0, z1


def _backward_np(
    kind, b0, b1, K, e0s, e0e, e1s, e1e, esrc, ew,
    a, z0, z1, targets, out_pos, mismatch_floor,
):
    m, n = a.shape
    d0 = np.zeros((m, n))
    d1 = np.zeros((m, n))
    ga = np.zeros((m, n))
    eg = np.zeros((m, ew.shape[0]))
    dcda_out = np.zeros((m, out_pos.shape[0]))
    for j, p in enumerate(out_pos):
        diff = a[:, p] - targets[:, j]
        diff = np.where(np.abs(diff) < mismatch_floor, 0.0, diff)
        dcda_out[:, j] = diff
    for pi in range(n - 1, -1, -1):
        p = pi
        g = ga[:, p].copy()
        if kind[p] == OUTPUT:
            j = int(np.where(out_pos == p)[0][0])
            g = g + dcda_out[:, j]
            d0[:, p] = g * a[:, p] * (1.0 - a[:, p])
        elif kind[p] == MODULATORY:
            s1 = 4.0 / (1.0 + np.exp(-K[p] * z1[:, p])) - 1.0
            d0[:, p] = g * s1
            d1[:, p] = g * z0[:, p] * K[p] * (s1 + 1.0) * (3.0 - s1) / 4.0
        else:
            d0[:, p] = g
        for ei in range(e0s[p], e0e[p]):
            sp = esrc[ei]
            eg[:, ei] = a[:, sp] * d0[:, p]
            ga[:, sp] += ew[ei] * d0[:, p]
        if kind[p] == MODULATORY:
            for ei in range(e1s[p], e1e[p]):
                sp = esrc[ei]
                eg[:, ei] = a[:, sp] * d1[:, p]
                ga[:, sp] += ew[ei] * d1[:, p]
    return d0, d1, eg


_forward = _forward_np
_backward = _backward_np

if USE_NUMBA:
    from numba import njit

    @njit(cache=True)
    def _forward_nb(kind, b0, b1, K, in_slot, e0s, e0e, e1s, e1e, esrc, ew, batch):
        m = batch.shape[0]
        n = kind.shape[0]
        a = np.zeros((m, n))
        z0 = np.zeros((m, n))
        z1 = np.zeros((m, n))
        for p in range(n):
            if kind[p] == 0:  # input
                for s in range(m):
                    a[s, p] = batch[s, in_slot[p]]
                    z0[s, p] = a[s, p]
                continue
            for s in range(m):
                z = b0[p]
                for ei in range(e0s[p], e0e[p]):
                    z += ew[ei] * a[s, esrc[ei]]
                z0[s, p] = z
            if kind[p] == 1:  # output
                for s in range(m):
                    a[s, p] = 1.0 / (1.0 + np.exp(-z0[s, p]))
            else:  # modulatory
                for s in range(m):
                    z = b1[p]
                    for ei in range(e1s[p], e1e[p]):
                        z += ew[ei] * a[s, esrc[ei]]
                    z1[s, p] = z
                    a[s, p] = z0[s, p] * (4.0 / (1.0 + np.exp(-K[p] * z)) - 1.0)
        return a, z0, z1

    @njit(cache=True)
    def _backward_nb(
        kind, b0, b1, K, e0s, e0e, e1s, e1e, esrc, ew,
        a, z0, z1, targets, out_pos, mismatch_floor,
    ):
        m, n = a.shape
        d0 = np.zeros((m, n))
        d1 = np.zeros((m, n))
        ga = np.zeros((m, n))
        eg = np.zeros((m, ew.shape[0]))
        out_j = np.full(n, -1, dtype=np.int64)
        for j in range(out_pos.shape[0]):
            out_j[out_pos[j]] = j
        for pi in range(n - 1, -1, -1):
            p = pi
            if kind[p] == 1:  # output
                j = out_j[p]
                for s in range(m):
                    diff = a[s, p] - targets[s, j]
                    if abs(diff) < mismatch_floor:
                        diff = 0.0
                    g = ga[s, p] + diff
                    d0[s, p] = g * a[s, p] * (1.0 - a[s, p])
            elif kind[p] == 2:  # modulatory
                for s in range(m):
                    g = ga[s, p]
                    s1 = 4.0 / (1.0 + np.exp(-K[p] * z1[s, p])) - 1.0
                    d0[s, p] = g * s1
                    d1[s, p] = g * z0[s, p] * K[p] * (s1 + 1.0) * (3.0 - s1) / 4.0
            else:  # input
                for s in range(m):
                    d0[s, p] = ga[s, p]
            for ei in range(e0s[p], e0e[p]):
                sp = esrc[ei]
                for s in range(m):
                    eg[s, ei] = a[s, sp] * d0[s, p]
                    ga[s, sp] += ew[ei] * d0[s, p]
            if kind[p] == 2:
                for ei in range(e1s[p], e1e[p]):
                    sp = esrc[ei]
                    for s in range(m):
                        eg[s, ei] = a[s, sp] * d1[s, p]
                        ga[s, sp] += ew[ei] * d1[s, p]
        return d0, d1, eg

    _forward = _forward_nb
    _backward = _backward_nb


def forward_arrays(cn: CompiledNet, batch: np.ndarray):
    return _forward(
        cn.kind, cn.b0, cn.b1, cn.K, cn.in_slot,
        cn.e0s, cn.e0e, cn.e1s, cn.e1e, cn.esrc, cn.ew,
        np.ascontiguousarray(batch, dtype=np.float64),
    )


def backward_arrays(cn: CompiledNet, a, z0, z1, targets, mismatch_floor: float):
    return _backward(
        cn.kind, cn.b0, cn.b1, cn.K,
        cn.e0s, cn.e0e, cn.e1s, cn.e1e, cn.esrc, cn.ew,
        a, z0, z1, np.ascontiguousarray(targets, dtype=np.float64),
        cn.out_pos, mismatch_floor,
    )
