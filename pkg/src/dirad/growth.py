"""Structural adaptation: adaptive potentials, neutral generative processes
(edge generation, edge-node conversion), destructive cleanup, and the
priority-ordered per-step adaptation loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .engine import (
    BatchTrace,
    aggregate,
    apply_updates,
    backward_pass,
    forward_pass,
)
from .network import INPUT, MODULATORY, OUTPUT, Network, NetworkError

ZERO_WEIGHT_EPS = 1e-12  # "weight is zero" for removal/perturbation/ENC checks


@dataclass
class GrowthConfig:
    delta_min: float = 0.01
    r1: float = 5.0
    r2: float = 0.1
    gamma: float = 2.0
    refraction_steps: int = 5
    edge_protection_steps: int = 5
    node_removal_prob: float = 0.3
    k_decay: float = 0.1
    zero_weight_noise: float = 0.05
    mismatch_floor: float = 0.01
    rng_seed: int = 0
    audit_gp: bool = True  # record neutrality / delta-transfer audits on events

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.rng_seed)


@dataclass
class APReport:
    """Exhaustion flags and total adaptive potentials for one batch trace.

    Arrays are aligned with ``trace.compiled``: node arrays are (n, 2)
    indexed by (topo position, term), edge arrays follow the flat edge
    order.  Per-sample values below ``delta_min`` are clamped to zero
    before any of these quantities are computed.
    """

    trace: BatchTrace
    edge_net: np.ndarray
    edge_total: np.ndarray
    edge_exhausted: np.ndarray  # bool
    node_net: np.ndarray
    node_total: np.ndarray
    node_exhausted: np.ndarray  # bool, per term

    def edge_total_of(self, key) -> float:
        idx = self.trace.compiled.edge_index.get(key)
        return 0.0 if idx is None else float(self.edge_total[idx])

    def edge_exhausted_of(self, key) -> bool:
        idx = self.trace.compiled.edge_index.get(key)
        return True if idx is None else bool(self.edge_exhausted[idx])

    def node_pos(self, nid: int):
        return self.trace.compiled.pos.get(nid)

    def node_total_of(self, nid: int, term: int) -> float:
        p = self.node_pos(nid)
        return 0.0 if p is None else float(self.node_total[p, term])

    def node_total_sum(self, net: Network, nid: int) -> float:
        p = self.node_pos(nid)
        if p is None:
            return 0.0
        if net.nodes[nid].kind == MODULATORY:
            return float(self.node_total[p, 0] + self.node_total[p, 1])
        return float(self.node_total[p, 0])

    def node_exhausted_of(self, nid: int, term: int) -> bool:
        p = self.node_pos(nid)
        return True if p is None else bool(self.node_exhausted[p, term])

    def node_fully_exhausted(self, net: Network, nid: int) -> bool:
        if net.nodes[nid].kind == MODULATORY:
            return self.node_exhausted_of(nid, 0) and self.node_exhausted_of(nid, 1)
        return self.node_exhausted_of(nid, 0)


@dataclass
class GenerativeEvent:
    kind: str  # EdgeGen | ENC | EdgeRemoval | NodeRemoval | L1Prune
    step: int
    ids: dict
    probe_dev: float | None = None  # max |pre - post| output deviation
    delta_transfer_dev: float | None = None  # ENC only
    extra: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        doc = {"kind": self.kind, "step": self.step, "ids": self.ids}
        if self.probe_dev is not None:
            doc["probe_dev"] = self.probe_dev
        if self.delta_transfer_dev is not None:
            doc["delta_transfer_dev"] = self.delta_transfer_dev
        if self.extra:
            doc["extra"] = self.extra
        return doc


@dataclass
class StepReport:
    cost: float
    events: list[GenerativeEvent]
    n_nodes: int
    n_edges: int
    n_hidden: int


def _clamp(values: np.ndarray, delta_min: float) -> np.ndarray:
    return np.where(np.abs(values) < delta_min, 0.0, values)


def _exhaustion_flags(per_sample: np.ndarray, cfg: GrowthConfig):
    """(net, total, exhausted) for clamped per-sample values.

    Exhaustion means the component offers no usable adaptive direction:
    either nothing survives the clamp at all (zero total potential), or
    one signed direction's mean dominates the batch mean by the R1 ratio
    (the per-sample values cancel rather than agree).
    """
    m = per_sample.shape[0]
    net = per_sample.sum(axis=0) / m
    pos = np.where(per_sample > 0, per_sample, 0.0).sum(axis=0) / m
    neg = -np.where(per_sample < 0, per_sample, 0.0).sum(axis=0) / m
    total = np.abs(per_sample).sum(axis=0)
    absnet = np.abs(net)
    r1_hit = (cfg.r1 * absnet < pos) | (cfg.r1 * absnet < neg)
    exhausted = (total == 0.0) | r1_hit
    return net, total, exhausted


def compute_ap(trace: BatchTrace, cfg: GrowthConfig) -> APReport:
    cn = trace.compiled
    eg = _clamp(trace.edge_grad, cfg.delta_min)
    e_net, e_total, e_exh = _exhaustion_flags(eg, cfg)
    e_exh = e_exh | (np.abs(e_net) < cfg.r2 * np.abs(cn.ew))

    deltas = _clamp(np.stack([trace.delta0, trace.delta1], axis=2), cfg.delta_min)
    n_net, n_total, n_exh = _exhaustion_flags(deltas, cfg)
    # a node term is exhausted only if its own in-edges are exhausted too
    for p in range(cn.n_nodes):
        for term, (s, e) in ((0, (cn.e0s, cn.e0e)), (1, (cn.e1s, cn.e1e))):
            if n_exh[p, term] and e[p] > s[p]:
                n_exh[p, term] = bool(np.all(e_exh[s[p]:e[p]]))
    return APReport(
        trace=trace,
        edge_net=e_net, edge_total=e_total, edge_exhausted=e_exh,
        node_net=n_net, node_total=n_total, node_exhausted=n_exh,
    )


def perturb_zero_weight_gradients(
    trace: BatchTrace, cfg: GrowthConfig, rng: np.random.Generator
) -> None:
    """Gaussian jitter on per-sample gradients of zero-weight edges.

    Std is proportional to each sample's own gradient magnitude, so exact
    zeros stay zero.  Applied before aggregation, hence it reaches both
    the weight update and the AP bookkeeping.
    """
    cn = trace.compiled
    cols = np.flatnonzero(np.abs(cn.ew) < ZERO_WEIGHT_EPS)
    if cols.size == 0:
        return
    eg = trace.edge_grad[:, cols]
    noise = rng.standard_normal(eg.shape) * (cfg.zero_weight_noise * np.abs(eg))
    trace.edge_grad[:, cols] = eg + noise


def select_edge_source(
    net: Network,
    trace: BatchTrace,
    target: int,
    term: int,
    cfg: GrowthConfig,
    rng: np.random.Generator,
    candidate_filter: Optional[Callable[[int], bool]] = None,
) -> int | None:
    """Pick the in-edge source best aligned with the target term's deltas.

    Candidates exclude cycle-creating nodes, existing sources of this
    target term, and nodes in refraction.  If every candidate scores zero
    under the delta_min clamp, one is drawn uniformly at random; returns
    None only when no candidate exists at all.
    """
    existing = {e.src for e in net.in_edges(target, term)}
    candidates = []
    for nid in sorted(net.nodes):
        if nid == target or nid in existing:
            continue
        if net.nodes[nid].refraction_remaining > 0:
            continue
        if candidate_filter is not None and not candidate_filter(nid):
            continue
        if net.would_create_cycle(nid, target):
            continue
        candidates.append(nid)
    if not candidates:
        return None
    deltas = _clamp(trace.delta(target, term), cfg.delta_min)
    cn = trace.compiled
    best, best_score = None, 0.0
    for nid in candidates:
        p = cn.pos.get(nid)
        if p is None:
            continue
        score = abs(float(np.dot(trace.acts.a[:, p], deltas)))
        if score > best_score:
            best, best_score = nid, score
    if best is not None:
        return best
    return candidates[int(rng.integers(len(candidates)))]


def _probe_outputs(net: Network, probe_batch: np.ndarray) -> np.ndarray:
    return forward_pass(net, probe_batch).outputs()


def generate_edge(
    net: Network,
    target: int,
    term: int,
    source: int,
    cfg: GrowthConfig,
    probe_batch: np.ndarray | None = None,
) -> GenerativeEvent:
    """Neutral zero-weight in-edge; target, source and edge enter refraction."""
    pre = _probe_outputs(net, probe_batch) if probe_batch is not None else None
    edge = net.insert_edge(source, target, term, 0.0)
    edge.refraction_remaining = cfg.refraction_steps
    net.nodes[target].refraction_remaining = cfg.refraction_steps
    net.nodes[source].refraction_remaining = cfg.refraction_steps
    dev = None
    if pre is not None:
        dev = float(np.max(np.abs(_probe_outputs(net, probe_batch) - pre)))
    return GenerativeEvent(
        kind="EdgeGen",
        step=net.step,
        ids={"src": source, "dst": target, "term": term},
        probe_dev=dev,
    )


def edge_node_conversion(
    net: Network,
    key: tuple[int, int, int],
    cfg: GrowthConfig,
    probe_batch: np.ndarray | None = None,
    probe_targets: np.ndarray | None = None,
) -> GenerativeEvent:
    """Replace edge (i,j) by modulatory node k with edges (i,k) and (k,j).

    By construction the conversion is response-neutral and the new node's
    term-1 deltas equal the replaced edge's per-sample weight gradients:
    w_ik=1, w_kj=w_ij, b_k1=0 and steepness 1/w_ij.
    """
    if key not in net.edges:
        raise NetworkError(f"unknown edge {key}")
    edge = net.edges[key]
    w = edge.weight
    if abs(w) < ZERO_WEIGHT_EPS:
        raise NetworkError(f"edge {key} has zero weight, cannot convert")
    if edge.refraction_remaining > 0:
        raise NetworkError(f"edge {key} is in refraction")
    src, dst, term = key

    pre = pre_grads = None
    if probe_batch is not None:
        if probe_targets is not None and cfg.audit_gp:
            acts = forward_pass(net, probe_batch)
            pre = acts.outputs()
            pre_grads = backward_pass(
                net, acts, probe_targets, cfg.mismatch_floor
            ).edge_grads(key).copy()
        else:
            pre = _probe_outputs(net, probe_batch)

    k = net.insert_node(MODULATORY)
    knode = net.nodes[k]
    knode.K = 1.0 / w
    knode.bias1 = 0.0
    e_in = net.insert_edge(src, k, 0, 1.0)
    e_out = net.insert_edge(k, dst, term, w)
    net.remove_edge(key)
    knode.refraction_remaining = cfg.refraction_steps
    e_in.refraction_remaining = cfg.refraction_steps
    e_out.refraction_remaining = cfg.refraction_steps

    dev = transfer_dev = None
    if pre is not None:
        if pre_grads is not None:
            acts = forward_pass(net, probe_batch)
            dev = float(np.max(np.abs(acts.outputs() - pre)))
            post = backward_pass(net, acts, probe_targets, cfg.mismatch_floor)
            transfer_dev = float(np.max(np.abs(post.delta(k, 1) - pre_grads)))
        else:
            dev = float(np.max(np.abs(_probe_outputs(net, probe_batch) - pre)))
    return GenerativeEvent(
        kind="ENC",
        step=net.step,
        ids={"src": src, "dst": dst, "term": term, "node": k},
        probe_dev=dev,
        delta_transfer_dev=transfer_dev,
        extra={"weight": w},
    )


def decay_K(net: Network, cfg: GrowthConfig) -> None:
    """Relax every modulatory steepness toward its fixed point of 1."""
    for node in net.nodes.values():
        if node.kind == MODULATORY:
            node.K = (1.0 - cfg.k_decay) * node.K + cfg.k_decay


def destructive_step(
    net: Network, cfg: GrowthConfig, rng: np.random.Generator
) -> list[GenerativeEvent]:
    """Drop zero-weight edges past protection, then orphaned modulatory nodes.

    The node sweep runs once per step (no recursive cascade) and each
    orphan survives with probability 1 - node_removal_prob.
    """
    events: list[GenerativeEvent] = []
    for key in sorted(net.edges):
        edge = net.edges[key]
        age = net.step - edge.created_at
        if abs(edge.weight) < ZERO_WEIGHT_EPS and age > cfg.edge_protection_steps:
            net.remove_edge(key)
            events.append(GenerativeEvent("EdgeRemoval", net.step, {"edge": list(key)}))
    orphans = [
        nid
        for nid in sorted(net.nodes)
        if net.nodes[nid].kind == MODULATORY and not net.out_edges(nid)
    ]
    for nid in orphans:
        if rng.random() < cfg.node_removal_prob:
            net.remove_node(nid)
            events.append(GenerativeEvent("NodeRemoval", net.step, {"node": nid}))
    return events


def _pathway_components(net: Network, target: int):
    nodes = net.ancestors_or_self(target)
    edges = [e.key for nid in nodes for e in net.in_edges(nid)]
    return nodes, edges


def _pathway_exhausted(net: Network, ap: APReport, target: int) -> bool:
    nodes, edges = _pathway_components(net, target)
    if not all(ap.node_fully_exhausted(net, nid) for nid in nodes):
        return False
    return all(ap.edge_exhausted_of(key) for key in edges)


def _enc_eligible(net: Network, ap: APReport, key) -> bool:
    edge = net.edges[key]
    return (
        ap.edge_exhausted_of(key)
        and ap.edge_total_of(key) > 0.0
        and abs(edge.weight) >= ZERO_WEIGHT_EPS
        and edge.refraction_remaining == 0
    )


def _edge_gen_terms(net: Network, ap: APReport, nid: int) -> list[int]:
    node = net.nodes[nid]
    if node.kind == INPUT or node.refraction_remaining > 0:
        return []
    terms = (0, 1) if node.kind == MODULATORY else (0,)
    eligible = [
        t
        for t in terms
        if ap.node_exhausted_of(nid, t) and ap.node_total_of(nid, t) > 0.0
    ]
    eligible.sort(key=lambda t: -ap.node_total_of(nid, t))
    return eligible


def _gp_for(
    net: Network,
    trace: BatchTrace,
    ap: APReport,
    cfg: GrowthConfig,
    rng: np.random.Generator,
    target: int,
    source_filter,
    probe_batch,
    probe_targets,
) -> GenerativeEvent | None:
    """Walk the input pathway of `target` and perform at most one GP.

    Descends along edges with the highest total AP into sources that still
    hold total AP; otherwise tries ENC on the edge, then edge generation
    at the current node.  Visited nodes are never re-entered, which bounds
    the walk on any DAG.
    """
    visited: set[int] = set()
    current = target
    while True:
        visited.add(current)
        edges = sorted(
            (e.key for e in net.in_edges(current)),
            key=lambda k: (-ap.edge_total_of(k), k),
        )
        descended = False
        for key in edges:
            if ap.edge_total_of(key) <= 0.0:
                continue
            src = key[0]
            if ap.node_total_sum(net, src) > 0.0 and src not in visited:
                current = src
                descended = True
                break
            if _enc_eligible(net, ap, key):
                return edge_node_conversion(net, key, cfg, probe_batch, probe_targets)
        if descended:
            continue
        for term in _edge_gen_terms(net, ap, current):
            fltr = None if source_filter is None else (lambda nid: source_filter(nid, current))
            source = select_edge_source(net, trace, current, term, cfg, rng, fltr)
            if source is not None:
                return generate_edge(net, current, term, source, cfg, probe_batch)
        return None


def priority_ordering_step(
    net: Network,
    trace: BatchTrace,
    ap: APReport,
    cfg: GrowthConfig,
    rng: np.random.Generator,
    target_ids: list[int] | None = None,
    source_filter: Optional[Callable[[int, int], bool]] = None,
    probe_batch: np.ndarray | None = None,
    probe_targets: np.ndarray | None = None,
) -> list[GenerativeEvent]:
    """One generative process at most per target whose pathway is exhausted.

    Targets are visited in order of decreasing total AP; pathway
    exhaustion is re-checked before each walk since earlier GPs mutate
    the graph (components created this step count as exhausted).
    """
    if target_ids is None:
        target_ids = list(net.outputs)
    eligible = [t for t in target_ids if _pathway_exhausted(net, ap, t)]
    eligible.sort(key=lambda t: (-ap.node_total_sum(net, t), t))
    events: list[GenerativeEvent] = []
    for target in eligible:
        if not _pathway_exhausted(net, ap, target):
            continue
        event = _gp_for(
            net, trace, ap, cfg, rng, target, source_filter, probe_batch, probe_targets
        )
        if event is not None:
            events.append(event)
    return events


def _tick_refraction(net: Network) -> None:
    for node in net.nodes.values():
        if node.refraction_remaining > 0:
            node.refraction_remaining -= 1
    for edge in net.edges.values():
        if edge.refraction_remaining > 0:
            edge.refraction_remaining -= 1


def adaptation_step(
    net: Network,
    batch: np.ndarray,
    targets: np.ndarray,
    cfg: GrowthConfig,
    rng: np.random.Generator,
    target_ids: list[int] | None = None,
    source_filter: Optional[Callable[[int, int], bool]] = None,
) -> StepReport:
    """Full DIRAD step: evaluate, update parameters, then grow/clean up."""
    acts = forward_pass(net, batch)
    trace = backward_pass(net, acts, targets, cfg.mismatch_floor)
    perturb_zero_weight_gradients(trace, cfg, rng)
    grads = aggregate(trace)
    ap = compute_ap(trace, cfg)
    apply_updates(net, grads, cfg.gamma)
    events = priority_ordering_step(
        net, trace, ap, cfg, rng,
        target_ids=target_ids,
        source_filter=source_filter,
        probe_batch=batch if cfg.audit_gp else None,
        probe_targets=targets if cfg.audit_gp else None,
    )
    events.extend(destructive_step(net, cfg, rng))
    decay_K(net, cfg)
    _tick_refraction(net)
    net.step += 1
    return StepReport(
        cost=float(np.mean(trace.cost)),
        events=events,
        n_nodes=len(net.nodes),
        n_edges=len(net.edges),
        n_hidden=net.hidden_count(),
    )
