"""Mutable directed-acyclic network with input, output and modulatory nodes.

The network is a plain graph data structure plus mutation primitives.  All
growth policy (when to add edges/nodes) lives elsewhere; this module only
enforces structural invariants: the graph stays a DAG, edge keys
``(src, dst, term)`` are unique, and node ids are never reused.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

INPUT = 0
OUTPUT = 1
MODULATORY = 2

KIND_NAMES = {INPUT: "input", OUTPUT: "output", MODULATORY: "modulatory"}

SERIAL_FORMAT_VERSION = 1


class NetworkError(ValueError):
    """Raised on invalid structural mutations or malformed evaluations."""


@dataclass
class Node:
    id: int
    kind: int
    bias0: float = 0.0  # frozen at 0 for modulatory nodes
    bias1: float = 0.0  # modulatory term-1 bias
    K: float = 1.0  # term-1 transfer steepness (modulatory only)
    created_at: int = 0
    refraction_remaining: int = 0


@dataclass
class Edge:
    src: int
    dst: int
    term: int  # destination term; always 0 unless dst is modulatory
    weight: float
    created_at: int = 0
    refraction_remaining: int = 0

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.src, self.dst, self.term)


@dataclass
class Network:
    """DAG of nodes and term-addressed weighted edges."""

    nodes: dict[int, Node] = field(default_factory=dict)
    edges: dict[tuple[int, int, int], Edge] = field(default_factory=dict)
    inputs: list[int] = field(default_factory=list)
    outputs: list[int] = field(default_factory=list)
    step: int = 0
    _next_id: int = 0
    _topo: list[int] | None = field(default=None, repr=False)
    _out_adj: dict[int, set[tuple[int, int, int]]] = field(default_factory=dict, repr=False)
    _in_adj: dict[int, list[tuple[int, int, int]]] = field(default_factory=dict, repr=False)

    # -- construction -------------------------------------------------------

    @classmethod
    def fresh(cls, n_inputs: int, n_outputs: int) -> "Network":
        """Network with only input and output nodes and no edges."""
        net = cls()
        for _ in range(n_inputs):
            net.insert_node(INPUT)
        for _ in range(n_outputs):
            net.insert_node(OUTPUT)
        return net

    # -- queries ------------------------------------------------------------

    def node(self, nid: int) -> Node:
        try:
            return self.nodes[nid]
        except KeyError:
            raise NetworkError(f"unknown node id {nid}") from None

    def in_edges(self, nid: int, term: int | None = None) -> list[Edge]:
        keys = self._in_adj.get(nid, [])
        if term is None:
            return [self.edges[k] for k in keys]
        return [self.edges[k] for k in keys if k[2] == term]

    def out_edges(self, nid: int) -> list[Edge]:
        return [self.edges[k] for k in sorted(self._out_adj.get(nid, ()))]

    def hidden_count(self) -> int:
        return sum(1 for n in self.nodes.values() if n.kind == MODULATORY)

    def would_create_cycle(self, src: int, dst: int) -> bool:
        """True iff dst already reaches src (adding src->dst would close a cycle)."""
        self.node(src)
        self.node(dst)
        if src == dst:
            return True
        seen = {dst}
        stack = [dst]
        while stack:
            cur = stack.pop()
            for key in self._out_adj.get(cur, ()):
                nxt = key[1]
                if nxt == src:
                    return True
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return False

    def descendants_or_self(self, nid: int) -> set[int]:
        self.node(nid)
        seen = {nid}
        stack = [nid]
        while stack:
            cur = stack.pop()
            for key in self._out_adj.get(cur, ()):
                if key[1] not in seen:
                    seen.add(key[1])
                    stack.append(key[1])
        return seen

    def ancestors_or_self(self, nid: int) -> set[int]:
        self.node(nid)
        seen = {nid}
        stack = [nid]
        while stack:
            cur = stack.pop()
            for edge in self.in_edges(cur):
                if edge.src not in seen:
                    seen.add(edge.src)
                    stack.append(edge.src)
        return seen

    def topo_order(self) -> list[int]:
        """Topological order over node ids, stable across runs (Kahn, sorted ids)."""
        if self._topo is None:
            indeg = {nid: 0 for nid in self.nodes}
            for key in self.edges:
                indeg[key[1]] += 1
            import heapq

            ready = [nid for nid, d in indeg.items() if d == 0]
            heapq.heapify(ready)
            order: list[int] = []
            while ready:
                nid = heapq.heappop(ready)
                order.append(nid)
                for key in sorted(self._out_adj.get(nid, ())):
                    indeg[key[1]] -= 1
                    if indeg[key[1]] == 0:
                        heapq.heappush(ready, key[1])
            if len(order) != len(self.nodes):
                raise NetworkError("cycle detected while ordering nodes")
            self._topo = order
        return self._topo

    # -- mutation primitives -------------------------------------------------

    def _invalidate(self) -> None:
        self._topo = None

    def insert_node(self, kind: int) -> int:
        if kind not in KIND_NAMES:
            raise NetworkError(f"unknown node kind {kind}")
        nid = self._next_id
        self._next_id += 1
        self.nodes[nid] = Node(id=nid, kind=kind, created_at=self.step)
        self._out_adj[nid] = set()
        self._in_adj[nid] = []
        if kind == INPUT:
            self.inputs.append(nid)
        elif kind == OUTPUT:
            self.outputs.append(nid)
        self._invalidate()
        return nid

    def insert_edge(self, src: int, dst: int, term: int, weight: float) -> Edge:
        src_node = self.node(src)
        dst_node = self.node(dst)
        if dst_node.kind == INPUT:
            raise NetworkError(f"input node {dst} cannot receive edges")
        if term not in (0, 1):
            raise NetworkError(f"invalid term {term}")
        if term == 1 and dst_node.kind != MODULATORY:
            raise NetworkError(f"term 1 only exists on modulatory nodes (dst {dst})")
        key = (src, dst, term)
        if key in self.edges:
            raise NetworkError(f"duplicate edge {key}")
        if self.would_create_cycle(src, dst):
            raise NetworkError(f"edge {src}->{dst} would create a cycle")
        del src_node
        edge = Edge(src=src, dst=dst, term=term, weight=float(weight), created_at=self.step)
        self.edges[key] = edge
        self._out_adj[src].add(key)
        self._in_adj[dst].append(key)
        self._invalidate()
        return edge

    def remove_edge(self, key: tuple[int, int, int]) -> Edge:
        if key not in self.edges:
            raise NetworkError(f"unknown edge {key}")
        edge = self.edges.pop(key)
        self._out_adj[edge.src].discard(key)
        self._in_adj[edge.dst].remove(key)
        self._invalidate()
        return edge

    def remove_node(self, nid: int) -> None:
        node = self.node(nid)
        if self._out_adj.get(nid):
            raise NetworkError(f"node {nid} still has out-edges")
        if node.kind != MODULATORY:
            raise NetworkError(f"only modulatory nodes may be removed (node {nid})")
        for key in list(self._in_adj.get(nid, [])):
            self.remove_edge(key)
        del self.nodes[nid]
        del self._out_adj[nid]
        del self._in_adj[nid]
        self._invalidate()

    # -- export / serialization ---------------------------------------------

    def export_dot(self) -> str:
        """Graphviz text with node kind/bias/K labels and edge weights."""
        lines = ["digraph network {"]
        for nid in sorted(self.nodes):
            n = self.nodes[nid]
            if n.kind == MODULATORY:
                label = f"{nid} mod b1={n.bias1:.3g} K={n.K:.3g}"
                shape = "ellipse"
            elif n.kind == INPUT:
                label = f"{nid} in"
                shape = "box"
            else:
                label = f"{nid} out b={n.bias0:.3g}"
                shape = "doublecircle"
            lines.append(f'  n{nid} [label="{label}", shape={shape}];')
        for key in sorted(self.edges):
            e = self.edges[key]
            style = ", style=dashed" if e.term == 1 else ""
            lines.append(f'  n{e.src} -> n{e.dst} [label="{e.weight:.3g}"{style}];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        doc = {
            "format_version": SERIAL_FORMAT_VERSION,
            "step": self.step,
            "next_id": self._next_id,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "nodes": [
                {
                    "id": n.id,
                    "kind": KIND_NAMES[n.kind],
                    "bias0": n.bias0,
                    "bias1": n.bias1,
                    "K": n.K,
                    "created_at": n.created_at,
                    "refraction_remaining": n.refraction_remaining,
                }
                for n in (self.nodes[i] for i in sorted(self.nodes))
            ],
            "edges": [
                {
                    "src": e.src,
                    "dst": e.dst,
                    "term": e.term,
                    "weight": e.weight,
                    "created_at": e.created_at,
                    "refraction_remaining": e.refraction_remaining,
                }
                for e in (self.edges[k] for k in sorted(self.edges))
            ],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Network":
        doc = json.loads(text)
        if doc.get("format_version") != SERIAL_FORMAT_VERSION:
            raise NetworkError(f"unsupported network format {doc.get('format_version')!r}")
        kinds = {v: k for k, v in KIND_NAMES.items()}
        net = cls()
        net.step = doc["step"]
        net._next_id = doc["next_id"]
        net.inputs = list(doc["inputs"])
        net.outputs = list(doc["outputs"])
        for nd in doc["nodes"]:
            node = Node(
                id=nd["id"],
                kind=kinds[nd["kind"]],
                bias0=nd["bias0"],
                bias1=nd["bias1"],
                K=nd["K"],
                created_at=nd["created_at"],
                refraction_remaining=nd["refraction_remaining"],
            )
            net.nodes[node.id] = node
            net._out_adj[node.id] = set()
            net._in_adj[node.id] = []
        for ed in doc["edges"]:
            key = (ed["src"], ed["dst"], ed["term"])
            edge = Edge(
                src=ed["src"],
                dst=ed["dst"],
                term=ed["term"],
                weight=ed["weight"],
                created_at=ed["created_at"],
                refraction_remaining=ed["refraction_remaining"],
            )
            net.edges[key] = edge
            net._out_adj[edge.src].add(key)
            net._in_adj[edge.dst].append(key)
        net._invalidate()
        return net
