"""Flow-graph construction, outflow connectivity, traps, and layer decomposition.

The graph of a compartmental matrix has an edge i -> j whenever entry (j, i)
is positive (mass can flow from compartment i to j) and marks i as an outflow
vertex when column i sums strictly negative (net leak to the environment).
A trap is a set of non-outflow vertices with no edge leaving the set; mass in
a trap can never decrease, which is what rules out asymptotic stability.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import FrozenSet

import numpy as np

from .matrix_core import CompartmentalMatrix

STRICT_TOL = 1e-12


@dataclass(frozen=True)
class FlowGraph:
    n: int
    edges: FrozenSet[tuple]     # (i, j) means i -> j, 0-based
    outflow: FrozenSet[int]

    def successors(self, i: int) -> list:
        return [j for (a, j) in self.edges if a == i]


@dataclass(frozen=True)
class TrapReport:
    is_outflow_connected: bool
    trap: FrozenSet[int] | None  # maximal trap when not connected

    def to_json(self) -> dict:
        return {"outflow_connected": self.is_outflow_connected,
                "trap": sorted(i + 1 for i in self.trap) if self.trap is not None else None}


@dataclass(frozen=True)
class LayerDecomposition:
    """Reverse-BFS layers toward the outflow set; layer 0 is the outflow set."""

    layers: tuple  # of sorted tuples of vertices, 0-based

    @property
    def depth(self) -> int:
        return len(self.layers)


class NotOutflowConnected(ValueError):
    def __init__(self, report: TrapReport):
        trap = sorted(i + 1 for i in report.trap)
        super().__init__(f"matrix is not outflow connected; maximal trap {trap}")
        self.report = report


def build_graph(F: CompartmentalMatrix, strict_tol: float = STRICT_TOL) -> FlowGraph:
    """Entries below `strict_tol` count as zero; graph structure is discontinuous."""
    entries = F.entries
    n = F.n
    edges = set()
    js, is_ = np.nonzero(entries > strict_tol)
    for j, i in zip(js, is_):
        if i != j:
            edges.add((int(i), int(j)))
    outflow = frozenset(int(i) for i in np.nonzero(F.colsums < -strict_tol)[0])
    return FlowGraph(n, frozenset(edges), outflow)


def _reaches_outflow(g: FlowGraph) -> np.ndarray:
    """Boolean mask of vertices with a (possibly empty) path to an outflow vertex."""
    preds: list[list[int]] = [[] for _ in range(g.n)]
    for i, j in g.edges:
        preds[j].append(i)
    reach = np.zeros(g.n, dtype=bool)
    stack = list(g.outflow)
    reach[list(g.outflow)] = True
    while stack:
        v = stack.pop()
        for u in preds[v]:
            if not reach[u]:
                reach[u] = True
                stack.append(u)
    return reach


def check_outflow_connected(g: FlowGraph) -> TrapReport:
    """Connected iff every vertex reaches an outflow vertex; otherwise returns the
    maximal trap (all vertices with no such path), which is closed under edges."""
    reach = _reaches_outflow(g)
    if reach.all():
        return TrapReport(True, None)
    trap = frozenset(int(i) for i in np.nonzero(~reach)[0])
    return TrapReport(False, trap)


def minimal_traps(g: FlowGraph) -> list:
    """Debug helper: the inclusion-minimal traps (sink components without outflow)."""
    comp = _scc(g)
    n_comp = comp.max() + 1
    has_out_edge = np.zeros(n_comp, dtype=bool)
    has_outflow = np.zeros(n_comp, dtype=bool)
    for i, j in g.edges:
        if comp[i] != comp[j]:
            has_out_edge[comp[i]] = True
    for i in g.outflow:
        has_outflow[comp[i]] = True
    traps = []
    for c in range(n_comp):
        if not has_out_edge[c] and not has_outflow[c]:
            traps.append(frozenset(int(i) for i in np.nonzero(comp == c)[0]))
    return sorted(traps, key=lambda s: (len(s), sorted(s)))


def _scc(g: FlowGraph) -> np.ndarray:
    """Kosaraju strongly-connected components; returns component id per vertex."""
    succ: list[list[int]] = [[] for _ in range(g.n)]
    pred: list[list[int]] = [[] for _ in range(g.n)]
    for i, j in g.edges:
        succ[i].append(j)
        pred[j].append(i)
    order = []
    seen = np.zeros(g.n, dtype=bool)
    for s in range(g.n):
        if seen[s]:
            continue
        stack = [(s, iter(succ[s]))]
        seen[s] = True
        while stack:
            v, it = stack[-1]
            advanced = False
            for w in it:
                if not seen[w]:
                    seen[w] = True
                    stack.append((w, iter(succ[w])))
                    advanced = True
                    break
            if not advanced:
                order.append(v)
                stack.pop()
    comp = -np.ones(g.n, dtype=int)
    c = 0
    for s in reversed(order):
        if comp[s] >= 0:
            continue
        stack = [s]
        comp[s] = c
        while stack:
            v = stack.pop()
            for u in pred[v]:
                if comp[u] < 0:
                    comp[u] = c
                    stack.append(u)
        c += 1
    return comp


def layer_decomposition(g: FlowGraph) -> LayerDecomposition:
    """Peel vertices by reverse BFS distance to the outflow set.

    Layer 0 is the outflow set; layer m holds the vertices outside earlier
    layers with an edge into layer m-1. Requires outflow connectivity.
    """
    report = check_outflow_connected(g)
    if not report.is_outflow_connected:
        raise NotOutflowConnected(report)
    assigned = np.zeros(g.n, dtype=bool)
    current = sorted(g.outflow)
    assigned[current] = True
    preds: list[list[int]] = [[] for _ in range(g.n)]
    for i, j in g.edges:
        preds[j].append(i)
    layers = [tuple(current)]
    while not assigned.all():
        nxt = sorted({u for v in current for u in preds[v] if not assigned[u]})
        # outflow connectivity guarantees progress
        assigned[nxt] = True
        layers.append(tuple(nxt))
        current = nxt
    return LayerDecomposition(tuple(layers))


def trap_mass_flux(F: CompartmentalMatrix, K, x) -> float:
    """Net mass rate into trap K at state x >= 0; nonnegative by trap closure."""
    K = sorted(int(i) for i in K)
    x = np.asarray(x, dtype=float)
    if x.shape != (F.n,):
        raise ValueError(f"state must have shape ({F.n},)")
    if np.any(x < 0):
        raise ValueError("state must be nonnegative")
    g = build_graph(F)
    trap_set = frozenset(K)
    if not trap_set or not trap_set.issubset(range(F.n)):
        raise ValueError("K must be a nonempty subset of vertices")
    if trap_set & g.outflow:
        raise ValueError(f"K contains outflow vertices {sorted(i + 1 for i in trap_set & g.outflow)}")
    leaks = [(i, j) for (i, j) in g.edges if i in trap_set and j not in trap_set]
    if leaks:
        raise ValueError(f"K is not a trap: edge {leaks[0][0] + 1} -> {leaks[0][1] + 1} leaves it")
    return float((F.entries @ x)[K].sum())


def to_dot(g: FlowGraph) -> str:
    """Graphviz text; outflow vertices are double-circled, labels 1-based."""
    lines = ["digraph flow {"]
    for i in range(g.n):
        shape = "doublecircle" if i in g.outflow else "circle"
        lines.append(f'  v{i + 1} [label="{i + 1}", shape={shape}];')
    for i, j in sorted(g.edges):
        lines.append(f"  v{i + 1} -> v{j + 1};")
    lines.append("}")
    return "\n".join(lines)
