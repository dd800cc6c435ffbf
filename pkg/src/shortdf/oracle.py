"""Exact shortest paths on explicit step graphs.

Nodes are timesteps; an edge ``(k, t)`` with ``k < t`` lets step ``t`` route
through ``k``. ``dist0[t]`` is the cost of jumping straight from ``t`` to the
clean sample. Because every edge points to a smaller timestep the graph is
a DAG, so negative weights are harmless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class NonConvergence(RuntimeError):
    pass


@dataclass
class StepGraph:
    dist0: dict = field(default_factory=dict)
    edges: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dist0 = {int(n): float(v) for n, v in self.dist0.items()}
        self.dist0.setdefault(0, 0.0)
        self.edges = {(int(k), int(t)): float(w) for (k, t), w in self.edges.items()}
        self.validate()

    @property
    def nodes(self) -> list[int]:
        return sorted(self.dist0)

    def validate(self) -> None:
        for (k, t), w in self.edges.items():
            if k >= t:
                raise ValueError(f"edge ({k}, {t}) must satisfy k < t")
            if k not in self.dist0 or t not in self.dist0:
                raise ValueError(f"edge ({k}, {t}) references unknown node")
            if not math.isfinite(w):
                raise ValueError(f"edge ({k}, {t}) has non-finite weight")
        for n, v in self.dist0.items():
            if n < 0 or not math.isfinite(v):
                raise ValueError(f"bad node {n} with dist0 {v}")

    def add_edge(self, k: int, t: int, w: float) -> None:
        self.edges[(int(k), int(t))] = float(w)
        self.validate()


def exact_shortest(graph: StepGraph) -> dict[int, float]:
    """Dynamic program over nodes in increasing timestep order."""
    incoming: dict[int, list] = {n: [] for n in graph.nodes}
    for (k, t), w in graph.edges.items():
        incoming[t].append((k, w))
    best: dict[int, float] = {}
    for n in graph.nodes:
        best[n] = min([graph.dist0[n]] + [best[k] + w for k, w in incoming[n]])
    return best


@dataclass
class RelaxationResult:
    dist: dict
    pred: dict
    sweeps: int
    updates: list

    def path(self, node: int) -> list[int]:
        """Route realized by the relaxations, ending at 0."""
        out = [node]
        while out[-1] in self.pred:
            out.append(self.pred[out[-1]])
        if out[-1] != 0:
            out.append(0)
        return out


def relaxation_fixpoint(graph: StepGraph, sweep_order: str = "topological", max_sweeps: int = 1000,
                        seed: int = 0) -> RelaxationResult:
    """Apply ``dist[t] <- dist[k] + w`` whenever ``dist[t] > dist[k] + w`` until nothing fires.

    ``sweeps`` counts sweeps in which at least one update fired. Each entry
    of ``updates`` is ``(k, t, old, new)``.
    """
    d = dict(graph.dist0)
    pred: dict[int, int] = {}
    edges = list(graph.edges.items())
    if sweep_order == "topological":
        edges.sort(key=lambda e: (e[0][1], e[0][0]))
    elif sweep_order != "random":
        raise ValueError(f"unknown sweep order {sweep_order!r}")
    rng = np.random.Generator(np.random.PCG64(seed))
    updates = []
    for sweep in range(max_sweeps):
        order = [edges[i] for i in rng.permutation(len(edges))] if sweep_order == "random" else edges
        fired = False
        for (k, t), w in order:
            cand = d[k] + w
            if d[t] > cand:
                updates.append((k, t, d[t], cand))
                d[t] = cand
                pred[t] = k
                fired = True
        if not fired:
            return RelaxationResult(d, pred, sweep, updates)
    raise NonConvergence(f"no fixpoint after {max_sweeps} sweeps")


def random_dag(rng: np.random.Generator, max_nodes: int = 50, edge_prob: float = 0.3) -> StepGraph:
    n = int(rng.integers(2, max_nodes + 1))
    steps = np.sort(rng.choice(np.arange(1, 10 * max_nodes), size=n - 1, replace=False))
    nodes = [0] + [int(v) for v in steps]
    dist0 = {v: float(rng.uniform(0.0, 2.0)) for v in nodes[1:]}
    dist0[0] = 0.0
    edges = {}
    for i, t in enumerate(nodes):
        for k in nodes[:i]:
            if k > 0 and rng.random() < edge_prob:
                edges[(k, t)] = float(rng.uniform(-1.0, 1.0))
    return StepGraph(dist0, edges)


def self_test(n_graphs: int = 1000, seed: int = 0, tol: float = 1e-12) -> tuple[int, int]:
    """Compare relaxation (random sweep order) with the exact DP on random DAGs.

    Returns ``(matched, total)``.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    matched = 0
    for i in range(n_graphs):
        g = random_dag(rng)
        exact = exact_shortest(g)
        relaxed = relaxation_fixpoint(g, "random", max_sweeps=10_000, seed=seed + i).dist
        if all(abs(exact[n] - relaxed[n]) <= tol for n in g.nodes):
            matched += 1
    return matched, n_graphs


def path_compression_chain(dist0: dict, edge_2_10: float, edge_10_100: float) -> RelaxationResult:
    """The 10 -> 2 -> 0 then 100 -> 10 -> 2 -> 0 worked chain, relaxed in that order."""
    g = StepGraph(dist0, {(2, 10): edge_2_10, (10, 100): edge_10_100})
    return relaxation_fixpoint(g, "topological")


def load_graph(path) -> StepGraph:
    """Parse ``node <t> <dist0>`` / ``edge <k> <t> <weight>`` lines (``#`` comments)."""
    dist0, edges = {}, {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        try:
            if parts[0] == "node" and len(parts) == 3:
                dist0[int(parts[1])] = float(parts[2])
            elif parts[0] == "edge" and len(parts) == 4:
                edges[(int(parts[1]), int(parts[2]))] = float(parts[3])
            else:
                raise ValueError("expected 'node <t> <dist0>' or 'edge <k> <t> <w>'")
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return StepGraph(dist0, edges)


def dump_graph(graph: StepGraph) -> str:
    lines = [f"node {n} {graph.dist0[n]!r}" for n in graph.nodes]
    lines += [f"edge {k} {t} {w!r}" for (k, t), w in sorted(graph.edges.items())]
    return "\n".join(lines) + "\n"
