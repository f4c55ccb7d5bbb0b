"""Topology and token-dynamics metrics over trajectory logs.

Covers transition entropy over sliding windows, per-trajectory graph metrics
(agent count, node efficiency, self-loops, simple cycles, diameter), learning
phase segmentation with min-max normalization, and one-pass tricube LOWESS
for token trend curves. All functions are pure; logs are treated as immutable.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import networkx as nx
import numpy as np


@dataclass(frozen=True)
class TrajectoryGraph:
    """Role-interaction multigraph of one trajectory.

    Nodes are the roles that executed; each consecutive pair in the executed
    order contributes one directed edge (a self-loop when a role follows
    itself).
    """

    nodes: frozenset[str]
    edges: tuple[tuple[str, str, int], ...]  # (from, to, multiplicity)

    @classmethod
    def from_roles(cls, roles: Sequence[str]) -> "TrajectoryGraph":
        counts = Counter(zip(roles, roles[1:]))
        return cls(
            nodes=frozenset(roles),
            edges=tuple(sorted((a, b, m) for (a, b), m in counts.items())),
        )

    def transition_counts(self) -> Counter:
        return Counter({(a, b): m for a, b, m in self.edges})


def transition_entropy(
    graphs: Iterable[TrajectoryGraph], *, conditional: bool = False
) -> float | None:
    """Shannon entropy (nats) of the empirical agent-to-agent transition
    distribution pooled over the window.

    The default is the entropy of the joint distribution over ordered role
    pairs; ``conditional=True`` computes H(next | current) instead. Returns
    None when the window contains no transitions.
    """
    counts: Counter = Counter()
    for graph in graphs:
        counts.update(graph.transition_counts())
    total = sum(counts.values())
    if total == 0:
        return None
    if not conditional:
        value = -sum((m / total) * math.log(m / total) for m in counts.values())
        return max(0.0, value)  # avoids -0.0 for deterministic distributions
    source_totals: Counter = Counter()
    for (a, _), m in counts.items():
        source_totals[a] += m
    entropy = 0.0
    for (a, _), m in counts.items():
        joint = m / total
        given = m / source_totals[a]
        entropy -= joint * math.log(given)
    return max(0.0, entropy)


def entropy_series(
    graphs: Sequence[TrajectoryGraph],
    width: int = 50,
    stride: int = 10,
    *,
    conditional: bool = False,
) -> list[tuple[int, int, float | None]]:
    """Sliding-window entropy over a learning run: (start, end, H) per window.

    A run shorter than one window produces a single window over everything.
    """
    n = len(graphs)
    if n == 0:
        return []
    if n < width:
        return [(0, n, transition_entropy(graphs, conditional=conditional))]
    series = []
    start = 0
    while start + width <= n:
        window = graphs[start : start + width]
        series.append((start, start + width, transition_entropy(window, conditional=conditional)))
        start += stride
    return series


def graph_metrics(graph: TrajectoryGraph, f1: float = 0.0) -> dict[str, float]:
    """Structural metrics of one trajectory graph.

    Cycle count covers simple directed cycles of length >= 2 on the
    deduplicated edge set (self-loops are reported separately); the diameter
    is the longest shortest path over reachable ordered pairs, 0 for a
    single-node graph.
    """
    agent_count = len(graph.nodes)
    self_loops = sum(m for a, b, m in graph.edges if a == b)
    digraph = nx.DiGraph()
    digraph.add_nodes_from(graph.nodes)
    digraph.add_edges_from((a, b) for a, b, _ in graph.edges)
    cycle_count = sum(1 for cycle in nx.simple_cycles(digraph) if len(cycle) >= 2)
    diameter = 0
    for source, lengths in nx.all_pairs_shortest_path_length(digraph):
        for target, distance in lengths.items():
            if target != source:
                diameter = max(diameter, distance)
    return {
        "agent_count": float(agent_count),
        "node_efficiency": f1 / agent_count if agent_count else 0.0,
        "self_loops": float(self_loops),
        "cycle_count": float(cycle_count),
        "diameter": float(diameter),
    }


def lowess(
    points: Sequence[tuple[float, float]], frac: float = 0.3
) -> list[tuple[float, float]]:
    """One-pass tricube-weighted local linear regression, aligned to input x.

    For each point, the neighborhood is the ceil(frac*n) nearest points by
    |x - xi|; weights are tricube in scaled distance. A degenerate
    neighborhood (all identical x) falls back to the local mean. No
    robustness iterations are applied.
    """
    n = len(points)
    if n < 3:
        raise ValueError("lowess requires at least 3 points")
    if not 0.0 < frac <= 1.0:
        raise ValueError("frac must be in (0, 1]")
    xs = np.asarray([p[0] for p in points], dtype=float)
    ys = np.asarray([p[1] for p in points], dtype=float)
    k = max(2, math.ceil(frac * n))
    smoothed: list[tuple[float, float]] = []
    for i in range(n):
        distances = np.abs(xs - xs[i])
        h = np.partition(distances, k - 1)[k - 1]
        if h == 0.0:
            local = ys[distances == 0.0]
            smoothed.append((float(xs[i]), float(local.mean())))
            continue
        scaled = np.clip(distances / h, 0.0, 1.0)
        weights = (1.0 - scaled**3) ** 3
        # Centered local coordinates keep the normal equations well-conditioned;
        # the prediction at the center is just the intercept.
        dx = xs - xs[i]
        sw = weights.sum()
        swx = (weights * dx).sum()
        swy = (weights * ys).sum()
        swxx = (weights * dx * dx).sum()
        swxy = (weights * dx * ys).sum()
        denom = sw * swxx - swx * swx
        if swxx <= 0.0 or denom <= 1e-12 * sw * swxx:
            smoothed.append((float(xs[i]), float(swy / sw)))
            continue
        beta = (sw * swxy - swx * swy) / denom
        alpha = (swy - beta * swx) / sw
        smoothed.append((float(xs[i]), float(alpha)))
    return smoothed


class Phase(str, Enum):
    INITIAL = "initial"
    EXPLORATION = "exploration"
    REFINEMENT = "refinement"
    OPTIMIZATION = "optimization"


@dataclass(frozen=True)
class PhaseReport:
    phase: Phase
    metric_means: dict[str, float]
    count: int
    group: str | None = None


def phase_sizes(n: int) -> list[int]:
    """Split n iterations into four contiguous near-equal segments.

    The remainder goes to the later phases: 10 -> [2, 2, 3, 3].
    """
    base, rem = divmod(n, 4)
    return [base + (1 if i >= 4 - rem else 0) for i in range(4)]


def _normalize_column(values: list[float]) -> list[float]:
    low, high = min(values), max(values)
    if high == low:
        return [0.0] * len(values)  # min = max convention
    return [(v - low) / (high - low) for v in values]


def phase_report(
    log: Sequence[dict],
    metric_names: Sequence[str],
    *,
    group_by: str | None = None,
) -> list[PhaseReport]:
    """Per-phase means of min-max normalized metrics over an iteration log.

    Normalization runs over the full log before any per-phase or per-group
    averaging. When ``group_by`` names a field, an extra report per
    (phase, group value) follows the four overall reports.
    """
    if not log:
        raise ValueError("phase_report requires a nonempty log")
    normalized: dict[str, list[float]] = {
        name: _normalize_column([float(entry[name]) for entry in log]) for name in metric_names
    }
    sizes = phase_sizes(len(log))
    boundaries = []
    start = 0
    for size in sizes:
        boundaries.append((start, start + size))
        start += size

    def report_for(indices: list[int], phase: Phase, group: str | None) -> PhaseReport:
        means = {
            name: (sum(normalized[name][i] for i in indices) / len(indices)) if indices else 0.0
            for name in metric_names
        }
        return PhaseReport(phase=phase, metric_means=means, count=len(indices), group=group)

    reports = []
    for phase, (lo, hi) in zip(Phase, boundaries):
        reports.append(report_for(list(range(lo, hi)), phase, None))
    if group_by is not None:
        groups = sorted({str(entry.get(group_by, "")) for entry in log})
        for group in groups:
            for phase, (lo, hi) in zip(Phase, boundaries):
                indices = [
                    i for i in range(lo, hi) if str(log[i].get(group_by, "")) == group
                ]
                reports.append(report_for(indices, phase, group))
    return reports
