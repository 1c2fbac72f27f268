"""Undirected graphs over choice alternatives, and the nest structures they induce.

Nodes are choice alternatives; an edge marks a pair of alternatives whose
unobserved utilities are allowed to correlate (for residential location
choice: spatial adjacency).  Self-loops are never stored on the graph;
each model's update rule decides whether a node aggregates over itself.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DataError, GraphError


@dataclass(frozen=True)
class AlternativeGraph:
    """Immutable undirected graph over ``num_nodes`` choice alternatives.

    ``edges`` holds each undirected edge once as a sorted pair.  Optional
    ``edge_features`` attach a real vector to an edge; no shipped model
    consumes them, but they are validated and carried along.
    """

    num_nodes: int
    edges: tuple[tuple[int, int], ...]
    edge_features: dict[tuple[int, int], tuple[float, ...]] | None = None

    def __post_init__(self):
        if self.num_nodes <= 0:
            raise GraphError(f"num_nodes must be positive, got {self.num_nodes}")
        seen = set()
        for i, j in self.edges:
            if i == j:
                raise GraphError(f"self-loop ({i},{j}) is not allowed")
            if not (0 <= i < self.num_nodes and 0 <= j < self.num_nodes):
                raise GraphError(
                    f"edge ({i},{j}) out of range for {self.num_nodes} nodes"
                )
            if i > j:
                raise GraphError(f"edge ({i},{j}) not normalized; use build_graph")
            if (i, j) in seen:
                raise GraphError(f"duplicate edge ({i},{j}); use build_graph")
            seen.add((i, j))
        if self.edge_features is not None:
            for key in self.edge_features:
                if key not in seen:
                    raise GraphError(f"edge feature for unknown edge {key}")

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def adjacency(self) -> np.ndarray:
        """Symmetric boolean adjacency matrix."""
        adj = np.zeros((self.num_nodes, self.num_nodes), dtype=bool)
        for i, j in self.edges:
            adj[i, j] = True
            adj[j, i] = True
        return adj

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        """Sorted neighbor lists, one tuple per node."""
        out: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for i, j in self.edges:
            out[i].append(j)
            out[j].append(i)
        return tuple(tuple(sorted(ns)) for ns in out)

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.array([len(ns) for ns in self.neighbors], dtype=np.int64)

    @cached_property
    def arrows(self) -> tuple[np.ndarray, np.ndarray]:
        """Directed edge arrays (src, dst): both orientations of every edge.

        The fixed ordering makes scatter aggregation order deterministic.
        """
        src, dst = [], []
        for i, j in self.edges:
            src.extend((i, j))
            dst.extend((j, i))
        return np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64)

    @cached_property
    def arrows_with_self(self) -> tuple[np.ndarray, np.ndarray]:
        """Directed edges plus one self-arrow per node, for self-inclusive rules."""
        src, dst = self.arrows
        loop = np.arange(self.num_nodes, dtype=np.int64)
        return np.concatenate([src, loop]), np.concatenate([dst, loop])

    def degree(self, i: int) -> int:
        self._check_node(i)
        return int(self.degrees[i])

    def _check_node(self, i: int) -> None:
        if not (0 <= i < self.num_nodes):
            raise GraphError(f"node {i} out of range for {self.num_nodes} nodes")


@dataclass(frozen=True)
class NestStructure:
    """Disjoint nests covering all alternatives, with one independence
    parameter per nest in (0, 1]."""

    nests: tuple[tuple[int, ...], ...]
    mus: tuple[float, ...]

    def __post_init__(self):
        if len(self.nests) < 1:
            raise GraphError("at least one nest is required")
        if len(self.mus) != len(self.nests):
            raise GraphError("one mu per nest is required")
        members: list[int] = []
        for nest in self.nests:
            if len(nest) == 0:
                raise GraphError("empty nest")
            members.extend(nest)
        if len(members) != len(set(members)):
            raise GraphError("nests overlap")
        if sorted(members) != list(range(len(members))):
            raise GraphError("nests must partition 0..num_nodes-1")
        for mu in self.mus:
            if not (0.0 < mu <= 1.0):
                raise GraphError(f"mu={mu} outside (0, 1]")

    @property
    def num_nodes(self) -> int:
        return sum(len(n) for n in self.nests)

    @cached_property
    def nest_of_node(self) -> np.ndarray:
        """Index of the nest containing each node."""
        out = np.empty(self.num_nodes, dtype=np.int64)
        for k, nest in enumerate(self.nests):
            for i in nest:
                out[i] = k
        return out


@dataclass(frozen=True)
class NeighborhoodIndex:
    """All nodes reachable within ``hops`` edges of each node (node excluded)."""

    hops: int
    sets: tuple[frozenset[int], ...]

    def __getitem__(self, j: int) -> frozenset[int]:
        return self.sets[j]


def build_graph(num_nodes, edges, edge_features=None) -> AlternativeGraph:
    """Construct a validated graph, collapsing duplicate and reversed pairs.

    Raises GraphError on out-of-range indices or self-loop pairs.
    """
    normalized = set()
    for pair in edges:
        i, j = int(pair[0]), int(pair[1])
        if i == j:
            raise GraphError(f"self-loop ({i},{j}) is not allowed")
        if not (0 <= i < num_nodes and 0 <= j < num_nodes):
            raise GraphError(f"edge ({i},{j}) out of range for {num_nodes} nodes")
        normalized.add((min(i, j), max(i, j)))
    feats = None
    if edge_features is not None:
        feats = {}
        for key, vec in edge_features.items():
            i, j = int(key[0]), int(key[1])
            feats[(min(i, j), max(i, j))] = tuple(float(v) for v in vec)
    return AlternativeGraph(int(num_nodes), tuple(sorted(normalized)), feats)


def load_edge_csv(path, num_nodes=None) -> AlternativeGraph:
    """Read an edge-list CSV with header ``src,dst`` (0-indexed integers).

    Duplicate and reversed rows are tolerated and collapsed.  When
    ``num_nodes`` is omitted it is inferred as max index + 1.
    """
    pairs = []
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header[:2]] != ["src", "dst"]:
                raise DataError(f"{path}: expected header 'src,dst'")
            for lineno, row in enumerate(reader, start=2):
                if not row or (len(row) == 1 and not row[0].strip()):
                    continue
                if len(row) < 2:
                    raise DataError(f"{path}:{lineno}: expected two columns")
                try:
                    pairs.append((int(row[0]), int(row[1])))
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: non-integer node index") from exc
    except OSError as exc:
        raise DataError(f"cannot read edge list {path}: {exc}") from exc
    if num_nodes is None:
        if not pairs:
            raise DataError(f"{path}: empty edge list and no num_nodes given")
        num_nodes = max(max(i, j) for i, j in pairs) + 1
    try:
        return build_graph(num_nodes, pairs)
    except GraphError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_edge_csv(graph: AlternativeGraph, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["src", "dst"])
        for i, j in graph.edges:
            writer.writerow([i, j])


def khop_neighbors(graph: AlternativeGraph, j: int, k: int) -> frozenset[int]:
    """Nodes at graph distance 1..k from node j (j itself excluded)."""
    graph._check_node(j)
    if k < 0:
        raise GraphError(f"hop count must be >= 0, got {k}")
    if k == 0:
        return frozenset()
    dist = bfs_distances(graph, j)
    reach = np.flatnonzero((dist >= 1) & (dist <= k))
    return frozenset(int(i) for i in reach)


def bfs_distances(graph: AlternativeGraph, j: int) -> np.ndarray:
    """BFS hop distance from j to every node; -1 marks unreachable nodes."""
    graph._check_node(j)
    dist = np.full(graph.num_nodes, -1, dtype=np.int64)
    dist[j] = 0
    queue = deque([j])
    while queue:
        u = queue.popleft()
        for v in graph.neighbors[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def neighborhood_index(graph: AlternativeGraph, k: int) -> NeighborhoodIndex:
    if k < 0:
        raise GraphError(f"hop count must be >= 0, got {k}")
    sets = tuple(khop_neighbors(graph, j, k) for j in range(graph.num_nodes))
    return NeighborhoodIndex(hops=k, sets=sets)


def connected_components(graph: AlternativeGraph) -> list[frozenset[int]]:
    remaining = set(range(graph.num_nodes))
    comps = []
    while remaining:
        start = min(remaining)
        dist = bfs_distances(graph, start)
        comp = frozenset(int(i) for i in np.flatnonzero(dist >= 0))
        comps.append(comp)
        remaining -= comp
    return comps


def diameter(graph: AlternativeGraph) -> int:
    """Longest shortest path over all connected pairs (0 for edgeless graphs)."""
    best = 0
    for j in range(graph.num_nodes):
        dist = bfs_distances(graph, j)
        best = max(best, int(dist.max()))
    return best


def nests_to_graph(nests) -> AlternativeGraph:
    """Graph whose edges are exactly the within-nest pairs.

    Each nest becomes a complete subgraph; there are no edges between
    nests.  Self-loops are implicit in the nested-logit update rule, not
    stored here.
    """
    if isinstance(nests, NestStructure):
        nest_sets = nests.nests
        num_nodes = nests.num_nodes
    else:
        nest_sets = tuple(tuple(int(i) for i in nest) for nest in nests)
        members = [i for nest in nest_sets for i in nest]
        if len(members) != len(set(members)):
            raise GraphError("nests overlap")
        if sorted(members) != list(range(len(members))):
            raise GraphError("nests must partition 0..num_nodes-1")
        num_nodes = len(members)
    edges = []
    for nest in nest_sets:
        ordered = sorted(nest)
        for a in range(len(ordered)):
            for b in range(a + 1, len(ordered)):
                edges.append((ordered[a], ordered[b]))
    return build_graph(num_nodes, edges)


def scl_pair_nests(graph: AlternativeGraph) -> tuple[tuple[int, int], ...]:
    """One two-alternative nest per undirected edge.

    An isolated node would belong to no nest, leaving its choice
    probability undefined, so it is rejected by name.
    """
    if graph.num_edges == 0:
        raise GraphError("graph has no edges; no pair nests exist")
    isolated = np.flatnonzero(graph.degrees == 0)
    if isolated.size:
        raise GraphError(
            f"alternative {int(isolated[0])} is isolated and belongs to no nest"
        )
    return graph.edges


def equal_allocation(graph: AlternativeGraph) -> dict[int, dict[int, float]]:
    """Equal-split allocation of each alternative across its pair nests.

    Returns, per node i, a map neighbor -> 1/deg(i).  Rows sum to one.
    """
    isolated = np.flatnonzero(graph.degrees == 0)
    if isolated.size:
        raise GraphError(
            f"alternative {int(isolated[0])} is isolated; allocation undefined"
        )
    return {
        i: {j: 1.0 / len(graph.neighbors[i]) for j in graph.neighbors[i]}
        for i in range(graph.num_nodes)
    }


def equal_allocation_vector(graph: AlternativeGraph) -> np.ndarray:
    """Per-node allocation value 1/deg(i); the equal split is neighbor-independent."""
    isolated = np.flatnonzero(graph.degrees == 0)
    if isolated.size:
        raise GraphError(
            f"alternative {int(isolated[0])} is isolated; allocation undefined"
        )
    return 1.0 / graph.degrees.astype(np.float64)


# ---------------------------------------------------------------------------
# Generators used by synthetic experiments and tests.


def path_graph(n: int) -> AlternativeGraph:
    return build_graph(n, [(i, i + 1) for i in range(n - 1)])


def complete_graph(n: int) -> AlternativeGraph:
    return build_graph(n, [(i, j) for i in range(n) for j in range(i + 1, n)])


def random_connected_graph(n: int, extra_edges: int, seed) -> AlternativeGraph:
    """Random spanning tree plus ``extra_edges`` additional distinct edges."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    edges = set()
    for idx in range(1, n):
        attach = order[rng.integers(0, idx)]
        a, b = int(order[idx]), int(attach)
        edges.add((min(a, b), max(a, b)))
    all_pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    rng.shuffle(all_pairs)
    for pair in all_pairs:
        if extra_edges <= 0:
            break
        if pair not in edges:
            edges.add(pair)
            extra_edges -= 1
    return build_graph(n, sorted(edges))


def random_geometric_graph(n: int, radius: float, seed) -> tuple[AlternativeGraph, np.ndarray]:
    """Planar-like graph: points in the unit square joined when closer than
    ``radius``; components are then stitched by their closest point pairs.

    Returns the graph and the n-by-2 point coordinates.
    """
    rng = np.random.default_rng(seed)
    pts = rng.random((n, 2))
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    edges = {(i, j) for i in range(n) for j in range(i + 1, n) if d2[i, j] < radius**2}
    graph = build_graph(n, sorted(edges))
    comps = connected_components(graph)
    while len(comps) > 1:
        base = sorted(comps[0])
        best = None
        for comp in comps[1:]:
            for i in base:
                for j in sorted(comp):
                    key = (d2[i, j], i, j)
                    if best is None or key < best:
                        best = key
        edges.add((min(best[1], best[2]), max(best[1], best[2])))
        graph = build_graph(n, sorted(edges))
        comps = connected_components(graph)
    return graph, pts
