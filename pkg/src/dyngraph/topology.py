"""Dynamic graph construction over the selected nodes of both modalities.

Within a modality, every sub-central node connects to every main-central
node and every leaf connects to exactly one sub-central: the nearest by
Euclidean distance (grid coordinates by default, feature vectors optionally),
ties broken toward the better-ranked sub-central. Across modalities, the
main- and sub-central nodes of the two modalities are paired by attention
rank; leaves never cross modalities.

Edges are undirected and stored once in canonical direction; adjacency
expansion is symmetric. Because node positions come from per-sample
attention maps, each batch element gets its own edge list: the graph is
rebuilt per input, which is what makes it dynamic.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .selection import NodeLevel, NodeSet


class EdgeKind(str, Enum):
    INTRA_RGB = "intra_rgb"
    INTRA_DEPTH = "intra_depth"
    INTER = "inter"


NodeRef = tuple[str, int]  # (modality, rank)


@dataclass(frozen=True)
class Edge:
    src: NodeRef
    dst: NodeRef
    kind: EdgeKind

    def __post_init__(self):
        if self.src == self.dst:
            raise ValueError(f"self edge at {self.src}")
        same = self.src[0] == self.dst[0]
        if same != (self.kind != EdgeKind.INTER):
            raise ValueError(f"edge kind {self.kind} inconsistent with {self.src}->{self.dst}")


def _level_ranks(levels: list[NodeLevel], level: NodeLevel) -> list[int]:
    return [r + 1 for r, lv in enumerate(levels) if lv is level]


def build_intra(nodes: NodeSet, batch_index: int = 0,
                distance: str = "grid") -> list[Edge]:
    """Intra-modality edges for one batch element.

    distance: 'grid' measures leaf-to-sub-central proximity on (row, col)
    coordinates, 'feature' on the node feature vectors.
    """
    kind = EdgeKind.INTRA_RGB if nodes.modality == "rgb" else EdgeKind.INTRA_DEPTH
    mains = _level_ranks(nodes.levels, NodeLevel.MAIN_CENTRAL)
    subs = _level_ranks(nodes.levels, NodeLevel.SUB_CENTRAL)
    leaves = _level_ranks(nodes.levels, NodeLevel.LEAF)

    edges = [Edge((nodes.modality, s), (nodes.modality, c), kind)
             for s in subs for c in mains]

    if leaves:
        if distance == "grid":
            points = nodes.positions[batch_index].astype(np.float64)
        elif distance == "feature":
            points = nodes.features.data[batch_index]
        else:
            raise ValueError(f"unknown distance mode {distance!r}")
        sub_points = points[[r - 1 for r in subs]]
        for leaf in leaves:
            d2 = ((sub_points - points[leaf - 1]) ** 2).sum(axis=1)
            # argmin takes the first minimum; subs are listed best rank first
            best = subs[int(np.argmin(d2))]
            edges.append(Edge((nodes.modality, leaf), (nodes.modality, best), kind))
    return edges


def build_inter(rgb: NodeSet, d: NodeSet, m: int, n: int) -> list[Edge]:
    """Rank-paired edges between the two modalities' central nodes."""
    if rgb.k != d.k:
        raise ValueError(f"node sets disagree on k: {rgb.k} vs {d.k}")
    if m + n > rgb.k:
        raise ValueError(f"m+n={m + n} exceeds k={rgb.k}")
    return [Edge(("rgb", i), ("depth", i), EdgeKind.INTER) for i in range(1, m + n + 1)]


@dataclass
class DynamicGraph:
    """Node sets of both modalities plus per-sample edge lists."""

    rgb_nodes: NodeSet
    d_nodes: NodeSet
    edges: list[list[Edge]]  # one list per batch element
    k: int
    m: int
    n: int

    @property
    def batch_size(self) -> int:
        return len(self.edges)

    @property
    def num_nodes(self) -> int:
        return 2 * self.k

    def node_index(self, ref: NodeRef) -> int:
        modality, rank = ref
        return rank - 1 if modality == "rgb" else self.k + rank - 1

    def node_ref(self, index: int) -> NodeRef:
        return ("rgb", index + 1) if index < self.k else ("depth", index - self.k + 1)

    def neighbors(self, batch_index: int) -> list[list[int]]:
        """Symmetric neighbor lists over flat node indices, sorted."""
        adj: list[set[int]] = [set() for _ in range(self.num_nodes)]
        for e in self.edges[batch_index]:
            i, j = self.node_index(e.src), self.node_index(e.dst)
            adj[i].add(j)
            adj[j].add(i)
        return [sorted(s) for s in adj]

    def adjacency_masks(self, dtype=np.float64) -> dict[EdgeKind, np.ndarray]:
        """Per-kind symmetric adjacency, shape (B, 2k, 2k) each."""
        B, N = self.batch_size, self.num_nodes
        masks = {kind: np.zeros((B, N, N), dtype=dtype) for kind in EdgeKind}
        for b, edge_list in enumerate(self.edges):
            for e in edge_list:
                i, j = self.node_index(e.src), self.node_index(e.dst)
                masks[e.kind][b, i, j] = 1.0
                masks[e.kind][b, j, i] = 1.0
        return masks


def assemble(rgb: NodeSet, d: NodeSet, m: int, n: int,
             distance: str = "grid") -> DynamicGraph:
    """Build intra edges for both modalities plus inter edges, per sample."""
    if rgb.k != d.k:
        raise ValueError(f"node sets disagree on k: {rgb.k} vs {d.k}")
    batch = rgb.positions.shape[0]
    inter = build_inter(rgb, d, m, n)
    edges = []
    for b in range(batch):
        per_sample = build_intra(rgb, b, distance=distance)
        per_sample += build_intra(d, b, distance=distance)
        per_sample += inter
        edges.append(per_sample)
    return DynamicGraph(rgb_nodes=rgb, d_nodes=d, edges=edges, k=rgb.k, m=m, n=n)


def edge_list_dump(graph: DynamicGraph, batch_index: int = 0) -> str:
    """Plain-text edge list: 'modality:rank -- modality:rank kind' per line."""
    lines = [f"{e.src[0]}:{e.src[1]} -- {e.dst[0]}:{e.dst[1]} {e.kind.value}"
             for e in graph.edges[batch_index]]
    return "\n".join(lines)


def reachable_within_modality(graph: DynamicGraph, modality: str,
                              batch_index: int = 0) -> bool:
    """True if the modality's k nodes are connected via intra edges alone."""
    k = graph.k
    adj = [set() for _ in range(k)]
    for e in graph.edges[batch_index]:
        if e.kind is EdgeKind.INTER or e.src[0] != modality:
            continue
        i, j = e.src[1] - 1, e.dst[1] - 1
        adj[i].add(j)
        adj[j].add(i)
    seen = {0}
    stack = [0]
    while stack:
        cur = stack.pop()
        for nxt in adj[cur]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return len(seen) == k
