"""Adaptive node selection: spatial attention over a feature map grid.

A lightweight spatial-attention branch (channel mean/max pooling, one wide
convolution, sigmoid) scores every grid cell of a feature map. The map both
re-weights the features through a residual product and picks the k
highest-scoring cells as graph nodes, which are then labelled by importance
level: the top m are maincentral, the next n subcentral, the rest leaves.

Selection itself is hard (pure indexing); gradients reach the attention
parameters only through the multiplicative enhancement path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import engine as en
from .engine import Tensor

ATTN_KERNEL_SIZE = 7  # 2 -> 1 channels over the pooled map


class NodeLevel(str, Enum):
    MAIN_CENTRAL = "main_central"
    SUB_CENTRAL = "sub_central"
    LEAF = "leaf"


@dataclass
class NodeSet:
    """The k selected grid cells of one modality, ordered by rank.

    features: (B, k, C) tensor, row r holds the rank-(r+1) node.
    positions: (B, k, 2) int array of (row, col) grid coordinates.
    scores: (B, k) attention values, descending along the rank axis.
    levels: per-rank importance labels, shared across the batch.
    """

    features: Tensor
    positions: np.ndarray
    scores: np.ndarray
    levels: list[NodeLevel]
    modality: str

    @property
    def k(self) -> int:
        return len(self.levels)

    @property
    def ranks(self) -> list[int]:
        return list(range(1, self.k + 1))

    def level_counts(self) -> dict[NodeLevel, int]:
        counts = {level: 0 for level in NodeLevel}
        for level in self.levels:
            counts[level] += 1
        return counts


def assign_levels(k: int, m: int, n: int) -> list[NodeLevel]:
    """Ranks 1..m are main-central, m+1..m+n sub-central, the rest leaves."""
    if m < 1 or n < 1 or m + n > k:
        raise ValueError(f"invalid level split: k={k}, m={m}, n={n}")
    return ([NodeLevel.MAIN_CENTRAL] * m + [NodeLevel.SUB_CENTRAL] * n
            + [NodeLevel.LEAF] * (k - m - n))


def attention_map(f: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Per-cell importance in (0,1): sigmoid(conv(concat(mean_c, max_c)))."""
    pooled = en.channel_pool(f)
    pad = kernel.data.shape[2] // 2
    return en.conv2d(pooled, kernel, bias, padding=pad).sigmoid()


def enhance(f: Tensor, attn: Tensor) -> Tensor:
    """Residual re-weighting: f * attn + f, attn broadcasting over channels."""
    if attn.data.shape[0] != f.data.shape[0] or attn.data.shape[2:] != f.data.shape[2:]:
        raise ValueError(f"enhance: attention {attn.shape} does not broadcast over {f.shape}")
    return f * attn + f


def top_k_cells(attn_values: np.ndarray, k: int) -> np.ndarray:
    """Indices (row-major) of the k largest cells of one (H, W) map.

    Descending by value; ties broken toward the smaller row-major index.
    numpy's stable sort on the negated values gives exactly that order.
    """
    flat = attn_values.reshape(-1)
    if k > flat.size:
        raise ValueError(f"k={k} exceeds {flat.size} grid cells")
    order = np.argsort(-flat, kind="stable")
    return order[:k]


def select_nodes(f_enhanced: Tensor, attn: Tensor, k: int, m: int, n: int,
                 modality: str) -> NodeSet:
    """Pick the k most important cells of each batch element as nodes.

    The enhanced map is viewed as (B, H*W, C) rows; every batch element gets
    its own position list from its own attention map.
    """
    B, C, H, W = f_enhanced.data.shape
    levels = assign_levels(k, m, n)

    flat_idx = np.empty((B, k), dtype=np.int64)
    for b in range(B):
        flat_idx[b] = top_k_cells(attn.data[b, 0], k)

    rows = en.transpose(en.reshape(f_enhanced, (B, C, H * W)), (0, 2, 1))
    features = en.gather_rows(rows, flat_idx)

    positions = np.stack([flat_idx // W, flat_idx % W], axis=-1)
    scores = np.take_along_axis(attn.data.reshape(B, -1), flat_idx, axis=1)
    return NodeSet(features=features, positions=positions, scores=scores,
                   levels=levels, modality=modality)


def selection_debug_dump(nodes: NodeSet) -> str:
    """Per-sample JSON of positions, ranks, levels and attention values."""
    payload = []
    for b in range(nodes.positions.shape[0]):
        payload.append({
            "modality": nodes.modality,
            "nodes": [
                {
                    "rank": r + 1,
                    "level": nodes.levels[r].value,
                    "position": [int(p) for p in nodes.positions[b, r]],
                    "attention": float(nodes.scores[b, r]),
                }
                for r in range(nodes.k)
            ],
        })
    return json.dumps(payload, indent=2)
