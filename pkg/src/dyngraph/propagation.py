"""Attention-weighted aggregation and update over the dynamic graph.

Node state is one (B, 2k, C) tensor: rows 0..k-1 are the appearance nodes by
rank, rows k..2k-1 the geometry nodes. Each iteration scores every adjacent
pair through a shared linear attention head (project both endpoints, weigh
the concatenation by a learned vector), normalizes the scores per target node
with a masked softmax, and adds the attention-weighted sum of projected
neighbor features to a residual self term before the nonlinearity.

The neighborhood of a central node spans both modalities, so appearance and
geometry exchange information along the rank-paired edges; leaves only hear
their own modality within a single iteration. Projection matrices are
modality- and edge-kind-specific by default (four of them) so the two
modalities can contribute unequally; ``shared_weights`` collapses them to
one. Two more switches recover stricter readings of the update rule:
``literal_self`` aggregates the target's own projected features instead of
the neighbors', and ``separate_softmax`` normalizes intra- and
inter-modality scores independently instead of over the union neighborhood.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import engine as en
from .engine import ParameterStore, PrngState, Tensor, glorot_uniform
from .topology import DynamicGraph, EdgeKind

PROJECTION_KINDS = ("intra_rgb", "intra_depth", "cross_to_rgb", "cross_to_depth")


@dataclass
class GatParams:
    """Shared-across-iterations weights of the graph attention update."""

    proj: dict[str, Tensor]     # per edge kind, (C, C)
    attn_proj: Tensor           # (C, C')
    attn_src: Tensor            # (C', 1), first half of the scoring vector
    attn_dst: Tensor            # (C', 1), second half

    @property
    def channels(self) -> int:
        return self.attn_proj.data.shape[0]


def init_gat_params(rng: PrngState, channels: int, attn_channels: int | None = None,
                    shared_weights: bool = False,
                    store: ParameterStore | None = None,
                    prefix: str = "gat") -> GatParams:
    """Create (and optionally register) freshly initialized update weights."""
    c_attn = attn_channels or channels

    def param(name, shape, fan_in, fan_out):
        value = glorot_uniform(rng, shape, fan_in, fan_out)
        if store is not None:
            return store.register(f"{prefix}.{name}", value)
        return Tensor(value, requires_grad=True)

    if shared_weights:
        shared = param("proj.shared", (channels, channels), channels, channels)
        proj = {kind: shared for kind in PROJECTION_KINDS}
    else:
        proj = {kind: param(f"proj.{kind}", (channels, channels), channels, channels)
                for kind in PROJECTION_KINDS}
    return GatParams(
        proj=proj,
        attn_proj=param("attn.proj", (channels, c_attn), channels, c_attn),
        attn_src=param("attn.src", (c_attn, 1), c_attn, 1),
        attn_dst=param("attn.dst", (c_attn, 1), c_attn, 1),
    )


def initial_state(graph: DynamicGraph) -> Tensor:
    """Concatenate both modalities' selected node features, rgb first."""
    return en.concat([graph.rgb_nodes.features, graph.d_nodes.features], axis=1)


def _kind_masks(graph: DynamicGraph) -> dict[str, np.ndarray]:
    masks = graph.adjacency_masks()
    k = graph.k
    inter = masks[EdgeKind.INTER]
    cross_to_rgb = np.zeros_like(inter)
    cross_to_rgb[:, :k, :] = inter[:, :k, :]
    cross_to_depth = np.zeros_like(inter)
    cross_to_depth[:, k:, :] = inter[:, k:, :]
    return {
        "intra_rgb": masks[EdgeKind.INTRA_RGB],
        "intra_depth": masks[EdgeKind.INTRA_DEPTH],
        "cross_to_rgb": cross_to_rgb,
        "cross_to_depth": cross_to_depth,
    }


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise softmax over the last axis restricted to mask == 1.

    Rows with no unmasked entries come out all-zero (the self-only update
    path). Max-subtraction uses a constant shift, and masked entries are
    zeroed before the exponential so they can neither overflow nor leak
    gradient.
    """
    with np.errstate(invalid="ignore"):
        row_max = np.where(mask > 0, scores.data, -np.inf).max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    mask_t = Tensor(mask)
    e = ((scores - Tensor(row_max)) * mask_t).exp() * mask_t
    degree = mask.sum(axis=-1, keepdims=True)
    denom = e.sum(axis=-1, keepdims=True) + Tensor((degree == 0).astype(scores.data.dtype))
    return e / denom


def edge_scores(state: Tensor, params: GatParams) -> Tensor:
    """Unnormalized attention of every (target, neighbor) pair.

    The scoring vector applies to the concatenation of the two projected
    endpoint features, which decomposes into a target term plus a neighbor
    term; broadcasting their outer sum yields the full (B, N, N) table.
    """
    projected = state @ params.attn_proj              # (B, N, C')
    target_term = projected @ params.attn_src         # (B, N, 1)
    neighbor_term = projected @ params.attn_dst       # (B, N, 1)
    return target_term + en.transpose(neighbor_term, (0, 2, 1))


def attention_coefficients(state: Tensor, params: GatParams, union_mask: np.ndarray,
                           separate_masks: tuple[np.ndarray, np.ndarray] | None = None,
                           uniform: bool = False) -> Tensor:
    """Per-target normalized neighbor weights, (B, N, N).

    With ``separate_masks`` (intra, inter), each group is normalized on its
    own and the two attention tables are summed (they occupy disjoint
    entries). ``uniform`` replaces learned scores with 1/degree weights.
    """
    if uniform:
        degree = union_mask.sum(axis=-1, keepdims=True)
        return Tensor(union_mask / np.maximum(degree, 1.0))
    scores = edge_scores(state, params)
    if separate_masks is None:
        return masked_softmax(scores, union_mask)
    intra_mask, inter_mask = separate_masks
    return masked_softmax(scores, intra_mask) + masked_softmax(scores, inter_mask)


def step(state: Tensor, kind_masks: dict[str, np.ndarray], params: GatParams,
         literal_self: bool = False, separate_softmax: bool = False,
         uniform_attention: bool = False) -> tuple[Tensor, Tensor]:
    """One aggregation/update round; returns (new state, attention used)."""
    union = sum(kind_masks.values())
    separate = None
    if separate_softmax:
        intra = kind_masks["intra_rgb"] + kind_masks["intra_depth"]
        inter = kind_masks["cross_to_rgb"] + kind_masks["cross_to_depth"]
        separate = (intra, inter)
    alpha = attention_coefficients(state, params, union, separate, uniform_attention)

    total = state
    for kind, mask in kind_masks.items():
        weights = alpha * Tensor(mask)
        projected = state @ params.proj[kind]
        if literal_self:
            total = total + weights.sum(axis=-1, keepdims=True) * projected
        else:
            total = total + weights @ projected
    return total.relu(), alpha


def run(graph: DynamicGraph, state: Tensor, params: GatParams, iterations: int,
        literal_self: bool = False, separate_softmax: bool = False,
        uniform_attention: bool = False) -> tuple[Tensor, list[Tensor]]:
    """Apply ``iterations`` sequential update rounds with shared weights."""
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    kind_masks = _kind_masks(graph)
    alphas = []
    for _ in range(iterations):
        state, alpha = step(state, kind_masks, params,
                            literal_self=literal_self,
                            separate_softmax=separate_softmax,
                            uniform_attention=uniform_attention)
        alphas.append(alpha)
    return state, alphas


def attention_dump(graph: DynamicGraph, alphas: list[Tensor], batch_index: int = 0) -> str:
    """JSON of per-iteration attention: target node -> neighbor -> weight."""
    payload = []
    neighbors = graph.neighbors(batch_index)
    for it, alpha in enumerate(alphas):
        table = {}
        for i in range(graph.num_nodes):
            if not neighbors[i]:
                continue
            mod, rank = graph.node_ref(i)
            table[f"{mod}:{rank}"] = {
                "{}:{}".format(*graph.node_ref(j)): float(alpha.data[batch_index, i, j])
                for j in neighbors[i]
            }
        payload.append({"iteration": it + 1, "attention": table})
    return json.dumps(payload, indent=2)
