"""Graph reasoning layers: spatial-temporal inference, knowledge leveraging, GCN baseline.

All functions take batched node features of shape (B, N, D).  Aspect lists
are padded to a common length A with a boolean mask; padded slots never
survive filtering and receive exactly zero attention.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import StructuralError, Tensor
from .vidgraph import GraphConfig, GraphEmbeddings, adjacency, build_nodes, edge_scores, neighbor_index

GAMMA = 0.5

VARIANTS = ("poet", "poet_minus_kl", "gcn_minus_kl", "gcn_plus_kl")
_ALIASES = {
    "poet-kl": "poet_minus_kl",
    "gcn": "gcn_minus_kl",
    "gcn-kl": "gcn_minus_kl",
    "gcn+kl": "gcn_plus_kl",
}


def canonical_variant(name: str) -> str:
    v = _ALIASES.get(name, name)
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS + tuple(_ALIASES)}")
    return v


@dataclass
class StiParams:
    w_n: Tensor
    b_n: Tensor
    w_r: Tensor
    b_r: Tensor
    w_na: Tensor
    b_na: Tensor
    w_ra: Tensor
    b_ra: Tensor


@dataclass
class GcnParams:
    weight: Tensor  # (D, D)


@dataclass
class KlParams:
    w_h: Tensor  # (1, D_a + D)
    b_h: Tensor  # (1,)
    w_a: Tensor  # (D, D_a)
    b_a: Tensor
    w_gl: Tensor  # (D, D)
    b_gl: Tensor
    w_m: Tensor  # (D_m, 2D)
    b_m: Tensor  # (D_m,)
    w_omega: Tensor  # (1, D_m)


@dataclass
class FilterResult:
    alpha: Tensor  # (B, A) importance in (0, 1)
    probs: np.ndarray  # (B, A) softmax of alpha over valid slots
    keep: np.ndarray  # (B, A) bool
    context: Tensor  # (B, D) mean node feature

    @property
    def kept(self) -> list[list[int]]:
        return [np.flatnonzero(row).tolist() for row in self.keep]


# ---------------------------------------------------------------- STI


def neighbor_max(node_feats: Tensor, neighbors: np.ndarray, scores: Tensor) -> Tensor:
    """Coordinatewise max over neighbors of ``score * v_neighbor`` -> (B, N, D)."""
    if neighbors.shape[1] == 0:
        raise StructuralError("graph has isolated nodes; neighbor max is undefined")
    gathered = ad.take(node_feats, neighbors, axis=1)  # (B, N, deg, D)
    weighted = gathered * ad.reshape(scores, (*scores.shape, 1))
    return ad.max_along(weighted, axis=2)


def sti_layer(node_feats: Tensor, neighbors: np.ndarray, emb: GraphEmbeddings, p: StiParams) -> Tensor:
    scores = edge_scores(node_feats, neighbors, emb)
    agg = neighbor_max(node_feats, neighbors, scores)
    update = ad.linear(agg, p.w_n, p.b_n) + ad.linear(node_feats, p.w_r, p.b_r)
    gate = ad.sigmoid(ad.linear(agg, p.w_na, p.b_na) + ad.linear(node_feats, p.w_ra, p.b_ra))
    return gate * update + node_feats


# ---------------------------------------------------------------- GCN baseline


@functools.lru_cache(maxsize=32)
def normalized_adjacency(cfg: GraphConfig) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 over the graph's static adjacency."""
    a = adjacency(cfg) + np.eye(cfg.n_nodes)
    d = 1.0 / np.sqrt(a.sum(axis=1))
    out = a * d[:, None] * d[None, :]
    out.setflags(write=False)
    return out


def gcn_layer(node_feats: Tensor, adj_norm: np.ndarray, p: GcnParams) -> Tensor:
    return ad.relu(ad.matmul(Tensor(adj_norm), ad.linear(node_feats, p.weight)))


# ---------------------------------------------------------------- knowledge leveraging


def select_aspects(alpha: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hard filter: keep aspects whose softmax share of ``alpha`` beats 1/N_a.

    When nothing passes (e.g. every alpha equal) the first maximal aspect is
    kept, so the memory is never empty.
    """
    alpha = np.atleast_2d(alpha)
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    if not mask.any(axis=1).all():
        raise ValueError("filter_aspects needs at least one aspect per sample")
    e = np.where(mask, np.exp(alpha - np.where(mask, alpha, -np.inf).max(axis=1, keepdims=True)), 0.0)
    probs = e / e.sum(axis=1, keepdims=True)
    n_a = mask.sum(axis=1, keepdims=True)
    keep = mask & (probs > 1.0 / n_a)
    for b in np.flatnonzero(~keep.any(axis=1)):
        keep[b, np.argmax(np.where(mask[b], alpha[b], -np.inf))] = True
    return probs, keep


def aspect_embeddings(aspect_ids: np.ndarray, table: Tensor) -> Tensor:
    return ad.take(table, aspect_ids, axis=0)  # (B, A, D_a)


def filter_aspects(node_feats: Tensor, aspect_emb: Tensor, aspect_mask: np.ndarray, p: KlParams) -> FilterResult:
    b, a, d_a = aspect_emb.shape
    context = ad.mean(node_feats, axis=1)  # (B, D)
    score = ad.linear(aspect_emb, p.w_h[:, :d_a]) + ad.reshape(ad.linear(context, p.w_h[:, d_a:]), (b, 1, 1))
    alpha = ad.sigmoid(ad.reshape(score + p.b_h, (b, a)))
    probs, keep = select_aspects(alpha.data, aspect_mask)
    return FilterResult(alpha, probs, keep, context)


def memory_write(filt: FilterResult, aspect_emb: Tensor, p: KlParams) -> Tensor:
    """Blend each aspect's projection with the global context by its importance -> (B, A, D).

    Every slot is written; :func:`memory_attend` only reads the kept ones.
    """
    b, a = filt.alpha.shape
    alpha = ad.reshape(filt.alpha, (b, a, 1))
    own = ad.linear(aspect_emb, p.w_a, p.b_a)
    glob = ad.linear(filt.context, p.w_gl, p.b_gl)
    return alpha * own + (1.0 - alpha) * ad.reshape(glob, (b, 1, glob.shape[-1]))


def memory_attend(node_feats: Tensor, memory: Tensor, keep: np.ndarray, p: KlParams,
                  gamma: float = GAMMA, return_weights: bool = False):
    b, n, d = node_feats.shape
    a = memory.shape[1]
    d_m = p.w_m.shape[0]
    from_nodes = ad.linear(node_feats, p.w_m[:, :d])
    from_mem = ad.linear(memory, p.w_m[:, d:], p.b_m)
    hidden = ad.tanh(ad.reshape(from_nodes, (b, n, 1, d_m)) + ad.reshape(from_mem, (b, 1, a, d_m)))
    logits = ad.reshape(ad.linear(hidden, p.w_omega), (b, n, a))
    weights = ad.softmax(logits, axis=-1, mask=keep[:, None, :])
    out = node_feats * gamma + ad.matmul(weights, memory)
    return (out, weights) if return_weights else out


def knowledge_layer(node_feats: Tensor, aspect_emb: Tensor, aspect_mask: np.ndarray,
                    p: KlParams) -> tuple[Tensor, FilterResult]:
    filt = filter_aspects(node_feats, aspect_emb, aspect_mask, p)
    memory = memory_write(filt, aspect_emb, p)
    return memory_attend(node_feats, memory, filt.keep, p), filt


# ---------------------------------------------------------------- stacking


def encode(batch, params, variant: str = "poet", layers: int | None = None) -> tuple[Tensor, FilterResult | None]:
    """Run graph building and ``layers`` reasoning layers.

    Returns the final node features and the first layer's filter result
    (None for variants without knowledge leveraging or zero depth).
    """
    variant = canonical_variant(variant)
    cfg = params.config.graph
    layers = params.config.layers if layers is None else layers
    if layers > params.config.layers:
        raise ValueError(f"requested {layers} layers but params hold {params.config.layers}")
    nodes = build_nodes(batch, params.graph, cfg)
    use_sti = variant.startswith("poet")
    use_kl = variant in ("poet", "gcn_plus_kl")
    if use_kl:
        asp = aspect_embeddings(batch.aspect_ids, params.aspect_embed)
    nbr = neighbor_index(cfg)
    first = None
    for k in range(layers):
        if use_sti:
            nodes = sti_layer(nodes, nbr, params.graph, params.sti[k])
        else:
            nodes = gcn_layer(nodes, normalized_adjacency(cfg), params.gcn[k])
        if use_kl:
            nodes, filt = knowledge_layer(nodes, asp, batch.aspect_mask, params.kl[k])
            if first is None:
                first = filt
    return nodes, first
