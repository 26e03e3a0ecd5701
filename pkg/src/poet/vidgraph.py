"""Product-oriented spatial-temporal video graph.

Nodes are laid out frame-major: for frame ``i`` the ``N_p`` part nodes come
first, then the frame node, so node ``(i, j)`` has row ``i * (N_p + 1) + j``
and ``j == N_p`` is the frame node.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .dataio import Batch, VideoSample


@dataclass(frozen=True)
class GraphConfig:
    n_frames: int = 30
    n_parts: int = 8
    frame_dim: int = 32
    part_dim: int = 16
    node_dim: int = 32
    aspect_dim: int = 32

    def __post_init__(self):
        for name in ("n_frames", "frame_dim", "part_dim", "node_dim", "aspect_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"GraphConfig.{name} must be positive")
        if self.n_parts < 0:
            raise ValueError("GraphConfig.n_parts must be non-negative")

    @property
    def n_nodes(self) -> int:
        return self.n_frames * (self.n_parts + 1)

    @property
    def degree(self) -> int:
        return self.n_parts + self.n_frames - 1

    def node_id(self, frame: int, kind: int) -> int:
        """Row of node (frame, kind); ``kind == n_parts`` is the frame node."""
        if not (0 <= frame < self.n_frames and 0 <= kind <= self.n_parts):
            raise IndexError(f"node ({frame}, {kind}) outside graph")
        return frame * (self.n_parts + 1) + kind


@dataclass
class GraphEmbeddings:
    order_part: Tensor  # (N_f, D_p)
    order_frame: Tensor  # (N_f, D_f)
    part_type: Tensor  # (N_p, D_p)
    frame_type: Tensor  # (D_f,)
    w_part: Tensor  # (D_pf, D_p)
    b_part: Tensor  # (D_pf,)
    w_frame: Tensor  # (D_pf, D_f)
    b_frame: Tensor  # (D_pf,)
    w_edge: Tensor  # (1, 2 * D_pf)
    b_edge: Tensor  # (1,)


@dataclass
class VideoGraph:
    node_feats: Tensor  # (B, N, D_pf)
    neighbors: np.ndarray  # (N, degree) int


def neighbor_rule(cfg: GraphConfig) -> list[list[int]]:
    """Within-frame cliques plus cross-frame cliques over nodes of equal type."""
    stride = cfg.n_parts + 1
    out = []
    for i in range(cfg.n_frames):
        for j in range(stride):
            same_frame = [i * stride + k for k in range(stride) if k != j]
            same_type = [f * stride + j for f in range(cfg.n_frames) if f != i]
            out.append(sorted(same_frame + same_type))
    return out


@functools.lru_cache(maxsize=32)
def neighbor_index(cfg: GraphConfig) -> np.ndarray:
    """Neighbor lists as an (N, degree) array; every node has the same degree."""
    lists = neighbor_rule(cfg)
    arr = np.array(lists, dtype=np.intp).reshape(cfg.n_nodes, cfg.degree)
    arr.setflags(write=False)
    return arr


def adjacency(cfg: GraphConfig) -> np.ndarray:
    a = np.zeros((cfg.n_nodes, cfg.n_nodes))
    nbr = neighbor_index(cfg)
    rows = np.repeat(np.arange(cfg.n_nodes), nbr.shape[1])
    a[rows, nbr.reshape(-1)] = 1.0
    return a


def _features(x: Batch | VideoSample) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(x, VideoSample):
        return x.part_feats[None], x.frame_feats[None]
    return x.part_feats, x.frame_feats


def build_nodes(x: Batch | VideoSample, emb: GraphEmbeddings, cfg: GraphConfig) -> Tensor:
    """Project order/type-enhanced part and frame features to (B, N, D_pf)."""
    parts, frames = _features(x)
    b = parts.shape[0]
    expect_p = (b, cfg.n_frames, cfg.n_parts, cfg.part_dim)
    expect_f = (b, cfg.n_frames, cfg.frame_dim)
    if parts.shape != expect_p or frames.shape != expect_f:
        raise ShapeError(f"features {parts.shape}/{frames.shape} do not match {expect_p}/{expect_f}")
    nf, d = cfg.n_frames, cfg.node_dim
    p = Tensor(parts) + ad.reshape(emb.order_part, (nf, 1, cfg.part_dim)) + emb.part_type
    f = Tensor(frames) + emb.order_frame + emb.frame_type
    v_part = ad.linear(p, emb.w_part, emb.b_part)  # (B, N_f, N_p, D)
    v_frame = ad.linear(f, emb.w_frame, emb.b_frame)  # (B, N_f, D)
    nodes = ad.concat([v_part, ad.reshape(v_frame, (b, nf, 1, d))], axis=2)
    return ad.reshape(nodes, (b, cfg.n_nodes, d))


def build_graph(x: Batch | VideoSample, emb: GraphEmbeddings, cfg: GraphConfig) -> VideoGraph:
    return VideoGraph(build_nodes(x, emb, cfg), neighbor_index(cfg))


def edge_scores(node_feats: Tensor, neighbors: np.ndarray, emb: GraphEmbeddings) -> Tensor:
    """Score ``W_e [v_root, v_nbr] + b_e`` for every (node, neighbor slot).

    Returns (B, N, degree).  The concatenation is evaluated as the sum of the
    two halves of ``W_e`` applied to each endpoint.
    """
    d = node_feats.shape[-1]
    if emb.w_edge.shape != (1, 2 * d):
        raise ShapeError(f"edge scorer {emb.w_edge.shape} does not match node dim {d}")
    s = ad.linear(node_feats, ad.reshape(emb.w_edge, (2, d)))  # (B, N, 2)
    root = s[..., 0:1]
    nbr = ad.take(s[..., 1], neighbors, axis=1)
    return root + nbr + emb.b_edge
