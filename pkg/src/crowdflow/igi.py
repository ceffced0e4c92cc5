"""Individual-group interaction: neighbour graph, similarities and GNN.

Similarities are cosines mapped to [0, 1].  Degenerate inputs (a zero-length
vector or an empty neighbourhood) give the neutral value 0.5, which falls out
of zero-safe normalization: a zero unit vector has zero dot product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .config import IGIConfig
from .nn import MLP, Module


@dataclass
class NeighborGraph:
    """Directed edges ``src -> dst``: ``src`` is a neighbour of ``dst``.

    Edges are grouped by ``dst`` in ascending order and, within a group,
    sorted by distance with ties broken by lower neighbour index.
    """

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    dist: np.ndarray

    def neighbors(self, i: int) -> list[int]:
        return self.src[self.dst == i].tolist()

    def distances(self, i: int) -> list[float]:
        return self.dist[self.dst == i].tolist()


def build_knn(positions: np.ndarray, top_k: int, valid: np.ndarray | None = None,
              groups: np.ndarray | None = None) -> NeighborGraph:
    """Euclidean k-nearest neighbours among valid pedestrians of the same group."""
    if top_k < 0:
        raise ValueError(f"top_k must be >= 0, got {top_k}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    N = len(pos)
    valid = np.ones(N, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    groups = np.zeros(N, dtype=np.int64) if groups is None else np.asarray(groups)
    src, dst, dist = [], [], []
    if top_k > 0:
        for g in np.unique(groups[valid]):
            members = np.flatnonzero(valid & (groups == g))
            if len(members) < 2:
                continue
            pts = pos[members]
            d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
            np.fill_diagonal(d, np.inf)
            k = min(top_k, len(members) - 1)
            order = np.argsort(d, axis=1, kind="stable")[:, :k]
            for row, i in enumerate(members):
                src.append(members[order[row]])
                dst.append(np.full(k, i))
                dist.append(d[row, order[row]])
    if src:
        src_a, dst_a, dist_a = np.concatenate(src), np.concatenate(dst), np.concatenate(dist)
        # order edges by destination, keeping each neighbour list's distance order
        perm = np.argsort(dst_a, kind="stable")
        src_a, dst_a, dist_a = src_a[perm], dst_a[perm], dist_a[perm]
    else:
        src_a = dst_a = np.zeros(0, dtype=np.intp)
        dist_a = np.zeros(0)
    return NeighborGraph(N, src_a.astype(np.intp), dst_a.astype(np.intp), dist_a)


def _mapped_cosine(x: np.ndarray, y: np.ndarray) -> float:
    # rescale first so tiny or huge inputs keep full precision
    sx, sy = np.max(np.abs(x), initial=0.0), np.max(np.abs(y), initial=0.0)
    if sx == 0 or sy == 0:
        return 0.5
    x, y = x / sx, y / sy
    cos = np.dot(x, y) / (np.linalg.norm(x) * np.linalg.norm(y))
    return float(np.clip(0.5 * (cos + 1.0), 0.0, 1.0))


def sim1(dp_ij, v_j) -> float:
    """Cosine of the offset ``p_j - p_i`` against the neighbour's velocity, in [0, 1]."""
    return _mapped_cosine(np.asarray(dp_ij, float), np.asarray(v_j, float))


def sim2(v_i, v_j) -> float:
    return _mapped_cosine(np.asarray(v_i, float), np.asarray(v_j, float))


def sim3(w_i, g_i) -> float:
    """Conformity of ``w_i = v_i (+) a_i`` with the neighbourhood mean ``g_i``."""
    return _mapped_cosine(np.asarray(w_i, float), np.asarray(g_i, float))


def mapped_cosine(x: Value, y: Value) -> Value:
    """Batched differentiable ``(x_hat . y_hat + 1) / 2`` over the last axis."""
    dot = ad.vsum(ad.safe_normalize(x) * ad.safe_normalize(y), axis=-1, keepdims=True)
    out = dot * 0.5 + 0.5
    # unit vectors can overshoot |cos| = 1 by an ulp; clamp (zero gradient there)
    out = ad.where(out.data > 1.0, 1.0, out)
    return ad.where(out.data < 0.0, 0.0, out)


def neighborhood_mean(w: Value, graph: NeighborGraph) -> Value:
    """g_i: mean of neighbours' ``v (+) a``; zero for isolated nodes."""
    if len(graph.src) == 0:
        return Value(np.zeros((graph.n_nodes, w.shape[-1])))
    return ad.segment_mean(ad.take(w, graph.src), graph.dst, graph.n_nodes)


class IGI(Module):
    """Message passing over the neighbour graph producing F_social.

    Node init ``h0 = MLP_init(S (+) eps (+) g)``; every layer
    ``h <- MLP_node_l(h (+) mean_j MLP_edge(e_ij) (+) Norm(g))`` with one
    shared edge MLP; output ``MLP_out(h)``.  Positions in ``S`` are the
    bounds-normalized coordinates supplied by the caller.
    """

    def __init__(self, cfg: IGIConfig, rng: np.random.Generator):
        self.cfg = cfg
        H = cfg.hidden
        self.edge_dim = 4 * cfg.use_rij + cfg.use_sim1 + cfg.use_sim2 + cfg.use_sim3
        self.mlp_init = MLP([6 + cfg.noise_dim + 4, H, H], rng)
        self.mlp_edge = MLP([max(self.edge_dim, 1), H, H], rng) if self.edge_dim else None
        self.mlp_node = [MLP([H + H + 4, H, H], rng) for _ in range(cfg.layers)]
        self.mlp_out = MLP([H, H, cfg.d_social], rng)

    @property
    def out_dim(self) -> int:
        return self.cfg.d_social

    def edge_features(self, p: Value, v: Value, w: Value, g: Value, graph: NeighborGraph) -> Value | None:
        cfg = self.cfg
        if len(graph.src) == 0 or self.edge_dim == 0:
            return None
        p_i, p_j = ad.take(p, graph.dst), ad.take(p, graph.src)
        v_i, v_j = ad.take(v, graph.dst), ad.take(v, graph.src)
        dp = p_j - p_i
        parts = []
        if cfg.use_rij:
            parts += [dp, v_j - v_i]
        if cfg.use_sim1:
            parts.append(mapped_cosine(dp, v_j))
        if cfg.use_sim2:
            parts.append(mapped_cosine(v_i, v_j))
        if cfg.use_sim3:
            s3 = mapped_cosine(w, g)
            parts.append(ad.take(s3, graph.dst))
        return ad.concat(parts, axis=-1)

    def __call__(self, s_norm: Value, p: Value, v: Value, a: Value, noise: np.ndarray,
                 graph: NeighborGraph) -> Value:
        N = graph.n_nodes
        w = ad.concat([v, a], axis=-1)
        g = neighborhood_mean(w, graph)
        h = self.mlp_init(ad.concat([s_norm, noise, g], axis=-1))
        e = self.edge_features(p, v, w, g, graph)
        if e is None:
            agg = Value(np.zeros((N, self.cfg.hidden)))
        else:
            # edge inputs do not depend on h, so the shared messages are layer-invariant
            agg = ad.segment_mean(self.mlp_edge(e), graph.dst, N)
        g_unit = ad.safe_normalize(g)
        for layer in self.mlp_node:
            h = layer(ad.concat([h, agg, g_unit], axis=-1))
        return self.mlp_out(h)


def gnn_forward(gnn: IGI, s_norm: Value, p: Value, v: Value, a: Value, noise: np.ndarray,
                graph: NeighborGraph) -> Value:
    return gnn(s_norm, p, v, a, noise, graph)
