"""Environment feature F_env from obstacles, objects of interest and lighting.

Obstacles go through two cross-attention stages: each obstacle feature
(embedding plus normalized position) queries the global scene feature, then
every pedestrian attends over the enhanced obstacles with an additive logit
bias computed from the relative position by a small 2-8-1 network.  Objects
of interest are enhanced by concatenation with the scene feature and a
projection, then attended the same way.  Lighting statistics (or, as a
substitute channel, a crowd-density grid) are encoded by an MLP.  The three
pieces are concatenated and mixed by a final MLP.

With ``relative_values`` the attended value of entity ``l`` for pedestrian
``i`` also receives a linear term in ``p_l - p_i``; without it a single
entity yields the same output for every pedestrian.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .config import EnvConfig
from .container import load_records
from .nn import MLP, Affine, Module, attention
from .scene import LightingGrid, SceneEnvironment


class EmbeddingError(KeyError):
    pass


class EmbeddingProvider(Module):
    """Maps entity embedding ids to fixed-dimension vectors.

    ``learned`` tables are trainable parameters; ``external-file`` tables hold
    precomputed vectors loaded from an ESDF container and stay frozen.
    """

    def __init__(self, ids: Sequence[str], dim: int, rng: np.random.Generator | None = None,
                 vectors: dict[str, np.ndarray] | None = None):
        self.mode = "learned" if vectors is None else "external-file"
        self.dim = dim
        self.table: dict[str, Value] = {}
        if vectors is None:
            for key in sorted(set(ids)):
                self.table[key] = Value(rng.normal(0.0, 1.0, size=dim), requires_grad=True)
        else:
            for key in sorted(vectors):
                vec = np.asarray(vectors[key], dtype=np.float64).reshape(-1)
                if vec.size != dim:
                    raise EmbeddingError(f"embedding {key!r} has dimension {vec.size}, expected {dim}")
                self.table[key] = Value(vec)

    @classmethod
    def from_file(cls, path, dim: int) -> EmbeddingProvider:
        return cls([], dim, vectors=load_records(path))

    @property
    def ids(self) -> list[str]:
        return list(self.table)

    def lookup(self, key: str) -> Value:
        try:
            return self.table[key]
        except KeyError:
            raise EmbeddingError(f"embedding id {key!r} is not registered") from None

    def stack(self, keys: Sequence[str]) -> Value:
        if not keys:
            return Value(np.zeros((0, self.dim)))
        return ad.concat([ad.reshape(self.lookup(k), (1, self.dim)) for k in keys], axis=0)


def scene_feature(provider: EmbeddingProvider, scene_id: str, proj: Affine | None = None) -> Value:
    emb = provider.lookup(scene_id)
    return emb if proj is None else proj(emb)


def enhance_obstacles(obstacle_feats: Value, positions_norm: np.ndarray, f_scene: Value,
                      proj_q: Affine, proj_k: Affine, proj_v: Affine) -> Value:
    """Stage one: obstacle queries attend to the scene feature; returns (O, d)."""
    n = obstacle_feats.shape[0]
    if n == 0:
        return Value(np.zeros((0, proj_v.n_out)))
    q = proj_q(ad.concat([obstacle_feats, positions_norm], axis=-1))
    scene = ad.reshape(f_scene, (1, -1))
    k = proj_k(scene)
    v = proj_v(scene)
    out, _ = attention(q, k, v, proj_q.n_out)
    return out


def enhance_oois(ooi_feats: Value, positions_norm: np.ndarray, f_scene: Value, proj: Affine) -> Value:
    n = ooi_feats.shape[0]
    if n == 0:
        return Value(np.zeros((0, proj.n_out)))
    scene = ad.concat([ad.reshape(f_scene, (1, -1))] * n, axis=0)
    return proj(ad.concat([ooi_feats, positions_norm, scene], axis=-1))


class EntityAttention(Module):
    """Pedestrian-to-entity cross-attention with a relative-position logit bias."""

    def __init__(self, d_entity: int, d: int, rng: np.random.Generator, relative_values: bool, rel_scale: float = 1.0):
        self.w_q = Affine(6, d, rng)
        self.w_k = Affine(d_entity, d, rng)
        self.w_v = Affine(d_entity, d, rng)
        self.bias_net = MLP([2, 8, 1], rng, activation="tanh")
        self.w_rel = Affine(2, d, rng, bias=False) if relative_values else None
        self.d = d
        self.rel_scale = rel_scale

    def __call__(self, query_state: Value, p: Value, entity_feats: Value, entity_pos: np.ndarray,
                 index: np.ndarray) -> tuple[Value, Value | None]:
        """``index`` is (N, M) into the entity rows, ``-1`` marking padding."""
        N = query_state.shape[0]
        M = index.shape[1] if index.ndim == 2 else 0
        if N == 0 or M == 0 or entity_feats.shape[0] == 0:
            return Value(np.zeros((N, self.d))), None
        mask = index >= 0
        safe = np.where(mask, index, 0)
        q = self.w_q(query_state)
        k = ad.take(self.w_k(entity_feats), safe)
        v = ad.take(self.w_v(entity_feats), safe)
        p_rel = ad.sub(entity_pos[safe], ad.reshape(p, (N, 1, 2))) * (1.0 / self.rel_scale)
        bias = ad.reshape(self.bias_net(p_rel), (N, M))
        if self.w_rel is not None:
            v = v + self.w_rel(p_rel)
        return attention(q, k, v, self.d, bias=bias, mask=mask)


def ped_obstacle_attention(block: EntityAttention, query_state, p, enhanced, positions, index):
    return block(query_state, p, enhanced, positions, index)


def ped_ooi_attention(block: EntityAttention, query_state, p, enhanced, positions, index):
    return block(query_state, p, enhanced, positions, index)


class LightingDimensionError(ValueError):
    pass


def lighting_feature(grid: LightingGrid, mlp: MLP, mode: str = "mean_max_min") -> Value:
    raw = grid.features(mode)
    if raw.size != mlp.dims[0]:
        raise LightingDimensionError(
            f"lighting grid {grid.dims} with mode {mode!r} gives {raw.size} inputs, MLP expects {mlp.dims[0]}"
        )
    return mlp(raw)


def normalized_density(grid: np.ndarray) -> np.ndarray:
    """Counts divided by the agent count; an empty grid stays zero."""
    grid = np.asarray(grid, dtype=np.float64)
    total = grid.sum(axis=(-2, -1), keepdims=True)
    return np.where(total > 0, grid / np.where(total > 0, total, 1.0), 0.0)


def density_feature(grid: np.ndarray, mlp: MLP) -> Value:
    flat = normalized_density(grid).reshape(grid.shape[:-2] + (-1,))
    return mlp(flat)


def aggregate_env(f_obs: Value, f_ooi: Value, f_light: Value, mlp: MLP) -> Value:
    return mlp(ad.concat([f_obs, f_ooi, f_light], axis=-1))


@dataclass
class EnvContext:
    """Per-forward cache of entity features for a list of scenes."""

    obs_feats: Value
    obs_pos: np.ndarray
    obs_index: np.ndarray  # (S, M_obs) padded with -1
    ooi_feats: Value
    ooi_pos: np.ndarray
    ooi_index: np.ndarray
    light: Value | None  # (S, d_light)
    bounds: np.ndarray  # (S, 4)


def _pad_index(counts: list[int]) -> np.ndarray:
    width = max(counts, default=0)
    index = np.full((len(counts), width), -1, dtype=np.intp)
    offset = 0
    for s, c in enumerate(counts):
        index[s, :c] = np.arange(offset, offset + c)
        offset += c
    return index


def normalize_positions(p: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    """Map (..., 2) meters to [-1, 1] given per-row bounds (..., 4)."""
    center = (bounds[..., 0:2] + bounds[..., 2:4]) / 2
    half = (bounds[..., 2:4] - bounds[..., 0:2]) / 2
    return (p - center) / half


class EnvConditioning(Module):
    def __init__(self, cfg: EnvConfig, provider: EmbeddingProvider, rng: np.random.Generator, n_light_inputs: int):
        self.cfg = cfg
        self.embeddings = provider
        d_e = provider.dim
        self.scene_proj = Affine(d_e, cfg.scene_proj_dim, rng) if cfg.scene_proj_dim else None
        d_sc = cfg.scene_proj_dim or d_e
        self.obs_proj_q = Affine(d_e + 2, cfg.d1, rng)
        self.obs_proj_k = Affine(d_sc, cfg.d1, rng)
        self.obs_proj_v = Affine(d_sc, cfg.d1, rng)
        self.obs_attn = EntityAttention(cfg.d1, cfg.d1, rng, cfg.relative_values, cfg.rel_scale)
        self.ooi_proj = Affine(d_e + 2 + d_sc, cfg.d2, rng)
        self.ooi_attn = EntityAttention(cfg.d2, cfg.d2, rng, cfg.relative_values, cfg.rel_scale)
        self.light_mlp = MLP([n_light_inputs, cfg.hidden, cfg.d_light], rng)
        self.density_mlp = MLP([cfg.density_k ** 2, cfg.hidden, cfg.d_light], rng)
        self.aggregate = MLP([cfg.d1 + cfg.d2 + cfg.d_light, cfg.hidden, cfg.d_env], rng)
        self.n_light_inputs = n_light_inputs

    @property
    def out_dim(self) -> int:
        return self.cfg.d_env

    def prepare(self, scenes: Sequence[SceneEnvironment]) -> EnvContext:
        cfg = self.cfg
        obs_parts, ooi_parts, obs_pos, ooi_pos, lights = [], [], [], [], []
        for scene in scenes:
            f_sc = scene_feature(self.embeddings, scene.scene_embedding, self.scene_proj)
            if cfg.obstacles and scene.obstacles:
                pos = scene.obstacle_positions()
                feats = self.embeddings.stack([o.embedding_id for o in scene.obstacles])
                obs_parts.append(enhance_obstacles(feats, scene.bounds.normalize(pos), f_sc,
                                                   self.obs_proj_q, self.obs_proj_k, self.obs_proj_v))
                obs_pos.append(pos)
            else:
                obs_pos.append(np.zeros((0, 2)))
            if cfg.ooi and scene.oois:
                pos = scene.ooi_positions()
                feats = self.embeddings.stack([o.embedding_id for o in scene.oois])
                ooi_parts.append(enhance_oois(feats, scene.bounds.normalize(pos), f_sc, self.ooi_proj))
                ooi_pos.append(pos)
            else:
                ooi_pos.append(np.zeros((0, 2)))
            if cfg.channel == "lighting":
                lights.append(ad.reshape(lighting_feature(scene.lighting, self.light_mlp, cfg.lighting_stats), (1, -1)))
        obs_feats = ad.concat(obs_parts, axis=0) if obs_parts else Value(np.zeros((0, cfg.d1)))
        ooi_feats = ad.concat(ooi_parts, axis=0) if ooi_parts else Value(np.zeros((0, cfg.d2)))
        return EnvContext(
            obs_feats=obs_feats,
            obs_pos=np.concatenate(obs_pos, axis=0),
            obs_index=_pad_index([len(p) for p in obs_pos]),
            ooi_feats=ooi_feats,
            ooi_pos=np.concatenate(ooi_pos, axis=0),
            ooi_index=_pad_index([len(p) for p in ooi_pos]),
            light=ad.concat(lights, axis=0) if lights else None,
            bounds=np.array([s.bounds.as_list() for s in scenes], dtype=np.float64).reshape(-1, 4),
        )

    def __call__(self, ctx: EnvContext, ped_scene: np.ndarray, p: Value, v: Value, a: Value,
                 density: np.ndarray | None = None) -> Value:
        """F_env for N pedestrians; ``density`` is (N, K, K) counts when that channel is active."""
        cfg = self.cfg
        N = p.shape[0]
        bounds = ctx.bounds[ped_scene]
        center = (bounds[:, 0:2] + bounds[:, 2:4]) / 2
        half = (bounds[:, 2:4] - bounds[:, 0:2]) / 2
        query = ad.concat([ad.div(ad.sub(p, center), half), v, a], axis=-1)
        f_obs, _ = self.obs_attn(query, p, ctx.obs_feats, ctx.obs_pos, ctx.obs_index[ped_scene])
        f_ooi, _ = self.ooi_attn(query, p, ctx.ooi_feats, ctx.ooi_pos, ctx.ooi_index[ped_scene])
        if cfg.channel == "lighting":
            f_light = ad.take(ctx.light, ped_scene)
        elif cfg.channel == "density":
            if density is None:
                raise ValueError("density channel selected but no density grid supplied")
            f_light = density_feature(density, self.density_mlp)
        else:
            f_light = Value(np.zeros((N, cfg.d_light)))
        return aggregate_env(f_obs, f_ooi, f_light, self.aggregate)
