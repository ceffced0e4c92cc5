"""The full conditional model: F_env, F_social and F_hist feeding the denoiser."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .config import RunConfig, from_dict
from .container import decode_text, encode_text, load_records, save_records
from .diffusion import Denoiser, make_schedule, sample_ddim, sample_ddpm
from .envcond import EmbeddingProvider, EnvConditioning, EnvContext
from .history import HistoryEncoder
from .igi import IGI, build_knn
from .nn import Module, make_rng
from .scene import SceneEnvironment, build_density_grid


@dataclass
class FrameBatch:
    """Inputs for one frame of N pedestrians drawn from one or more scenes.

    ``history`` holds L (N, 6) states oldest first, the last being the current
    frame; ``history_valid`` the matching (N,) masks.  ``groups`` separates
    pedestrians that must not see each other (different scenes or segments);
    ``scene_index`` points into the scene list of the environment context.
    """

    history: list[Value]
    history_valid: list[np.ndarray]
    scene_index: np.ndarray
    groups: np.ndarray
    noise: np.ndarray  # (N, noise_dim) GNN node noise

    @property
    def current(self) -> Value:
        return self.history[-1]


def lighting_inputs(scene: SceneEnvironment, mode: str) -> int:
    return int(scene.lighting.features(mode).size)


class CrowdModel(Module):
    def __init__(self, cfg: RunConfig, embedding_ids: Sequence[str], n_light_inputs: int, seed: int | None = None):
        self.cfg = cfg
        seed = cfg.seed if seed is None else seed
        rng = make_rng(seed, 0)
        mc = cfg.model
        if mc.env.embeddings == "file":
            provider = EmbeddingProvider.from_file(mc.env.embedding_file, mc.env.embedding_dim)
        else:
            provider = EmbeddingProvider(embedding_ids, mc.env.embedding_dim, rng)
        self.embedding_ids = sorted(set(embedding_ids))
        self.n_light_inputs = n_light_inputs
        self.env = EnvConditioning(mc.env, provider, rng, n_light_inputs)
        self.igi = IGI(mc.igi, rng)
        self.history = HistoryEncoder(mc.history, rng)
        self.cond_dim = self.env.out_dim + self.igi.out_dim + self.history.out_dim
        if mc.dest_in_condition:
            self.cond_dim += 2
        self.denoiser = Denoiser(mc.denoiser, self.cond_dim, rng)
        d = cfg.diffusion
        self.schedule = make_schedule(d.steps, d.beta_start, d.beta_end, d.schedule)

    @classmethod
    def for_scenes(cls, cfg: RunConfig, scenes: Sequence[SceneEnvironment], seed: int | None = None) -> CrowdModel:
        ids = sorted({i for s in scenes for i in s.embedding_ids})
        n_light = lighting_inputs(scenes[0], cfg.model.env.lighting_stats) if scenes else 1
        return cls(cfg, ids, n_light, seed)

    def zero_parameters(self):
        for _, p in self.named_parameters():
            p.data[...] = 0.0

    def condition(self, ctx: EnvContext, batch: FrameBatch, scenes: Sequence[SceneEnvironment],
                  dest_force=None) -> Value:
        """``c = F_env (+) F_social (+) F_hist``, followed by ``dest_force`` when so configured."""
        history = batch.history
        s = history[-1]
        p, v, a = s[:, 0:2], s[:, 2:4], s[:, 4:6]
        N = s.shape[0]
        graph = build_knn(p.data, self.cfg.model.igi.top_k, groups=batch.groups)
        density = None
        if self.cfg.model.env.channel == "density":
            K = self.cfg.model.env.density_k
            density = np.zeros((N, K, K))
            for g in np.unique(batch.groups):
                rows = np.flatnonzero(batch.groups == g)
                scene = scenes[int(batch.scene_index[rows[0]])]
                density[rows] = build_density_grid(p.data[rows], scene.bounds, K)
        f_env = self.env(ctx, batch.scene_index, p, v, a, density)
        bounds = ctx.bounds[batch.scene_index]
        center = (bounds[:, 0:2] + bounds[:, 2:4]) / 2
        half = (bounds[:, 2:4] - bounds[:, 0:2]) / 2
        s_norm = ad.concat([ad.div(ad.sub(p, center), half), v, a], axis=-1)
        f_social = self.igi(s_norm, p, v, a, batch.noise, graph)
        f_hist = self.history(history, batch.history_valid)
        parts = [f_env, f_social, f_hist]
        if self.cfg.model.dest_in_condition:
            if dest_force is None:
                raise ValueError("model conditions on the destination force but none was given")
            parts.append(ad.constant(dest_force))
        return ad.concat(parts, axis=-1)

    def sample(self, c: np.ndarray, rng) -> np.ndarray:
        """Draw one clean acceleration residual per row of ``c`` (no gradient)."""
        d = self.cfg.diffusion

        def fn(y, k):
            return self.denoiser(y, k, c).data

        with ad.no_grad():
            if d.sampler == "ddpm":
                return sample_ddpm(fn, len(c), self.schedule, rng)
            return sample_ddim(fn, len(c), self.schedule, d.ddim_steps, rng)

    # persistence

    def records(self) -> dict[str, np.ndarray]:
        rec = {"__config__": encode_text(json.dumps(self.cfg.to_dict(), sort_keys=True)),
               "__model__": encode_text(json.dumps({"embedding_ids": self.embedding_ids,
                                                    "n_light_inputs": self.n_light_inputs}))}
        for name, p in self.named_parameters():
            rec[f"model/{name}"] = p.data
        return rec

    def load_parameter_records(self, rec: dict[str, np.ndarray]):
        params = self.parameters()
        missing = [n for n in params if f"model/{n}" not in rec]
        if missing:
            raise KeyError(f"checkpoint lacks parameters {missing[:3]}")
        for name, p in params.items():
            arr = rec[f"model/{name}"]
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name!r}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data[...] = arr

    def save(self, path, extra: dict[str, np.ndarray] | None = None):
        rec = self.records()
        if extra:
            rec.update(extra)
        save_records(path, rec)


def model_from_records(rec: dict[str, np.ndarray], cfg: RunConfig | None = None) -> CrowdModel:
    """Rebuild a model from checkpoint records; ``cfg`` overrides the stored config.

    The stored architecture keys are always used so the parameter shapes match.
    """
    stored = from_dict(json.loads(decode_text(rec["__config__"])))
    meta = json.loads(decode_text(rec["__model__"]))
    if cfg is None:
        cfg = stored
    else:
        tree = cfg.to_dict()
        tree["model"] = stored.to_dict()["model"]
        cfg = from_dict(tree)
    model = CrowdModel(cfg, meta["embedding_ids"], int(meta["n_light_inputs"]))
    model.load_parameter_records(rec)
    return model


def load_model(path, cfg: RunConfig | None = None) -> CrowdModel:
    return model_from_records(load_records(path), cfg)
