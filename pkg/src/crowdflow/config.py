"""Run configuration: typed defaults, YAML loading and dotted overrides.

Every key is validated against the dataclass schema below; unknown keys are
rejected.  Defaults follow the published implementation settings where those
exist (neighbourhood size, diffusion steps, sampler, GNN depth, history
length, batch size, optimizer, learning-rate decay, desired-speed window).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    obstacles: bool = True
    ooi: bool = True
    channel: str = "lighting"  # lighting | density | none
    lighting_stats: str = "mean_max_min"  # mean_max_min | mean
    embedding_dim: int = 16
    scene_proj_dim: int = 16  # 0 keeps the raw scene embedding
    d1: int = 16
    d2: int = 16
    d_light: int = 8
    d_env: int = 16
    hidden: int = 32
    density_k: int = 16
    relative_values: bool = True
    rel_scale: float = 1.0
    embeddings: str = "learned"  # learned | file
    embedding_file: Optional[str] = None


@dataclass(frozen=True)
class IGIConfig:
    top_k: int = 6
    layers: int = 3
    hidden: int = 32
    d_social: int = 16
    noise_dim: int = 2
    use_rij: bool = True
    use_sim1: bool = True
    use_sim2: bool = True
    use_sim3: bool = True


@dataclass(frozen=True)
class HistoryConfig:
    length: int = 8
    hidden: int = 32
    input_dim: int = 16
    relative: bool = True


@dataclass(frozen=True)
class DenoiserConfig:
    width: int = 64
    depth: int = 2
    time_dim: int = 16
    cond_dim: int = 32


@dataclass(frozen=True)
class ModelConfig:
    dest_in_condition: bool = False  # append the destination-force vector to the conditioning
    env: EnvConfig = field(default_factory=EnvConfig)
    igi: IGIConfig = field(default_factory=IGIConfig)
    history: HistoryConfig = field(default_factory=HistoryConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)


@dataclass(frozen=True)
class DiffusionConfig:
    steps: int = 70
    beta_start: float = 1e-4
    beta_end: float = 0.05
    schedule: str = "linear"  # linear | cosine
    sampler: str = "ddim"  # ddim | ddpm
    ddim_steps: int = 50


@dataclass(frozen=True)
class RepulsionConfig:
    enabled: bool = False
    strength: float = 1.0
    sigma: float = 0.5


@dataclass(frozen=True)
class PhysicsConfig:
    m: float = 1.0
    mu: float = 0.5
    freeze_radius: float = 0.0
    repulsion: RepulsionConfig = field(default_factory=RepulsionConfig)


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 160
    batch_size: int = 32
    lr: float = 1e-5
    weight_decay: float = 1e-5
    lr_gamma: float = 0.999
    lr_step: int = 10
    horizon: int = 4
    lambda_a: float = 1.0
    lambda_p: float = 1.0
    skip_frames: int = 25
    segment_stride: int = 1
    max_batches_per_epoch: int = 0  # 0 = all
    checkpoint_every: int = 10
    eval_every: int = 0  # 0 = final epoch only


@dataclass(frozen=True)
class MetricsConfig:
    ot_epsilon: float = 0.01
    ot_debiased: bool = False
    mmd_bandwidth: float = 0.0  # 0 = median heuristic
    d_thres: float = 0.5


@dataclass(frozen=True)
class SourceConfig:
    trajectories: Optional[str] = None
    scene: Optional[str] = None
    template: Optional[str] = None
    agents: int = 20
    frames: int = 600
    noise: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class DataConfig:
    frame_interval: float = 0.1
    val_fraction: float = 0.2
    sources: tuple[SourceConfig, ...] = ()


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def to_dict(self) -> dict:
        return to_dict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **dotted) -> RunConfig:
        """Return a copy with ``section__key=value`` style or dotted-key overrides applied."""
        tree = self.to_dict()
        for key, value in dotted.items():
            _set_dotted(tree, key.replace("__", "."), value)
        return from_dict(tree)


_CHOICES = {
    ("model", "env", "channel"): {"lighting", "density", "none"},
    ("model", "env", "lighting_stats"): {"mean_max_min", "mean"},
    ("model", "env", "embeddings"): {"learned", "file"},
    ("diffusion", "schedule"): {"linear", "cosine"},
    ("diffusion", "sampler"): {"ddim", "ddpm"},
}


def to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [to_dict(x) for x in obj]
    return obj


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if origin is tuple:
        (inner, _) = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return tuple(_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value))
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported schema type {tp}")


def _build(cls, raw, path: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        where = path or "<root>"
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name in names:
        if name in raw:
            key_path = f"{path}.{name}" if path else name
            kwargs[name] = _coerce(raw[name], hints[name], key_path)
    obj = cls(**kwargs)
    return obj


def _validate(cfg: RunConfig):
    tree = cfg.to_dict()
    for keys, allowed in _CHOICES.items():
        node = tree
        for k in keys:
            node = node[k]
        if node not in allowed:
            raise ConfigError(f"{'.'.join(keys)}: must be one of {sorted(allowed)}, got {node!r}")
    t = cfg.training
    if t.lambda_a < 0 or t.lambda_p < 0 or (t.lambda_a == 0 and t.lambda_p == 0):
        raise ConfigError("training: lambda_a and lambda_p must be >= 0 and not both zero")
    if t.horizon < 1:
        raise ConfigError(f"training.horizon: must be >= 1, got {t.horizon}")
    if t.batch_size < 1 or t.epochs < 0:
        raise ConfigError("training: batch_size must be >= 1 and epochs >= 0")
    d = cfg.diffusion
    if not (0 < d.beta_start <= d.beta_end < 1):
        raise ConfigError(f"diffusion: need 0 < beta_start <= beta_end < 1, got {d.beta_start}, {d.beta_end}")
    if not (1 <= d.ddim_steps <= d.steps):
        raise ConfigError(f"diffusion.ddim_steps: must be in [1, {d.steps}], got {d.ddim_steps}")
    if cfg.model.igi.layers < 1:
        raise ConfigError("model.igi.layers: must be >= 1")
    if cfg.model.env.embeddings == "file" and not cfg.model.env.embedding_file:
        raise ConfigError("model.env.embedding_file: required when embeddings = 'file'")
    for i, src in enumerate(cfg.data.sources):
        has_files = src.trajectories is not None
        if has_files == (src.template is not None):
            raise ConfigError(f"data.sources[{i}]: give either trajectories+scene or a template")
        if has_files and src.scene is None:
            raise ConfigError(f"data.sources[{i}]: trajectories without a scene config")
    if not (0 < cfg.data.val_fraction < 1):
        raise ConfigError("data.val_fraction: must lie in (0, 1)")
    if cfg.metrics.d_thres <= 0:
        raise ConfigError("metrics.d_thres: must be > 0")


def from_dict(raw: dict) -> RunConfig:
    cfg = _build(RunConfig, raw, "")
    _validate(cfg)
    return cfg


def _set_dotted(tree: dict, dotted: str, value):
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"override {dotted!r}: unknown key {k!r}")
        node = node[k]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError(f"override {dotted!r}: unknown key {keys[-1]!r}")
    node[keys[-1]] = value


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Load a YAML config (or defaults when ``path`` is None) and apply ``key=value`` overrides.

    Relative source paths are resolved against the config file's directory.
    """
    tree = to_dict(RunConfig())
    if path is not None:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(tree, raw, "")
        for src in tree["data"]["sources"]:
            for key in ("trajectories", "scene"):
                if isinstance(src, dict) and src.get(key):
                    p = Path(src[key])
                    if not p.is_absolute():
                        src[key] = str(path.parent / p)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, text = item.split("=", 1)
        _set_dotted(tree, key.strip(), yaml.safe_load(text))
    return from_dict(tree)


def _merge(base: dict, raw: dict, path: str):
    for key, value in raw.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"{path or '<root>'}: unknown keys ['{key}']")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, where)
        elif key == "sources" and isinstance(value, list):
            merged = []
            for i, item in enumerate(value):
                entry = to_dict(SourceConfig())
                if not isinstance(item, dict):
                    raise ConfigError(f"{where}[{i}]: expected a mapping")
                _merge(entry, item, f"{where}[{i}]")
                merged.append(entry)
            base[key] = merged
        else:
            base[key] = value


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
