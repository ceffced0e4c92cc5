"""Rollout training, closed-loop simulation and validation.

Training segments start at a grid frame ``t`` inside the training split; the
model observes the ground-truth window ending at ``t`` and then rolls out
``horizon`` frames on its own predictions.  At every rollout frame a random
diffusion step ``k`` is drawn, the ground-truth residual acceleration
(ground truth minus the destination force at the predicted state) is noised
to ``y_k``, and the denoiser's clean estimate plus the destination force is
the predicted acceleration fed to the integrator and the loss.

Training randomness is keyed by ``(seed, epoch)`` and simulation randomness
by ``(seed, pedestrian id, frame)``, so a checkpoint only needs the epoch
counter to resume bit-exactly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .config import RunConfig, SourceConfig, dump_config, from_dict
from .container import decode_text, encode_text, load_records, save_records
from .model import CrowdModel, FrameBatch, model_from_records
from .nn import Adam, make_rng
from .physics import (DestinationParams, RepulsionParams, destination_force, destination_force_value,
                      estimate_desired_speeds, integrate, repulsion_correction)
from .scenarios import ScenarioSpec, gen_scenario
from .scene import Episode, SceneEnvironment, load_scene, load_trajectories

STREAM_TRAIN = 2
STREAM_SIM = 3


class TrainingError(RuntimeError):
    pass


@dataclass
class Source:
    episode: Episode
    scene: SceneEnvironment
    name: str

    @property
    def train_end(self) -> int:
        return self._train_end

    def split(self, val_fraction: float):
        self._train_end = int(math.floor((1.0 - val_fraction) * self.episode.n_frames))
        return self


def load_source(src: SourceConfig, cfg: RunConfig) -> Source:
    if src.template is not None:
        spec = ScenarioSpec(src.template, src.agents, src.frames, src.noise, src.seed)
        episode, scene = gen_scenario(spec)
        name = f"{src.template}/seed{src.seed}"
    else:
        episode = load_trajectories(src.trajectories, cfg.data.frame_interval)
        scene = load_scene(src.scene)
        name = str(src.trajectories)
    episode.desired_speeds = estimate_desired_speeds(episode, cfg.training.skip_frames)
    return Source(episode, scene, name).split(cfg.data.val_fraction)


def load_sources(cfg: RunConfig) -> list[Source]:
    if not cfg.data.sources:
        raise TrainingError("config lists no data sources")
    return [load_source(s, cfg) for s in cfg.data.sources]


# loss


def weighted_loss(a_hat, a, p_hat, p, valid: np.ndarray, lambda_a: float, lambda_p: float) -> Value:
    """``(1/|valid|) sum lambda_a |a_hat - a|^2 + lambda_p |p_hat - p|^2`` over valid rows."""
    total, count = weighted_loss_terms(a_hat, a, p_hat, p, valid, lambda_a, lambda_p)
    if count == 0:
        raise TrainingError("no valid (pedestrian, frame) pairs in the segment")
    return total * (1.0 / count)


def weighted_loss_terms(a_hat, a, p_hat, p, valid, lambda_a, lambda_p) -> tuple[Value, int]:
    valid = np.asarray(valid, dtype=bool)
    a = np.where(valid[:, None], np.nan_to_num(np.asarray(a, dtype=np.float64)), 0.0)
    p = np.where(valid[:, None], np.nan_to_num(np.asarray(p, dtype=np.float64)), 0.0)
    mask = np.broadcast_to(valid[:, None], (len(valid), 2))
    da = ad.where(mask, ad.sub(a_hat, a), 0.0)
    dp = ad.where(mask, ad.sub(p_hat, p), 0.0)
    total = ad.vsum(ad.square(da)) * lambda_a + ad.vsum(ad.square(dp)) * lambda_p
    return total, int(valid.sum())


# segments


@dataclass(frozen=True)
class Segment:
    source: int
    t: int  # last observed grid frame


def make_segments(sources: Sequence[Source], cfg: RunConfig) -> list[Segment]:
    L = cfg.model.history.length
    H = cfg.training.horizon
    out = []
    for s, src in enumerate(sources):
        fv = src.episode.full_valid
        first = cfg.training.skip_frames + L - 1
        last = src.train_end - 1 - H
        for t in range(first, last + 1, cfg.training.segment_stride):
            alive = fv[:, t]
            if alive.any() and (fv[alive, t + 1:t + H + 1]).any():
                out.append(Segment(s, t))
    return out


def rollout_loss(segments: Sequence[Segment], model: CrowdModel, sources: Sequence[Source], cfg: RunConfig,
                 rng: np.random.Generator, ctx=None) -> tuple[Value, int]:
    """Batched multi-frame rollout loss; returns ``(loss, number of valid pairs)``."""
    L = cfg.model.history.length
    H = cfg.training.horizon
    tc = cfg.training
    scenes = [s.scene for s in sources]
    if ctx is None:
        ctx = model.env.prepare(scenes)
    rows_src, rows_ped, rows_t, rows_grp = [], [], [], []
    for g, seg in enumerate(segments):
        peds = np.flatnonzero(sources[seg.source].episode.full_valid[:, seg.t])
        rows_src.append(np.full(len(peds), seg.source))
        rows_ped.append(peds)
        rows_t.append(np.full(len(peds), seg.t))
        rows_grp.append(np.full(len(peds), g))
    src_idx = np.concatenate(rows_src)
    ped_idx = np.concatenate(rows_ped)
    t_idx = np.concatenate(rows_t)
    groups = np.concatenate(rows_grp)
    N = len(ped_idx)
    dt = sources[0].episode.dt

    def stack_state(offset):
        state = np.zeros((N, 6))
        ok = np.zeros(N, dtype=bool)
        for s in np.unique(src_idx):
            sel = np.flatnonzero(src_idx == s)
            ep = sources[s].episode
            tt = t_idx[sel] + offset
            inside = (tt >= 0) & (tt < ep.n_frames)
            tt_c = np.clip(tt, 0, ep.n_frames - 1)
            v = ep.full_valid[ped_idx[sel], tt_c] & inside
            st = np.concatenate([ep.pos[ped_idx[sel], tt_c], ep.vel[ped_idx[sel], tt_c], ep.acc[ped_idx[sel], tt_c]],
                                axis=-1)
            state[sel] = np.where(v[:, None], np.nan_to_num(st), 0.0)
            ok[sel] = v
        return state, ok

    history: list[Value] = []
    valid: list[np.ndarray] = []
    for lag in range(L - 1, -1, -1):
        st, ok = stack_state(-lag)
        history.append(Value(st))
        valid.append(ok)

    dest = np.zeros((N, 2))
    speed = np.zeros(N)
    for s in np.unique(src_idx):
        sel = src_idx == s
        dest[sel] = sources[s].episode.destinations[ped_idx[sel]]
        speed[sel] = np.nan_to_num(sources[s].episode.desired_speeds[ped_idx[sel]])
    dparams = DestinationParams(cfg.physics.m, cfg.physics.mu)
    schedule = model.schedule

    total = None
    count = 0
    for tau in range(1, H + 1):
        target, target_ok = stack_state(tau)
        alive = np.ones(N, dtype=bool) if tau == 1 else stack_state(tau - 1)[1]
        # pedestrians whose ground truth has ended keep rolling but interact with nobody
        grp = np.where(alive, groups, -1 - np.arange(N))
        noise = rng.standard_normal((N, cfg.model.igi.noise_dim))
        scene_index = src_idx
        batch = FrameBatch(history[-L:], valid[-L:], scene_index, grp, noise)
        cur = history[-1]
        p, v = cur[:, 0:2], cur[:, 2:4]
        f_dest = destination_force_value(p, v, dest, speed, dparams)
        c = model.condition(ctx, batch, scenes, f_dest)
        y0 = np.where(target_ok[:, None], target[:, 4:6] - f_dest.data, 0.0)
        k = rng.integers(1, schedule.K + 1, size=N)
        ab = schedule.alpha_bar(k)[:, None]
        y_k = np.sqrt(ab) * y0 + np.sqrt(1.0 - ab) * rng.standard_normal((N, 2))
        a_hat = model.denoiser(y_k, k, c) + f_dest
        p_new, v_new = integrate(p, v, a_hat, dt)
        term, n = weighted_loss_terms(a_hat, target[:, 4:6], p_new, target[:, 0:2], target_ok,
                                      tc.lambda_a, tc.lambda_p)
        total = term if total is None else total + term
        count += n
        history.append(ad.concat([p_new, v_new, a_hat], axis=-1))
        valid.append(np.ones(N, dtype=bool))
    if count == 0:
        raise TrainingError("no valid (pedestrian, frame) pairs in the batch")
    return total * (1.0 / count), count


# simulation


@dataclass
class Start:
    """A pedestrian entering the simulation at grid index ``frame`` (relative to the run)."""

    ped_id: int
    frame: int
    history: np.ndarray  # (L, 6), oldest first, ending at the entry state
    history_valid: np.ndarray  # (L,)
    destination: np.ndarray
    desired_speed: float
    exit_frame: int | None = None  # last simulated frame (inclusive)


class RowStreams:
    """Per-row generators: row ``i`` of every draw comes from ``gens[i]``."""

    def __init__(self, gens: Sequence[np.random.Generator]):
        self.gens = list(gens)

    def standard_normal(self, shape):
        shape = tuple(shape)
        if shape[0] != len(self.gens):
            raise ValueError(f"draw of {shape[0]} rows from {len(self.gens)} streams")
        if not self.gens:
            return np.zeros(shape)
        return np.stack([g.standard_normal(shape[1:]) for g in self.gens])


def starts_from_episode(ep: Episode, start: int, stop: int, L: int) -> list[Start]:
    """Entries for every pedestrian with a full-valid frame in ``[start, stop)``.

    A pedestrian enters at its first such frame with its ground-truth state
    and observation window and leaves after the last frame of that run.
    """
    fv = ep.full_valid
    out = []
    for i in range(ep.n_peds):
        idx = np.flatnonzero(fv[i, start:stop]) + start
        if idx.size == 0:
            continue
        entry = int(idx[0])
        run_end = entry
        while run_end + 1 < stop and fv[i, run_end + 1]:
            run_end += 1
        hist = np.zeros((L, 6))
        hv = np.zeros(L, dtype=bool)
        for j in range(L):
            t = entry - (L - 1) + j
            if 0 <= t < ep.n_frames and fv[i, t]:
                hist[j] = np.concatenate([ep.pos[i, t], ep.vel[i, t], ep.acc[i, t]])
                hv[j] = True
        speed = ep.desired_speeds[i]
        out.append(Start(int(ep.ped_ids[i]), entry - start, hist, hv, ep.destinations[i].copy(),
                         float(speed) if np.isfinite(speed) else float(np.linalg.norm(ep.vel[i, entry])),
                         run_end - start))
    return out


def simulate(model: CrowdModel, scene: SceneEnvironment, starts: Sequence[Start], n_frames: int, seed: int,
             dt: float = 0.1, frame_numbers: Sequence[int] | None = None) -> Episode:
    """Closed-loop rollout of ``n_frames`` frames."""
    cfg = model.cfg
    L = cfg.model.history.length
    frames = np.arange(n_frames) if frame_numbers is None else np.asarray(frame_numbers, dtype=np.int64)
    P = len(starts)
    pos = np.full((P, n_frames, 2), np.nan)
    vel = np.full((P, n_frames, 2), np.nan)
    acc = np.full((P, n_frames, 2), np.nan)
    has = np.zeros((P, n_frames), dtype=bool)
    dparams = DestinationParams(cfg.physics.m, cfg.physics.mu)
    rep = cfg.physics.repulsion
    rparams = RepulsionParams(rep.strength, rep.sigma)
    buffers: list[list[np.ndarray] | None] = [None] * P
    masks: list[list[bool] | None] = [None] * P
    frozen = np.zeros(P, dtype=bool)
    exits = np.array([n_frames - 1 if s.exit_frame is None else min(s.exit_frame, n_frames - 1) for s in starts],
                     dtype=int)
    dest = np.array([s.destination for s in starts], dtype=np.float64).reshape(P, 2)
    speed = np.array([s.desired_speed for s in starts], dtype=np.float64)
    ids = np.array([s.ped_id for s in starts], dtype=np.int64)
    with ad.no_grad():
        ctx = model.env.prepare([scene])
        for f in range(n_frames):
            for i, s in enumerate(starts):
                if s.frame == f:
                    buffers[i] = [np.asarray(h, dtype=np.float64) for h in s.history]
                    masks[i] = [bool(m) for m in s.history_valid]
            active = [i for i in range(P) if buffers[i] is not None and starts[i].frame <= f <= exits[i]]
            for i in active:
                st = buffers[i][-1]
                pos[i, f], vel[i, f], acc[i, f] = st[0:2], st[2:4], st[4:6]
                has[i, f] = True
            moving = np.array([i for i in active if f < exits[i]], dtype=int)
            if f == n_frames - 1 or moving.size == 0:
                continue
            hist = [Value(np.stack([buffers[i][j - L] for i in moving])) for j in range(L)]
            hmask = [np.array([masks[i][j - L] for i in moving]) for j in range(L)]
            gens = [make_rng(seed, STREAM_SIM, int(ids[i]), int(frames[f])) for i in moving]
            streams = RowStreams(gens)
            noise = streams.standard_normal((len(moving), cfg.model.igi.noise_dim))
            batch = FrameBatch(hist, hmask, np.zeros(len(moving), dtype=int), np.zeros(len(moving), dtype=int), noise)
            cur = hist[-1].data
            p, v = cur[:, 0:2], cur[:, 2:4]
            f_dest = destination_force(p, v, dest[moving], speed[moving], dparams)
            c = model.condition(ctx, batch, [scene], f_dest).data
            a_hat = model.sample(c, streams) + f_dest
            if rep.enabled:
                a_hat = a_hat + repulsion_correction(p, None, rparams)
            p_new, v_new = integrate(p, v, a_hat, dt)
            if cfg.physics.freeze_radius > 0:
                near = np.linalg.norm(dest[moving] - p, axis=-1) < cfg.physics.freeze_radius
                frozen[moving[near]] = True
            stop = frozen[moving]
            p_new = np.where(stop[:, None], p, p_new)
            v_new = np.where(stop[:, None], 0.0, v_new)
            a_hat = np.where(stop[:, None], 0.0, a_hat)
            if not np.all(np.isfinite(p_new)):
                raise TrainingError(f"non-finite state in simulation at frame {int(frames[f])}")
            for row, i in enumerate(moving):
                buffers[i].append(np.concatenate([p_new[row], v_new[row], a_hat[row]]))
                masks[i].append(True)
                if len(buffers[i]) > L:
                    buffers[i] = buffers[i][-L:]
                    masks[i] = masks[i][-L:]
    return Episode(ped_ids=ids, frames=frames, pos=pos, vel=vel, acc=acc, has_pos=has, has_vel=has.copy(),
                   has_acc=has.copy(), dt=dt, destinations=dest, desired_speeds=speed)


def simulate_window(model: CrowdModel, source: Source, start: int, stop: int, seed: int) -> tuple[Episode, Episode]:
    """Simulate grid frames ``[start, stop)`` of a source; returns ``(pred, gt)``."""
    ep = source.episode
    starts = starts_from_episode(ep, start, stop, model.cfg.model.history.length)
    pred = simulate(model, source.scene, starts, stop - start, seed, ep.dt, ep.frames[start:stop])
    gt = ep.window(start, stop)
    return pred, gt


def validation_errors(model: CrowdModel, sources: Sequence[Source], seed: int) -> tuple[float, int]:
    """Summed displacement error and pair count over every source's validation window."""
    total, count = 0.0, 0
    for src in sources:
        pred, gt = simulate_window(model, src, src.train_end, src.episode.n_frames, seed)
        index = {int(p): i for i, p in enumerate(gt.ped_ids)}
        for i, pid in enumerate(pred.ped_ids):
            j = index[int(pid)]
            ok = pred.has_pos[i] & gt.has_pos[j]
            if ok.any():
                total += float(np.linalg.norm(pred.pos[i, ok] - gt.pos[j, ok], axis=-1).sum())
                count += int(ok.sum())
    return total, count


def validation_mae(model: CrowdModel, sources: Sequence[Source], seed: int) -> float:
    total, count = validation_errors(model, sources, seed)
    if count == 0:
        raise TrainingError("validation windows contain no pedestrians")
    return total / count


# training loop


@dataclass
class EpochResult:
    epoch: int
    loss: float
    val_mae: float | None
    lr: float


class Trainer:
    def __init__(self, cfg: RunConfig, sources: Sequence[Source], model: CrowdModel | None = None):
        self.cfg = cfg
        self.sources = list(sources)
        self.model = model or CrowdModel.for_scenes(cfg, [s.scene for s in self.sources], seed=cfg.seed)
        t = cfg.training
        self.opt = Adam(self.model.parameters(), lr=t.lr, weight_decay=t.weight_decay)
        self.epoch = 0
        self.segments = make_segments(self.sources, cfg)
        if not self.segments:
            raise TrainingError("no training segments: episodes are shorter than skip_frames + history + horizon")

    def lr_at(self, epoch: int) -> float:
        t = self.cfg.training
        return t.lr * t.lr_gamma ** (epoch // t.lr_step)

    def run_epoch(self) -> float:
        """Train one epoch; returns the mean batch loss."""
        cfg = self.cfg
        t = cfg.training
        epoch = self.epoch + 1
        self.opt.lr = self.lr_at(self.epoch)
        rng = make_rng(cfg.seed, STREAM_TRAIN, epoch)
        order = rng.permutation(len(self.segments))
        batches = [order[i:i + t.batch_size] for i in range(0, len(order), t.batch_size)]
        if t.max_batches_per_epoch:
            batches = batches[:t.max_batches_per_epoch]
        losses = []
        for b in batches:
            segs = [self.segments[i] for i in b]
            self.opt.zero_grad()
            loss, _ = rollout_loss(segs, self.model, self.sources, cfg, rng)
            value = loss.item()
            if not math.isfinite(value):
                first = segs[0]
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} in batch starting with segment "
                    f"source={self.sources[first.source].name} frame={int(self.sources[first.source].episode.frames[first.t])}"
                )
            loss.backward()
            self.opt.step()
            losses.append(value)
        self.epoch = epoch
        return float(np.mean(losses))

    def validate(self) -> float:
        return validation_mae(self.model, self.sources, self.cfg.seed)

    def records(self) -> dict[str, np.ndarray]:
        rec = self.model.records()
        rec.update(self.opt.state_records())
        rec["train/epoch"] = np.array([float(self.epoch)])
        rec["train/seed"] = np.array([float(self.cfg.seed)])
        rec["train/run_config"] = encode_text(json.dumps(self.cfg.to_dict(), sort_keys=True))
        return rec

    def save(self, path):
        save_records(path, self.records())

    def load(self, path):
        rec = load_records(path)
        self.model.load_parameter_records(rec)
        self.opt.load_state_records(rec)
        self.epoch = int(rec["train/epoch"][0])


def checkpoint_config(path) -> RunConfig:
    rec = load_records(path)
    key = "train/run_config" if "train/run_config" in rec else "__config__"
    return from_dict(json.loads(decode_text(rec[key])))


def load_checkpoint_model(path, cfg: RunConfig | None = None) -> CrowdModel:
    return model_from_records(load_records(path), cfg)


METRICS_HEADER = ["epoch", "loss", "val_mae", "lr"]


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def train(cfg: RunConfig, sources: Sequence[Source] | None = None, out_dir=None,
          resume=None, trainer: Trainer | None = None) -> Iterator[EpochResult]:
    """Run training, yielding one result per epoch.

    With ``out_dir`` the run writes ``config.yaml``, ``metrics.csv`` and
    ``checkpoint-XXXX.esdf`` files (every ``checkpoint_every`` epochs, the
    initial state and the final epoch) plus ``last.esdf``.
    """
    if trainer is None:
        trainer = Trainer(cfg, load_sources(cfg) if sources is None else sources)
    out = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        trainer.load(resume)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(dump_config(cfg))
        metrics_path = out / "metrics.csv"
        if resume is None or not metrics_path.exists():
            metrics_path.write_text(",".join(METRICS_HEADER) + "\n")
        else:
            _truncate_metrics(metrics_path, trainer.epoch)
        if resume is None:
            trainer.save(out / "checkpoint-0000.esdf")
    t = cfg.training
    while trainer.epoch < t.epochs:
        lr = trainer.lr_at(trainer.epoch)
        loss = trainer.run_epoch()
        e = trainer.epoch
        do_eval = e == t.epochs or (t.eval_every and e % t.eval_every == 0)
        val = trainer.validate() if do_eval else None
        result = EpochResult(e, loss, val, lr)
        if out is not None:
            with open(out / "metrics.csv", "a", newline="") as fh:
                fh.write(",".join([str(e), _fmt(loss), _fmt(val), _fmt(lr)]) + "\n")
            if e % t.checkpoint_every == 0 or e == t.epochs:
                trainer.save(out / f"checkpoint-{e:04d}.esdf")
        yield result
    if out is not None:
        trainer.save(out / "last.esdf")


def _truncate_metrics(path: Path, epoch: int):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    kept = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= epoch]
    path.write_text("\n".join(",".join(r) for r in kept) + "\n")


def run_training(cfg: RunConfig, sources: Sequence[Source] | None = None, out_dir=None,
                 resume=None) -> tuple[Trainer, list[EpochResult]]:
    """Drive :func:`train` to completion and return the trainer and all epoch results."""
    trainer = Trainer(cfg, load_sources(cfg) if sources is None else sources)
    results = list(train(cfg, out_dir=out_dir, resume=resume, trainer=trainer))
    return trainer, results
