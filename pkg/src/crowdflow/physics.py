"""Classical force terms applied outside the learned model.

The destination term is treated directly as an acceleration (unit mass
convention): ``a_dest = m (v' n - v) / mu``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .scene import Episode, PedestrianState


@dataclass(frozen=True)
class DestinationParams:
    m: float = 1.0
    mu: float = 0.5

    def __post_init__(self):
        if not np.all(np.asarray(self.m) > 0):
            raise ValueError(f"destination coefficient m must be > 0, got {self.m}")
        if not self.mu > 0:
            raise ValueError(f"relaxation coefficient mu must be > 0, got {self.mu}")


@dataclass(frozen=True)
class RepulsionParams:
    strength: float = 1.0
    sigma: float = 0.5

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"repulsion length scale sigma must be > 0, got {self.sigma}")


def destination_force(p, v, destination, desired_speed, params: DestinationParams = DestinationParams()) -> np.ndarray:
    """Vectorized over leading axes; zero direction when already at the destination."""
    p = np.asarray(p, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    delta = np.asarray(destination, dtype=np.float64) - p
    dist = np.linalg.norm(delta, axis=-1, keepdims=True)
    n = np.where(dist > 0, delta / np.where(dist > 0, dist, 1.0), 0.0)
    speed = np.asarray(desired_speed, dtype=np.float64)[..., None]
    m = np.asarray(params.m, dtype=np.float64)
    if m.ndim:
        m = m[..., None]
    force = m * (speed * n - v) / params.mu
    return np.where(dist > 0, force, 0.0)


def destination_force_value(p: Value, v: Value, destination: np.ndarray, desired_speed: np.ndarray,
                            params: DestinationParams) -> Value:
    """Differentiable batch version of :func:`destination_force` for (N, 2) states."""
    delta = ad.sub(destination, p)
    n = ad.safe_normalize(delta, eps=0.0)
    at_goal = np.linalg.norm(destination - p.data, axis=-1, keepdims=True) <= 0.0
    m = np.asarray(params.m, dtype=np.float64)
    if m.ndim:
        m = m[:, None]
    force = (n * np.asarray(desired_speed)[:, None] - v) * (m / params.mu)
    return ad.where(np.broadcast_to(~at_goal, force.shape), force, 0.0)


def destination_step_force(state: PedestrianState, destination, desired_speed: float,
                           params: DestinationParams = DestinationParams()) -> np.ndarray:
    return destination_force(state.p, state.v, destination, desired_speed, params)


class DesiredSpeedError(ValueError):
    pass


def estimate_desired_speed(episode: Episode, ped: int, skip_frames: int = 25) -> float:
    """Mean speed over the pedestrian's valid velocity frames in the first ``skip_frames`` frames.

    Falls back to every valid frame when fewer than two lie in that window.
    """
    valid = episode.has_vel[ped]
    speeds = np.linalg.norm(episode.vel[ped], axis=-1)
    window = valid.copy()
    window[skip_frames:] = False
    if window.sum() >= 2:
        return float(speeds[window].mean())
    if valid.sum() == 0:
        raise DesiredSpeedError(f"pedestrian {int(episode.ped_ids[ped])} has no valid velocity frames")
    return float(speeds[valid].mean())


def estimate_desired_speeds(episode: Episode, skip_frames: int = 25) -> np.ndarray:
    out = np.full(episode.n_peds, np.nan)
    for i in range(episode.n_peds):
        if episode.has_vel[i].any():
            out[i] = estimate_desired_speed(episode, i, skip_frames)
    return out


def integrate(p, v, a_hat, dt: float):
    """Kinematic update; works on arrays or autodiff Values of matching shape.

    Returns ``(p', v')`` with ``v' = v + a dt`` and
    ``p' = p + v dt + a dt^2 / 2`` (``v`` is the velocity before the update).
    """
    if dt < 0:
        raise ValueError(f"time step must be >= 0, got {dt}")
    v_new = v + a_hat * dt
    p_new = p + v * dt + a_hat * (0.5 * dt * dt)
    return p_new, v_new


def integrate_step(state: PedestrianState, a_hat, dt: float) -> PedestrianState:
    a_hat = np.asarray(a_hat, dtype=np.float64)
    if not np.all(np.isfinite(a_hat)):
        raise ValueError(f"non-finite acceleration {a_hat.tolist()}")
    p, v = integrate(state.p, state.v, a_hat, dt)
    return PedestrianState(p, v, a_hat)


def repulsion_correction(positions: np.ndarray, valid: np.ndarray | None = None,
                         params: RepulsionParams = RepulsionParams(),
                         groups: np.ndarray | None = None) -> np.ndarray:
    """Sum of ``strength * exp(-d_ij / sigma) * n_ij`` over other valid pedestrians.

    ``n_ij`` is the unit vector from j to i; coincident pairs contribute zero.
    ``groups`` restricts interactions to pedestrians sharing a group label.
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    N = len(pos)
    valid = np.ones(N, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    out = np.zeros((N, 2))
    if N < 2:
        return out
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    ok = valid[:, None] & valid[None, :] & (dist > 0)
    if groups is not None:
        groups = np.asarray(groups)
        ok &= groups[:, None] == groups[None, :]
    safe = np.where(ok, dist, 1.0)
    weight = np.where(ok, params.strength * np.exp(-safe / params.sigma) / safe, 0.0)
    out = (weight[..., None] * diff).sum(axis=1)
    out[~valid] = 0.0
    return out
