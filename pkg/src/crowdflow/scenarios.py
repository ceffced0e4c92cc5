"""Synthetic crowd scenarios with a handcrafted force simulator.

The generator is deliberately richer than the learned model's fixed physics:
besides goal relaxation it applies pedestrian repulsion, obstacle repulsion
with tangential steering, attraction toward objects of interest, neighbour
velocity alignment, soft walls and optional acceleration noise.  These extra
forces are what the conditioning channels have to recover.

Forces (accelerations, m/s^2)::

    goal       (v0 e - v) / tau                            tau = 0.5 s
    peds       A exp((r - d) / B) n w(phi),  d < 3         A = 2, B = 0.3, r = 0.5
               w = lam + (1 - lam)(1 + cos phi) / 2        lam = 0.3
    obstacles  A_o exp((R + 0.3 - d) / B_o) n              A_o = 3, B_o = 0.2, R = 0.5
               + lateral steering when the obstacle is ahead within 3 m
    walls      A_w (exp((0.4 - d) / 0.1) - 1),  d < 0.4    A_w = 1
    align      kappa (mean v of same-heading neighbours within 1.5 m - v)
    noise      noise * N(0, I)

``agents`` is the number of concurrently walking pedestrians: whenever one
exits at its goal a fresh pedestrian (new id) enters at the start edge.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import make_rng
from .scene import (Bounds, Episode, ObjectOfInterest, Obstacle, SceneEnvironment, build_lighting_grid,
                    episode_from_positions, save_scene, save_trajectories)

TEMPLATES = ("corridor", "crossing", "obstacle-slalom", "ooi-attractor")
MIN_FRAMES = 37  # skip frames + history length + rollout horizon with the default config

DT = 0.1
TAU = 0.5
PED_A, PED_B, PED_R, PED_LAMBDA, PED_RANGE = 2.0, 0.3, 0.5, 0.3, 3.0
OBS_A, OBS_B, OBS_RADIUS = 3.0, 0.2, 0.5
STEER_GAIN, STEER_RANGE = 1.5, 3.0
WALL_A, WALL_RANGE = 1.0, 0.4
ALIGN_GAIN, ALIGN_RANGE = 0.3, 1.5
VISIT_RADIUS = 1.0
EXIT_RADIUS = 0.5
IMAGE_SHAPE = (120, 160)
CELL_PX = 40


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    template: str
    agents: int = 20
    frames: int = 600
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.template not in TEMPLATES:
            raise ScenarioError(f"unknown template {self.template!r}; choose from {list(TEMPLATES)}")
        if self.agents < 1:
            raise ScenarioError(f"agent count must be >= 1, got {self.agents}")
        if self.frames < MIN_FRAMES:
            raise ScenarioError(f"duration must be >= {MIN_FRAMES} frames, got {self.frames}")
        if self.noise < 0:
            raise ScenarioError(f"noise level must be >= 0, got {self.noise}")


@dataclass
class _Layout:
    bounds: Bounds
    obstacles: np.ndarray  # (O, 2)
    oois: np.ndarray  # (Q, 2)
    streams: list  # (start_box, goal_box): each box (xmin, ymin, xmax, ymax)


def _random_points(rng, n, box, min_sep, avoid=(), avoid_sep=0.0, tries=1000):
    pts = []
    for _ in range(tries):
        if len(pts) == n:
            break
        c = rng.uniform(box[:2], box[2:])
        if all(np.linalg.norm(c - q) >= min_sep for q in pts) and all(
            np.linalg.norm(c - q) >= avoid_sep for q in avoid
        ):
            pts.append(c)
    if len(pts) < n:
        raise ScenarioError(f"could not place {n} entities with separation {min_sep}")
    return np.array(pts).reshape(-1, 2)


def _layout(template: str, rng) -> _Layout:
    none = np.zeros((0, 2))
    if template == "corridor":
        b = Bounds(0.0, 0.0, 20.0, 4.0)
        left, right = (0.5, 0.8, 0.5, 3.2), (19.5, 0.8, 19.5, 3.2)
        return _Layout(b, none, none, [(left, right), (right, left)])
    if template == "crossing":
        b = Bounds(0.0, 0.0, 14.0, 14.0)
        west, east = (0.5, 5.0, 0.5, 9.0), (13.5, 5.0, 13.5, 9.0)
        south, north = (5.0, 0.5, 9.0, 0.5), (5.0, 13.5, 9.0, 13.5)
        return _Layout(b, none, none, [(west, east), (south, north)])
    if template == "obstacle-slalom":
        b = Bounds(0.0, 0.0, 20.0, 8.0)
        n_obs = int(rng.integers(4, 7))
        obs = _random_points(rng, n_obs, np.array([4.0, 1.5, 16.0, 6.5]), 2.0)
        left, right = (0.5, 1.0, 0.5, 7.0), (19.5, 1.0, 19.5, 7.0)
        return _Layout(b, obs, none, [(left, right), (right, left)])
    if template == "ooi-attractor":
        b = Bounds(0.0, 0.0, 20.0, 10.0)
        ooi = _random_points(rng, 1, np.array([7.0, 2.0, 13.0, 8.0]), 0.0)
        obs = _random_points(rng, 2, np.array([4.0, 1.5, 16.0, 8.5]), 2.0, avoid=ooi, avoid_sep=2.5)
        left, right = (0.5, 1.0, 0.5, 9.0), (19.5, 1.0, 19.5, 9.0)
        return _Layout(b, obs, ooi, [(left, right), (right, left)])
    raise ScenarioError(f"unknown template {template!r}; choose from {list(TEMPLATES)}")


def _lighting_image(rng) -> np.ndarray:
    H, W = IMAGE_SHAPE
    v, u = np.mgrid[0:H, 0:W]
    img = 60.0 + 120.0 * u / (W - 1)
    for _ in range(3):
        cu, cv = rng.uniform(0, W), rng.uniform(0, H)
        s = rng.uniform(15, 40)
        img += rng.uniform(-60, 60) * np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2 * s * s))
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


class _Agent:
    __slots__ = ("pid", "p", "v", "goal", "v0", "heading", "visited", "track", "start_frame")

    def __init__(self, pid, p, goal, v0, heading, start_frame, has_ooi):
        self.pid = pid
        self.p = p
        self.goal = goal
        self.v0 = v0
        self.heading = heading
        self.v = v0 * heading
        self.visited = not has_ooi
        self.track = []
        self.start_frame = start_frame


def _wall_force(p, b: Bounds) -> np.ndarray:
    f = np.zeros(2)
    for axis, lo, hi in ((0, b.xmin, b.xmax), (1, b.ymin, b.ymax)):
        d_lo, d_hi = p[axis] - lo, hi - p[axis]
        if d_lo < WALL_RANGE:
            f[axis] += WALL_A * (np.exp((WALL_RANGE - d_lo) / 0.1) - 1.0)
        if d_hi < WALL_RANGE:
            f[axis] -= WALL_A * (np.exp((WALL_RANGE - d_hi) / 0.1) - 1.0)
    return f


def _accelerations(agents: list[_Agent], lay: _Layout, noise: float, rng) -> np.ndarray:
    N = len(agents)
    P = np.array([a.p for a in agents]).reshape(N, 2)
    V = np.array([a.v for a in agents]).reshape(N, 2)
    acc = np.zeros((N, 2))
    for i, ag in enumerate(agents):
        target = ag.goal if ag.visited else lay.oois[0]
        delta = target - ag.p
        dist = np.linalg.norm(delta)
        e = delta / dist if dist > 0 else np.zeros(2)
        f = (ag.v0 * e - ag.v) / TAU
        speed = np.linalg.norm(ag.v)
        v_dir = ag.v / speed if speed > 0 else e
        # pedestrian repulsion, weighted toward what lies ahead
        diff = ag.p - P
        d = np.linalg.norm(diff, axis=1)
        near = (d > 0) & (d < PED_RANGE)
        if near.any():
            n = diff[near] / d[near, None]
            cos_phi = -(n @ v_dir)
            w = PED_LAMBDA + (1 - PED_LAMBDA) * (1 + cos_phi) / 2
            f += np.sum((PED_A * np.exp((PED_R - d[near]) / PED_B) * w)[:, None] * n, axis=0)
        # obstacles: radial barrier plus steering around those ahead
        for o in lay.obstacles:
            r = ag.p - o
            do = np.linalg.norm(r)
            if do > 0:
                f += OBS_A * np.exp((OBS_RADIUS + 0.3 - do) / OBS_B) * r / do
            ahead = (o - ag.p) @ v_dir
            lat_axis = np.array([-v_dir[1], v_dir[0]])
            lateral = (o - ag.p) @ lat_axis
            if 0 < ahead < STEER_RANGE and abs(lateral) < OBS_RADIUS + 0.6:
                side = -1.0 if lateral >= 0 else 1.0
                f += STEER_GAIN * (1 - ahead / STEER_RANGE) * side * lat_axis
        f += _wall_force(ag.p, lay.bounds)
        # alignment with same-heading neighbours
        close = near & (d < ALIGN_RANGE) & ((V @ v_dir) > 0)
        if close.any():
            f += ALIGN_GAIN * (V[close].mean(axis=0) - ag.v)
        acc[i] = f
    if noise > 0:
        acc += noise * rng.standard_normal((N, 2))
    return acc


def _spawn(rng, lay: _Layout, stream: int, agents, pid, frame, has_ooi, along=None):
    start_box, goal_box = lay.streams[stream]
    s0, s1 = np.array(start_box[:2]), np.array(start_box[2:])
    g0, g1 = np.array(goal_box[:2]), np.array(goal_box[2:])
    for _ in range(30):
        start = rng.uniform(s0, s1)
        goal = rng.uniform(g0, g1)
        heading = (goal - start) / np.linalg.norm(goal - start)
        if along is not None:
            start = start + along * (goal - start)
            heading = (goal - start) / np.linalg.norm(goal - start)
        clear = all(np.linalg.norm(start - a.p) >= 0.8 for a in agents)
        clear = clear and all(np.linalg.norm(start - o) >= OBS_RADIUS + 0.6 for o in lay.obstacles)
        if clear:
            v0 = rng.uniform(1.0, 1.4)
            return _Agent(pid, start, goal, v0, heading, frame, has_ooi)
    return None


def gen_scenario(spec: ScenarioSpec) -> tuple[Episode, SceneEnvironment]:
    """Simulate ``spec`` and return the ground-truth episode and its scene."""
    rng = make_rng(spec.seed, 7)
    lay = _layout(spec.template, rng)
    image = _lighting_image(rng)
    has_ooi = len(lay.oois) > 0
    slots: list[_Agent | None] = [None] * spec.agents
    finished: list[_Agent] = []
    next_pid = 0
    active: list[_Agent] = []
    for s in range(spec.agents):
        along = None if spec.agents == 1 else rng.uniform(0.0, 0.6)
        ag = _spawn(rng, lay, s % len(lay.streams), active, next_pid, 0, has_ooi, along)
        if ag is not None:
            next_pid += 1
            slots[s] = ag
            active.append(ag)
    for frame in range(spec.frames):
        live = [a for a in slots if a is not None]
        for a in live:
            a.track.append((frame, a.p.copy()))
        if frame == spec.frames - 1:
            break
        if live:
            acc = _accelerations(live, lay, spec.noise, rng)
            for a, acc_i in zip(live, acc):
                a.p = a.p + a.v * DT + 0.5 * acc_i * DT * DT
                a.v = a.v + acc_i * DT
                speed = np.linalg.norm(a.v)
                if speed > 1.5 * a.v0:
                    a.v = a.v * (1.5 * a.v0 / speed)
                if not a.visited and np.linalg.norm(a.p - lay.oois[0]) < VISIT_RADIUS:
                    a.visited = True
        for s, a in enumerate(slots):
            if a is None:
                live_now = [x for x in slots if x is not None]
                new = _spawn(rng, lay, s % len(lay.streams), live_now, next_pid, frame + 1, has_ooi)
                if new is not None:
                    next_pid += 1
                    slots[s] = new
                continue
            passed = (a.goal - a.p) @ a.heading < 0
            if (a.visited and np.linalg.norm(a.goal - a.p) < EXIT_RADIUS) or passed \
                    or not lay.bounds.contains(a.p):
                finished.append(a)
                slots[s] = None
    finished.extend(a for a in slots if a is not None)
    finished = [a for a in finished if a.track]
    finished.sort(key=lambda a: a.pid)
    T = spec.frames
    pos = np.full((len(finished), T, 2), np.nan)
    has = np.zeros((len(finished), T), dtype=bool)
    for i, a in enumerate(finished):
        for frame, p in a.track:
            pos[i, frame] = p
            has[i, frame] = True
    episode = episode_from_positions([a.pid for a in finished], np.arange(T), pos, has, DT)
    scene = _scene(spec, lay, image)
    return episode, scene


def _scene(spec: ScenarioSpec, lay: _Layout, image: np.ndarray) -> SceneEnvironment:
    b = lay.bounds
    H, W = image.shape
    transform = np.array([[(b.xmax - b.xmin) / W, 0.0, b.xmin], [0.0, (b.ymax - b.ymin) / H, b.ymin]])
    obstacles = [Obstacle(f"obstacle-{j}", (float(o[0]), float(o[1])), "obstacle") for j, o in enumerate(lay.obstacles)]
    oois = [ObjectOfInterest(f"kiosk-{j}", (float(o[0]), float(o[1])), "kiosk") for j, o in enumerate(lay.oois)]
    return SceneEnvironment(
        bounds=b,
        lighting=build_lighting_grid(image, CELL_PX),
        lighting_image=image,
        obstacles=obstacles,
        oois=oois,
        transform=transform,
        scene_embedding=f"scene-{spec.template}",
    )


def write_scenario(spec: ScenarioSpec, out_dir) -> dict[str, Path]:
    """Generate and write ``trajectories.csv``, ``scene.yaml`` and ``lighting.pgm``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    episode, scene = gen_scenario(spec)
    paths = {"trajectories": out / "trajectories.csv", "scene": out / "scene.yaml", "lighting": out / "lighting.pgm"}
    save_trajectories(episode, paths["trajectories"])
    save_scene(scene, paths["scene"], image_name=paths["lighting"].name)
    return paths
