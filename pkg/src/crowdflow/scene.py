"""Pedestrian episodes, scene environments and their file formats.

Trajectory CSV
    Header ``frame,ped_id,x,y``; positions in meters.  Frame numbers are
    integers and consecutive grid frames are ``frame_interval`` seconds apart.

Scene config (YAML)
    ::

        bounds: [xmin, ymin, xmax, ymax]        # meters, closed rectangle
        transform: [[a, b, c], [d, e, f]]       # pixel (u, v, 1) -> meters
        scene_embedding: <id>
        obstacles: [{id: <str>, position: [x, y], embedding_id: <str>}, ...]
        oois:      [{id: <str>, position: [x, y], embedding_id: <str>}, ...]
        lighting:  {image: <file.pgm>, cell_px: <int>, dims: [rows, cols]}   # dims optional

    The lighting image path is resolved relative to the config file.

Lighting image
    Binary portable graymap (P5, 8-bit).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml
from PIL import Image


class TrajectoryFormatError(ValueError):
    pass


class SceneConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PedestrianState:
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        for name in ("p", "v", "a"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(2))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.v, self.a])

    @classmethod
    def from_vector(cls, s) -> PedestrianState:
        s = np.asarray(s, dtype=np.float64)
        return cls(s[0:2], s[2:4], s[4:6])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.as_vector())))


@dataclass
class Episode:
    """Pedestrian x frame grid of kinematic states.

    ``pos``/``vel``/``acc`` have shape (P, T, 2); entries where the
    corresponding mask is false are NaN and must not be read.  ``has_pos``
    marks observed positions; ``has_vel``/``has_acc`` mark frames where the
    finite-difference derivatives exist.
    """

    ped_ids: np.ndarray
    frames: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    acc: np.ndarray
    has_pos: np.ndarray
    has_vel: np.ndarray
    has_acc: np.ndarray
    dt: float
    destinations: np.ndarray
    desired_speeds: np.ndarray = None

    def __post_init__(self):
        if self.desired_speeds is None:
            self.desired_speeds = np.full(len(self.ped_ids), np.nan)

    @property
    def n_peds(self) -> int:
        return len(self.ped_ids)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def full_valid(self) -> np.ndarray:
        """Frames where position, velocity and acceleration all exist."""
        return self.has_pos & self.has_vel & self.has_acc

    def state(self, i: int, t: int) -> Optional[PedestrianState]:
        if not self.full_valid[i, t]:
            return None
        return PedestrianState(self.pos[i, t], self.vel[i, t], self.acc[i, t])

    def states(self, t: int) -> np.ndarray:
        """(P, 6) stacked [p, v, a] at grid frame ``t`` (NaN where absent)."""
        return np.concatenate([self.pos[:, t], self.vel[:, t], self.acc[:, t]], axis=-1)

    def window(self, start: int, stop: int) -> Episode:
        sl = slice(start, stop)
        return Episode(
            ped_ids=self.ped_ids.copy(),
            frames=self.frames[sl].copy(),
            pos=self.pos[:, sl].copy(),
            vel=self.vel[:, sl].copy(),
            acc=self.acc[:, sl].copy(),
            has_pos=self.has_pos[:, sl].copy(),
            has_vel=self.has_vel[:, sl].copy(),
            has_acc=self.has_acc[:, sl].copy(),
            dt=self.dt,
            destinations=self.destinations.copy(),
            desired_speeds=self.desired_speeds.copy(),
        )

    def to_csv(self, path):
        save_trajectories(self, path)


def episode_from_positions(
    ped_ids: Sequence[int],
    frames: Sequence[int],
    pos: np.ndarray,
    has_pos: np.ndarray,
    dt: float,
) -> Episode:
    """Build an episode from positions, deriving velocity and acceleration.

    Velocity is the central difference of positions (needs both neighbours);
    acceleration is the backward difference of consecutive velocities.  With
    this pairing the kinematic integrator ``v' = v + a dt``,
    ``p' = p + v dt + a dt^2 / 2`` reproduces quadratic paths exactly.
    """
    pos = np.asarray(pos, dtype=np.float64)
    has_pos = np.asarray(has_pos, dtype=bool)
    P, T = has_pos.shape
    pos = np.where(has_pos[..., None], pos, np.nan)
    vel = np.full((P, T, 2), np.nan)
    acc = np.full((P, T, 2), np.nan)
    has_vel = np.zeros((P, T), dtype=bool)
    has_acc = np.zeros((P, T), dtype=bool)
    if T >= 3:
        has_vel[:, 1:-1] = has_pos[:, :-2] & has_pos[:, 2:] & has_pos[:, 1:-1]
        vel[:, 1:-1] = (pos[:, 2:] - pos[:, :-2]) / (2.0 * dt)
        vel[~has_vel] = np.nan
    if T >= 2:
        has_acc[:, 1:] = has_vel[:, 1:] & has_vel[:, :-1]
        acc[:, 1:] = (vel[:, 1:] - vel[:, :-1]) / dt
        acc[~has_acc] = np.nan
    destinations = np.full((P, 2), np.nan)
    for i in range(P):
        idx = np.flatnonzero(has_pos[i])
        if idx.size:
            destinations[i] = pos[i, idx[-1]]
    return Episode(
        ped_ids=np.asarray(ped_ids, dtype=np.int64),
        frames=np.asarray(frames, dtype=np.int64),
        pos=pos,
        vel=vel,
        acc=acc,
        has_pos=has_pos,
        has_vel=has_vel,
        has_acc=has_acc,
        dt=float(dt),
        destinations=destinations,
    )


def load_trajectories(path, frame_interval: float) -> Episode:
    rows: list[tuple[int, int, float, float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["frame", "ped_id", "x", "y"]:
            raise TrajectoryFormatError(f"{path}:1: expected header 'frame,ped_id,x,y', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise TrajectoryFormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                frame = int(row[0])
                pid = int(row[1])
                x, y = float(row[2]), float(row[3])
            except ValueError:
                raise TrajectoryFormatError(f"{path}:{lineno}: malformed row {row}") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise TrajectoryFormatError(f"{path}:{lineno}: non-finite position {row}")
            rows.append((frame, pid, x, y))

    last_frame: dict[int, int] = {}
    for frame, pid, _, _ in rows:
        if pid in last_frame and frame <= last_frame[pid]:
            raise TrajectoryFormatError(
                f"{path}: frames for pedestrian {pid} are not strictly increasing ({last_frame[pid]} -> {frame})"
            )
        last_frame[pid] = frame

    if not rows:
        return episode_from_positions([], [], np.zeros((0, 0, 2)), np.zeros((0, 0), bool), frame_interval)

    frames = np.array(sorted({r[0] for r in rows}), dtype=np.int64)
    ped_ids = np.array(sorted(last_frame), dtype=np.int64)
    f_index = {f: i for i, f in enumerate(frames)}
    p_index = {p: i for i, p in enumerate(ped_ids)}
    pos = np.full((len(ped_ids), len(frames), 2), np.nan)
    has = np.zeros((len(ped_ids), len(frames)), dtype=bool)
    for frame, pid, x, y in rows:
        i, t = p_index[pid], f_index[frame]
        pos[i, t] = (x, y)
        has[i, t] = True
    for i, pid in enumerate(ped_ids):
        idx = np.flatnonzero(has[i])
        if idx[-1] - idx[0] + 1 != idx.size:
            raise TrajectoryFormatError(f"{path}: pedestrian {pid} has a gap in its frame range")
    return episode_from_positions(ped_ids, frames, pos, has, frame_interval)


def save_trajectories(episode: Episode, path):
    """Write ``frame,ped_id,x,y`` rows sorted by frame then pedestrian id."""
    lines = ["frame,ped_id,x,y"]
    for t, frame in enumerate(episode.frames):
        for i, pid in enumerate(episode.ped_ids):
            if episode.has_pos[i, t]:
                x, y = episode.pos[i, t]
                lines.append(f"{int(frame)},{int(pid)},{float(x)!r},{float(y)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# lighting and density grids


@dataclass(frozen=True)
class LightingGrid:
    """Per-cell (mean, max, min) brightness in [0, 1]; ``stats`` is (rows, cols, 3)."""

    stats: np.ndarray
    cell_px: int
    image_shape: tuple[int, int]

    @property
    def dims(self) -> tuple[int, int]:
        return self.stats.shape[0], self.stats.shape[1]

    def features(self, mode: str = "mean_max_min") -> np.ndarray:
        if mode == "mean":
            return self.stats[..., 0].reshape(-1).copy()
        if mode == "mean_max_min":
            return self.stats.reshape(-1).copy()
        raise ValueError(f"unknown lighting stats mode {mode!r}")

    def __eq__(self, other):
        return (
            isinstance(other, LightingGrid)
            and self.cell_px == other.cell_px
            and tuple(self.image_shape) == tuple(other.image_shape)
            and np.array_equal(self.stats, other.stats)
        )


def build_lighting_grid(image: np.ndarray, cell_px: int, dims: tuple[int, int] | None = None) -> LightingGrid:
    """Pool a grayscale raster (values 0..255) into a brightness grid.

    By default the image is tiled by ``cell_px`` squares from the top-left;
    trailing partial cells are pooled over the pixels they actually cover,
    giving ceil(H/cell_px) rows and ceil(W/cell_px) columns.  When ``dims`` is
    given the image is instead split into that many rows and columns with
    evenly spaced (rounded) boundaries.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"lighting image must be a nonempty 2-D raster, got shape {img.shape}")
    if cell_px < 1:
        raise ValueError(f"cell_px must be >= 1, got {cell_px}")
    H, W = img.shape
    if dims is None:
        row_edges = list(range(0, H, cell_px)) + [H]
        col_edges = list(range(0, W, cell_px)) + [W]
    else:
        rows, cols = dims
        if rows < 1 or cols < 1 or rows > H or cols > W:
            raise ValueError(f"grid dims {dims} incompatible with image shape {img.shape}")
        row_edges = np.round(np.linspace(0, H, rows + 1)).astype(int).tolist()
        col_edges = np.round(np.linspace(0, W, cols + 1)).astype(int).tolist()
    R, C = len(row_edges) - 1, len(col_edges) - 1
    stats = np.zeros((R, C, 3))
    scaled = img / 255.0
    for r in range(R):
        for c in range(C):
            cell = scaled[row_edges[r]:row_edges[r + 1], col_edges[c]:col_edges[c + 1]]
            stats[r, c] = (cell.mean(), cell.max(), cell.min())
    return LightingGrid(stats=stats, cell_px=int(cell_px), image_shape=(H, W))


def read_pgm(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.format != "PPM" or im.mode != "L":
            raise SceneConfigError(f"{path}: expected an 8-bit binary graymap (P5), got {im.format}/{im.mode}")
        return np.array(im, dtype=np.uint8)


def write_pgm(path, image: np.ndarray):
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L").save(path, format="PPM")


@dataclass(frozen=True)
class Bounds:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise SceneConfigError(f"degenerate bounds {self.as_list()}")

    def as_list(self) -> list[float]:
        return [self.xmin, self.ymin, self.xmax, self.ymax]

    def as_array(self) -> np.ndarray:
        return np.array(self.as_list())

    def contains(self, p) -> bool:
        x, y = float(p[0]), float(p[1])
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax

    def normalize(self, p: np.ndarray) -> np.ndarray:
        """Map scene meters to [-1, 1] per axis."""
        p = np.asarray(p, dtype=np.float64)
        center = np.array([(self.xmin + self.xmax) / 2, (self.ymin + self.ymax) / 2])
        half = np.array([(self.xmax - self.xmin) / 2, (self.ymax - self.ymin) / 2])
        return (p - center) / half

    def translated(self, offset) -> Bounds:
        dx, dy = float(offset[0]), float(offset[1])
        return Bounds(self.xmin + dx, self.ymin + dy, self.xmax + dx, self.ymax + dy)


def build_density_grid(positions: np.ndarray, bounds: Bounds, K: int) -> np.ndarray:
    """K x K counts of positions; rows index y, columns index x.

    Cells are half-open except that the upper bound maps to the last cell;
    positions outside the bounds are clamped to the nearest cell.
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    grid = np.zeros((K, K))
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    if pts.size == 0:
        return grid
    fx = (pts[:, 0] - bounds.xmin) / (bounds.xmax - bounds.xmin)
    fy = (pts[:, 1] - bounds.ymin) / (bounds.ymax - bounds.ymin)
    cx = np.clip(np.floor(fx * K), 0, K - 1).astype(int)
    cy = np.clip(np.floor(fy * K), 0, K - 1).astype(int)
    np.add.at(grid, (cy, cx), 1.0)
    return grid


@dataclass(frozen=True)
class Obstacle:
    id: str
    position: tuple[float, float]
    embedding_id: str


@dataclass(frozen=True)
class ObjectOfInterest:
    id: str
    position: tuple[float, float]
    embedding_id: str


@dataclass
class SceneEnvironment:
    bounds: Bounds
    lighting: LightingGrid
    lighting_image: np.ndarray
    obstacles: list[Obstacle] = field(default_factory=list)
    oois: list[ObjectOfInterest] = field(default_factory=list)
    transform: np.ndarray = field(default_factory=lambda: np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
    scene_embedding: str = "scene"
    lighting_dims: Optional[tuple[int, int]] = None

    def __post_init__(self):
        self.transform = np.asarray(self.transform, dtype=np.float64)
        if self.transform.shape != (2, 3):
            raise SceneConfigError(f"transform must be 2x3, got shape {self.transform.shape}")
        if abs(np.linalg.det(self.transform[:, :2])) < 1e-12:
            raise SceneConfigError("pixel-to-meter transform is not invertible")
        for kind, entities in (("obstacle", self.obstacles), ("ooi", self.oois)):
            for e in entities:
                if not self.bounds.contains(e.position):
                    raise SceneConfigError(f"{kind} {e.id!r} at {list(e.position)} lies outside scene bounds")

    @property
    def embedding_ids(self) -> list[str]:
        ids = {self.scene_embedding}
        ids.update(o.embedding_id for o in self.obstacles)
        ids.update(o.embedding_id for o in self.oois)
        return sorted(ids)

    def obstacle_positions(self) -> np.ndarray:
        return np.array([o.position for o in self.obstacles], dtype=np.float64).reshape(-1, 2)

    def ooi_positions(self) -> np.ndarray:
        return np.array([o.position for o in self.oois], dtype=np.float64).reshape(-1, 2)

    def pixel_to_meter(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        return uv @ self.transform[:, :2].T + self.transform[:, 2]

    def to_dict(self, image_name: str) -> dict:
        lighting = {"image": image_name, "cell_px": self.lighting.cell_px}
        if self.lighting_dims is not None:
            lighting["dims"] = [int(d) for d in self.lighting_dims]
        return {
            "bounds": [float(b) for b in self.bounds.as_list()],
            "transform": [[float(x) for x in row] for row in self.transform],
            "scene_embedding": self.scene_embedding,
            "obstacles": [
                {"id": o.id, "position": [float(o.position[0]), float(o.position[1])], "embedding_id": o.embedding_id}
                for o in self.obstacles
            ],
            "oois": [
                {"id": o.id, "position": [float(o.position[0]), float(o.position[1])], "embedding_id": o.embedding_id}
                for o in self.oois
            ],
            "lighting": lighting,
        }

    def __eq__(self, other):
        if not isinstance(other, SceneEnvironment):
            return NotImplemented
        return (
            self.bounds == other.bounds
            and self.lighting == other.lighting
            and np.array_equal(self.lighting_image, other.lighting_image)
            and self.obstacles == other.obstacles
            and self.oois == other.oois
            and np.array_equal(self.transform, other.transform)
            and self.scene_embedding == other.scene_embedding
            and (tuple(self.lighting_dims) if self.lighting_dims else None)
            == (tuple(other.lighting_dims) if other.lighting_dims else None)
        )


_SCENE_KEYS = {"bounds", "transform", "scene_embedding", "obstacles", "oois", "lighting"}
_ENTITY_KEYS = {"id", "position", "embedding_id"}


def _parse_entities(raw, cls, kind: str, source) -> list:
    out = []
    for j, item in enumerate(raw or []):
        if not isinstance(item, dict) or set(item) != _ENTITY_KEYS:
            raise SceneConfigError(f"{source}: {kind}[{j}] must have exactly the keys {sorted(_ENTITY_KEYS)}")
        pos = item["position"]
        if not (isinstance(pos, (list, tuple)) and len(pos) == 2):
            raise SceneConfigError(f"{source}: {kind} {item['id']!r} position must be [x, y]")
        out.append(cls(str(item["id"]), (float(pos[0]), float(pos[1])), str(item["embedding_id"])))
    return out


def scene_from_dict(cfg: dict, image: np.ndarray, source="<scene>") -> SceneEnvironment:
    if not isinstance(cfg, dict):
        raise SceneConfigError(f"{source}: scene config must be a mapping")
    unknown = set(cfg) - _SCENE_KEYS
    if unknown:
        raise SceneConfigError(f"{source}: unknown scene keys {sorted(unknown)}")
    for key in ("bounds", "lighting"):
        if key not in cfg:
            raise SceneConfigError(f"{source}: missing required key {key!r}")
    bounds = Bounds(*[float(b) for b in cfg["bounds"]])
    light = cfg["lighting"]
    cell_px = int(light.get("cell_px", 110))
    dims = tuple(int(d) for d in light["dims"]) if light.get("dims") else None
    grid = build_lighting_grid(image, cell_px, dims)
    return SceneEnvironment(
        bounds=bounds,
        lighting=grid,
        lighting_image=np.asarray(image, dtype=np.uint8),
        obstacles=_parse_entities(cfg.get("obstacles"), Obstacle, "obstacle", source),
        oois=_parse_entities(cfg.get("oois"), ObjectOfInterest, "ooi", source),
        transform=np.array(cfg.get("transform", [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), dtype=np.float64),
        scene_embedding=str(cfg.get("scene_embedding", "scene")),
        lighting_dims=dims,
    )


def load_scene(config_path, lighting_image_path=None) -> SceneEnvironment:
    config_path = Path(config_path)
    try:
        cfg = yaml.safe_load(config_path.read_text())
    except yaml.YAMLError as exc:
        raise SceneConfigError(f"{config_path}: invalid YAML: {exc}") from None
    if not isinstance(cfg, dict) or "lighting" not in cfg:
        raise SceneConfigError(f"{config_path}: missing required key 'lighting'")
    if lighting_image_path is None:
        name = cfg["lighting"].get("image")
        if not name:
            raise SceneConfigError(f"{config_path}: lighting.image not set")
        lighting_image_path = config_path.parent / name
    lighting_image_path = Path(lighting_image_path)
    if not lighting_image_path.is_file():
        raise SceneConfigError(f"{config_path}: lighting image {str(lighting_image_path)!r} not found")
    image = read_pgm(lighting_image_path)
    return scene_from_dict(cfg, image, source=config_path)


def save_scene(scene: SceneEnvironment, config_path, image_name: str | None = None):
    """Write the YAML config and its P5 lighting image next to it."""
    config_path = Path(config_path)
    image_name = image_name or config_path.with_suffix(".pgm").name
    write_pgm(config_path.parent / image_name, scene.lighting_image)
    config_path.write_text(yaml.safe_dump(scene.to_dict(image_name), sort_keys=False))
