"""Procedurally generated top-down racing track with pixel observations.

The reward contract follows the classic car-racing task: -0.1 per frame plus
``tile_reward_total / N`` for every track tile visited for the first time.
The starting tile is marked visited at reset and its credit is paid with the
first step, so a full lap of ``T`` frames always scores ``total - 0.1 * T``.

Physics is a kinematic point car; only observation size, action space and
reward structure are meant to match the original game.
"""

from __future__ import annotations

import base64
import json
import math
import subprocess
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from .rng import derive_rng

FRAME_SIZE = 64

TRACK_COLOR = (0.42, 0.42, 0.42)
GRASS_COLOR = (0.40, 0.80, 0.40)
GRASS_ALT_COLOR = (0.36, 0.72, 0.36)
OUTSIDE_COLOR = (0.20, 0.45, 0.20)
CAR_COLOR = (0.80, 0.00, 0.00)
_PALETTE = np.array([TRACK_COLOR, GRASS_COLOR, GRASS_ALT_COLOR, OUTSIDE_COLOR, CAR_COLOR], np.float32)


class TrackGenerationError(RuntimeError):
    pass


class UsageError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    # geometry
    field_radius: float = 80.0
    n_checkpoints: int = 12
    radius_min: float = 0.55
    radius_max: float = 1.0
    tile_spacing: float = 1.5
    track_width: float = 10.0
    playfield: float = 100.0  # half-size of the square field
    grid_resolution: float = 0.5
    max_attempts: int = 20
    # car
    dt: float = 0.1
    gas_accel: float = 20.0
    brake_decel: float = 10.0
    drag: float = 0.5
    offroad_drag_factor: float = 5.0
    offroad_friction: float = 8.0  # constant deceleration on grass, m/s^2
    steer_rate: float = 0.15  # rad per meter travelled at full lock
    steer_saturation_speed: float = 8.0
    # episode
    frame_cap: int = 1000
    frame_penalty: float = 0.1
    tile_reward_total: float = 100.0
    # camera
    view_meters: float = 48.0
    car_width: float = 2.0
    car_length: float = 4.0
    grass_checker: float = 8.0


@dataclass
class TrackSpec:
    seed: int
    control_points: np.ndarray  # (12, 2)
    centerline: np.ndarray  # (N + 1, 2), closed: last == first
    tiles: np.ndarray  # (N, 4, 2) quads, counter-clockwise
    track_width: float
    grid: np.ndarray  # (G, G) int16 tile index per cell, -1 off track
    grid_origin: float
    grid_resolution: float

    @property
    def n_tiles(self) -> int:
        return len(self.tiles)

    def __post_init__(self):
        # one-cell border of -1 lets lookups clip instead of masking
        self._padded = np.pad(self.grid, 1, constant_values=-1)

    def lookup(self, x, y) -> np.ndarray:
        """Tile index under points ``(x, y)`` (broadcast arrays), -1 off track."""
        hi = self.grid.shape[0] + 1
        ix = np.clip(np.floor((x - self.grid_origin) / self.grid_resolution) + 1, 0, hi).astype(np.intp)
        iy = np.clip(np.floor((y - self.grid_origin) / self.grid_resolution) + 1, 0, hi).astype(np.intp)
        return self._padded[iy, ix]

    def tile_at(self, points: np.ndarray) -> np.ndarray:
        """Tile index under each ``(..., 2)`` point, -1 when off track."""
        points = np.asarray(points, np.float64)
        return self.lookup(points[..., 0], points[..., 1])


@dataclass
class CarState:
    x: float
    y: float
    heading: float
    speed: float = 0.0
    on_track: bool = True

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass
class EnvState:
    track: TrackSpec
    car: CarState
    visited: np.ndarray
    config: EnvConfig = field(default_factory=EnvConfig)
    frame_index: int = 0
    tiles_visited: int = 1
    pending_tiles: int = 1  # visited but not yet rewarded (the start tile)
    done: bool = False
    done_reason: str | None = None


# -- track generation ------------------------------------------------------------


def _catmull_rom_loop(points: np.ndarray, samples_per_segment: int = 64) -> np.ndarray:
    p = points
    n = len(p)
    t = np.arange(samples_per_segment) / samples_per_segment
    t2, t3 = t * t, t * t * t
    out = []
    for i in range(n):
        p0, p1, p2, p3 = p[i - 1], p[i], p[(i + 1) % n], p[(i + 2) % n]
        seg = 0.5 * (
            np.outer(2 * np.ones_like(t), p1)
            + np.outer(t, p2 - p0)
            + np.outer(t2, 2 * p0 - 5 * p1 + 4 * p2 - p3)
            + np.outer(t3, -p0 + 3 * p1 - 3 * p2 + p3)
        )
        out.append(seg)
    return np.concatenate(out)


def _resample_closed(dense: np.ndarray, spacing: float) -> np.ndarray:
    closed = np.vstack([dense, dense[:1]])
    seglen = np.hypot(*np.diff(closed, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seglen)])
    n = max(3, int(round(s[-1] / spacing)))
    targets = np.arange(n) * (s[-1] / n)
    x = np.interp(targets, s, closed[:, 0])
    y = np.interp(targets, s, closed[:, 1])
    return np.column_stack([x, y])


def _tile_quads(center: np.ndarray, width: float) -> np.ndarray:
    tangent = np.roll(center, -1, axis=0) - np.roll(center, 1, axis=0)
    tangent /= np.hypot(*tangent.T)[:, None]
    normal = np.column_stack([-tangent[:, 1], tangent[:, 0]])  # left of travel
    left = center + 0.5 * width * normal
    right = center - 0.5 * width * normal
    return np.stack([right, np.roll(right, -1, axis=0), np.roll(left, -1, axis=0), left], axis=1)


def polygon_area(quads: np.ndarray) -> np.ndarray:
    """Signed shoelace area of ``(..., k, 2)`` polygons (positive when CCW)."""
    x, y = quads[..., 0], quads[..., 1]
    return 0.5 * np.sum(x * np.roll(y, -1, axis=-1) - np.roll(x, -1, axis=-1) * y, axis=-1)


def _quads_convex(quads: np.ndarray) -> bool:
    e = np.roll(quads, -1, axis=1) - quads
    en = np.roll(e, -1, axis=1)
    cross = e[..., 0] * en[..., 1] - e[..., 1] * en[..., 0]
    return bool(np.all(cross > 0))


def _road_overlaps(center: np.ndarray, width: float, spacing: float) -> bool:
    n = len(center)
    d = np.hypot(*(center[:, None, :] - center[None, :, :]).transpose(2, 0, 1))
    idx = np.arange(n)
    gap = np.abs(idx[:, None] - idx[None, :])
    gap = np.minimum(gap, n - gap)
    far_along = gap * spacing > 2.0 * width
    return bool(np.any(d[far_along] < 1.5 * width))


def _rasterize(quads: np.ndarray, origin: float, res: float, size: int) -> np.ndarray:
    grid = np.full((size, size), -1, np.int16)
    lo = np.floor((quads.min(axis=1) - origin) / res).astype(np.int64)
    hi = np.floor((quads.max(axis=1) - origin) / res).astype(np.int64)
    span = int((hi - lo).max()) + 1
    off = np.arange(span)
    ix = lo[:, 0, None, None] + off[None, None, :]
    iy = lo[:, 1, None, None] + off[None, :, None]
    ix, iy = np.broadcast_arrays(ix, iy)
    cx = origin + (ix + 0.5) * res
    cy = origin + (iy + 0.5) * res
    inside = np.ones(cx.shape, bool)
    for k in range(4):
        a = quads[:, k, None, None, :]
        b = quads[:, (k + 1) % 4, None, None, :]
        cross = (b[..., 0] - a[..., 0]) * (cy - a[..., 1]) - (b[..., 1] - a[..., 1]) * (cx - a[..., 0])
        inside &= cross >= 0
    inside &= (ix >= 0) & (ix < size) & (iy >= 0) & (iy < size)
    tile_ids = np.broadcast_to(np.arange(len(quads))[:, None, None], inside.shape)
    grid[iy[inside], ix[inside]] = tile_ids[inside]
    return grid


def generate_track(seed: int, config: EnvConfig = EnvConfig()) -> TrackSpec:
    """Closed track from ``config.n_checkpoints`` jittered radial checkpoints.

    Rejected layouts (folded tiles, road touching itself, leaving the field)
    are retried with a derived seed; after ``max_attempts`` failures a
    :class:`TrackGenerationError` is raised.
    """
    for attempt in range(config.max_attempts):
        rng = derive_rng(seed, "track", attempt)
        k = config.n_checkpoints
        phase = rng.uniform(0, 2 * math.pi / k)
        angles = phase + 2 * math.pi * np.arange(k) / k
        radii = config.field_radius * rng.uniform(config.radius_min, config.radius_max, k)
        control = np.column_stack([radii * np.cos(angles), radii * np.sin(angles)])
        center = _resample_closed(_catmull_rom_loop(control), config.tile_spacing)
        quads = _tile_quads(center, config.track_width)
        if np.any(polygon_area(quads) <= 0) or not _quads_convex(quads):
            continue
        if np.abs(quads).max() > config.playfield - config.track_width:
            continue
        spacing = float(np.hypot(*(center[1] - center[0])))
        if _road_overlaps(center, config.track_width, spacing):
            continue
        size = int(math.ceil(2 * config.playfield / config.grid_resolution))
        grid = _rasterize(quads, -config.playfield, config.grid_resolution, size)
        return TrackSpec(
            seed=seed,
            control_points=control,
            centerline=np.vstack([center, center[:1]]),
            tiles=quads,
            track_width=config.track_width,
            grid=grid,
            grid_origin=-config.playfield,
            grid_resolution=config.grid_resolution,
        )
    raise TrackGenerationError(f"no valid track for seed {seed} after {config.max_attempts} attempts")


# -- dynamics --------------------------------------------------------------------


def tile_reward(new_tiles: int, n_tiles: int, config: EnvConfig = EnvConfig()) -> float:
    return -config.frame_penalty + config.tile_reward_total * new_tiles / n_tiles


def _wrap(angle: float) -> float:
    return (angle + math.pi) % (2 * math.pi) - math.pi


def reset(track_seed: int, config: EnvConfig = EnvConfig()) -> tuple[EnvState, np.ndarray]:
    track = generate_track(track_seed, config)
    c0, c1 = track.centerline[0], track.centerline[1]
    heading = math.atan2(c1[1] - c0[1], c1[0] - c0[0])
    mid = 0.5 * (c0 + c1)
    car = CarState(float(mid[0]), float(mid[1]), _wrap(heading))
    visited = np.zeros(track.n_tiles, bool)
    visited[0] = True
    state = EnvState(track=track, car=car, visited=visited, config=config)
    return state, render(state)


def step(state: EnvState, action) -> tuple[EnvState, np.ndarray, float, bool]:
    """Advance one frame; returns ``(new_state, frame, reward, done)``.

    ``action`` is anything with ``steer``/``gas``/``brake`` attributes or a
    3-sequence in that order. The input state is left untouched.
    """
    if state.done:
        raise UsageError("step() called on a finished episode; call reset()")
    cfg = state.config
    steer, gas, brake = _unpack_action(action)
    car = state.car

    drag = cfg.drag * (1.0 if car.on_track else cfg.offroad_drag_factor)
    accel = gas * cfg.gas_accel - brake * cfg.brake_decel - drag * car.speed
    if not car.on_track:
        accel -= cfg.offroad_friction
    speed = max(0.0, car.speed + accel * cfg.dt)
    heading = _wrap(car.heading + steer * cfg.steer_rate * min(speed, cfg.steer_saturation_speed) * cfg.dt)
    x = car.x + speed * cfg.dt * math.cos(heading)
    y = car.y + speed * cfg.dt * math.sin(heading)

    track = state.track
    dist = speed * cfg.dt
    n_samples = max(1, int(math.ceil(dist / (0.5 * track.grid_resolution))))
    frac = np.arange(1, n_samples + 1) / n_samples
    tiles = track.lookup(car.x + frac * (x - car.x), car.y + frac * (y - car.y))
    touched = np.unique(tiles[tiles >= 0])
    fresh = touched[~state.visited[touched]]
    visited = state.visited
    if len(fresh):
        visited = visited.copy()
        visited[fresh] = True

    rewarded = len(fresh) + state.pending_tiles
    reward = tile_reward(rewarded, track.n_tiles, cfg)
    tiles_visited = state.tiles_visited + len(fresh)
    frame_index = state.frame_index + 1
    new_car = CarState(x, y, heading, speed, bool(tiles[-1] >= 0))

    done_reason = None
    if tiles_visited == track.n_tiles:
        done_reason = "completed"
    elif abs(x) > cfg.playfield or abs(y) > cfg.playfield:
        done_reason = "off_field"
    elif frame_index >= cfg.frame_cap:
        done_reason = "frame_cap"

    new_state = replace(
        state,
        car=new_car,
        visited=visited,
        frame_index=frame_index,
        tiles_visited=tiles_visited,
        pending_tiles=0,
        done=done_reason is not None,
        done_reason=done_reason,
    )
    return new_state, render(new_state), reward, new_state.done


def _unpack_action(action) -> tuple[float, float, float]:
    if hasattr(action, "steer"):
        s, g, b = action.steer, action.gas, action.brake
    else:
        s, g, b = action
    s, g, b = float(s), float(g), float(b)
    if not all(math.isfinite(v) for v in (s, g, b)):
        raise UsageError(f"non-finite action {(s, g, b)}")
    return min(1.0, max(-1.0, s)), min(1.0, max(0.0, g)), min(1.0, max(0.0, b))


# -- rendering -------------------------------------------------------------------

_CAMERA_CACHE: dict = {}


def _camera(cfg: EnvConfig):
    key = (cfg.view_meters, cfg.car_width, cfg.car_length)
    if key not in _CAMERA_CACHE:
        mpp = cfg.view_meters / FRAME_SIZE
        centers = (np.arange(FRAME_SIZE) + 0.5 - FRAME_SIZE / 2) * mpp
        lateral = np.broadcast_to(centers[None, :], (FRAME_SIZE, FRAME_SIZE)).ravel()
        forward = np.broadcast_to(-centers[:, None], (FRAME_SIZE, FRAME_SIZE)).ravel()
        car_mask = (np.abs(lateral) <= cfg.car_width / 2) & (np.abs(forward) <= cfg.car_length / 2)
        _CAMERA_CACHE[key] = (lateral, forward, car_mask)
    return _CAMERA_CACHE[key]


def render(state: EnvState) -> np.ndarray:
    """64x64x3 float32 frame, camera on the car with its heading pointing up.

    Visited and unvisited tiles look the same.
    """
    cfg, car, track = state.config, state.car, state.track
    lateral, forward, car_mask = _camera(cfg)
    ch, sh = math.cos(car.heading), math.sin(car.heading)
    # right-hand vector of the car is (sin, -cos)
    wx = car.x + forward * ch + lateral * sh
    wy = car.y + forward * sh - lateral * ch
    tiles = track.lookup(wx, wy)
    checker = (np.floor(wx / cfg.grass_checker) + np.floor(wy / cfg.grass_checker)).astype(np.intp) & 1
    cls = np.where(tiles >= 0, 0, 1 + checker)
    cls[(np.abs(wx) > cfg.playfield) | (np.abs(wy) > cfg.playfield)] = 3
    cls[car_mask] = 4
    return _PALETTE[cls].reshape(FRAME_SIZE, FRAME_SIZE, 3)


class TrackEnv:
    """Stateful wrapper over :func:`reset` / :func:`step`."""

    def __init__(self, config: EnvConfig = EnvConfig()):
        self.config = config
        self.state: EnvState | None = None

    def reset(self, seed: int) -> np.ndarray:
        self.state, frame = reset(seed, self.config)
        return frame

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self.state is None:
            raise UsageError("reset() must be called before step()")
        self.state, frame, reward, done = step(self.state, action)
        return frame, reward, done

    @property
    def n_tiles(self) -> int:
        return self.state.track.n_tiles

    @property
    def tiles_visited(self) -> int:
        return self.state.tiles_visited

    @property
    def car_position(self) -> tuple[float, float]:
        return self.state.car.position


# -- scripted driver -------------------------------------------------------------


def centerline_driver(state: EnvState, lookahead: float = 6.0, target_speed: float = 10.0,
                      corner_speed: float = 7.0) -> tuple[float, float, float]:
    """Pure-pursuit controller that follows the centerline; a test oracle."""
    track, car = state.track, state.car
    center = track.centerline[:-1]
    n = len(center)
    nearest = int(np.argmin(np.hypot(center[:, 0] - car.x, center[:, 1] - car.y)))
    spacing = float(np.hypot(*(center[1] - center[0])))
    ahead = max(1, int(round(lookahead / spacing)))
    target = center[(nearest + ahead) % n]
    desired = math.atan2(target[1] - car.y, target[0] - car.x)
    err = _wrap(desired - car.heading)
    steer = max(-1.0, min(1.0, 3.0 * err))
    far = center[(nearest + 4 * ahead) % n]
    bend = abs(_wrap(math.atan2(far[1] - target[1], far[0] - target[0]) - desired))
    want = corner_speed if bend > 0.5 else target_speed
    if car.speed < want:
        return steer, 1.0, 0.0
    return steer, 0.0, min(1.0, 0.2 * (car.speed - want))


# -- external environment protocol ----------------------------------------------


def encode_obs(frame: np.ndarray) -> str:
    return base64.b64encode(np.asarray(frame, "<f4").tobytes()).decode("ascii")


def decode_obs(text: str) -> np.ndarray:
    data = np.frombuffer(base64.b64decode(text), dtype="<f4")
    if data.size != FRAME_SIZE * FRAME_SIZE * 3:
        raise ValueError(f"observation has {data.size} values, expected {FRAME_SIZE * FRAME_SIZE * 3}")
    return data.astype(np.float32).reshape(FRAME_SIZE, FRAME_SIZE, 3)


def downsample_area(image: np.ndarray, size: int = FRAME_SIZE) -> np.ndarray:
    """Area-average an ``(H, W, C)`` image to ``(size, size, C)``.

    Used by adapters that drive an external 96x96 renderer.
    """
    def weights(n_in):
        scale = n_in / size
        lo = np.arange(size)[:, None] * scale
        hi = lo + scale
        j = np.arange(n_in)[None, :]
        overlap = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0, None)
        return overlap / scale

    img = np.asarray(image, np.float64)
    wy, wx = weights(img.shape[0]), weights(img.shape[1])
    return np.einsum("ij,jkc,lk->ilc", wy, img, wx).astype(np.float32)


def serve(stdin=None, stdout=None, config: EnvConfig = EnvConfig()) -> None:
    """Serve the native environment over the JSON-lines protocol."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    env = TrackEnv(config)
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
            if msg["cmd"] == "reset":
                frame = env.reset(int(msg["seed"]))
                reply = {"obs": encode_obs(frame), "n_tiles": env.n_tiles}
            elif msg["cmd"] == "step":
                frame, reward, done = env.step(msg["action"])
                reply = {"obs": encode_obs(frame), "reward": reward, "done": done}
            elif msg["cmd"] == "close":
                break
            else:
                reply = {"error": f"unknown command {msg['cmd']!r}"}
        except Exception as exc:  # reported to the client, server keeps running
            reply = {"error": f"{type(exc).__name__}: {exc}"}
        stdout.write(json.dumps(reply) + "\n")
        stdout.flush()


class ExternalEnv:
    """Client for an environment process speaking the JSON-lines protocol."""

    def __init__(self, command: list[str]):
        self._proc = subprocess.Popen(
            command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
        )
        self.n_tiles: int | None = None
        self.tiles_visited = None
        self.car_position = None

    def _call(self, msg: dict) -> dict:
        self._proc.stdin.write(json.dumps(msg) + "\n")
        self._proc.stdin.flush()
        line = self._proc.stdout.readline()
        if not line:
            raise RuntimeError("external environment closed the connection")
        reply = json.loads(line)
        if "error" in reply:
            raise RuntimeError(f"external environment: {reply['error']}")
        return reply

    def reset(self, seed: int) -> np.ndarray:
        reply = self._call({"cmd": "reset", "seed": int(seed)})
        self.n_tiles = int(reply["n_tiles"])
        return decode_obs(reply["obs"])

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        s, g, b = _unpack_action(action)
        reply = self._call({"cmd": "step", "action": [s, g, b]})
        return decode_obs(reply["obs"]), float(reply["reward"]), bool(reply["done"])

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.write(json.dumps({"cmd": "close"}) + "\n")
                self._proc.stdin.flush()
            except BrokenPipeError:
                pass
            self._proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


if __name__ == "__main__":
    serve()
