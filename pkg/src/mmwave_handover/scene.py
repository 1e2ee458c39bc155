"""Synthetic indoor scene: pedestrians crossing the BS1-STA link, seen by a depth camera.

Stands in for the Kinect recordings.  Pedestrians are axis-aligned cuboids that
walk a straight path crossing the line of sight; a pinhole depth camera renders
40x40 8-bit frames aligned sample-for-sample with the BS1 power trace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .channel import (
    BLOCKAGE_THRESHOLD_DB,
    P2_DEFAULT_DBM,
    BlockageDistParams,
    BlockageEvent,
    LinkBudget,
    PowerTrace,
    _runs,
    _truncated_normal,
    event_profile,
)
from .errors import ContractViolation, InputError

ROOM = (5.34, 4.87, 2.57)

# (position, look-at) per camera preset; positions follow the measurement setup.
CAMERA_PRESETS = {
    "A": ((0.60, 2.65, 1.50), (3.05, 2.45, 0.90)),
    "B": ((1.80, 0.45, 1.25), (3.05, 2.45, 0.90)),
}


@dataclass(frozen=True)
class SceneConfig:
    room: tuple[float, float, float] = ROOM
    bs1_pos: tuple[float, float, float] = (4.50, 2.45, 0.85)
    sta_pos: tuple[float, float, float] = (1.60, 2.45, 0.70)
    camera_angle_id: str = "A"
    camera_pos: tuple[float, float, float] | None = None
    camera_target: tuple[float, float, float] | None = None
    fov_deg: float = 60.0
    path_start: tuple[float, float] = (3.05, 0.30)
    path_end: tuple[float, float] = (3.05, 4.57)
    # modelling choice, not a measured quantity
    pedestrian_speed_range: tuple[float, float] = (0.75, 1.5)
    pedestrian_width_range: tuple[float, float] = (0.40, 0.55)
    pedestrian_height_range: tuple[float, float] = (1.55, 1.85)
    pedestrian_thickness: float = 0.30
    n_pedestrians: int = 2
    spawn_rate: float = 0.5  # 1/s; idle times are exponential with this rate
    frame_rate: float = 30.0
    resolution: tuple[int, int] = (40, 40)
    near_clip: float = 0.3
    far_clip: float = 6.0

    def __post_init__(self):
        if self.camera_angle_id not in CAMERA_PRESETS and self.camera_pos is None:
            raise InputError(f"unknown camera preset {self.camera_angle_id!r}")
        if not self.frame_rate > 0:
            raise InputError("frame_rate must be positive")
        for name in ("bs1_pos", "sta_pos", "camera"):
            pos = self.camera if name == "camera" else getattr(self, name)
            if not all(0.0 <= p <= r for p, r in zip(pos, self.room)):
                raise InputError(f"{name} {pos} lies outside the room {self.room}")
        lo, hi = self.pedestrian_speed_range
        if not 0 < lo <= hi:
            raise InputError(f"bad speed range {self.pedestrian_speed_range}")
        if self.spawn_rate < 0:
            raise InputError("spawn_rate must be >= 0")

    @property
    def camera(self) -> tuple[float, float, float]:
        return self.camera_pos if self.camera_pos is not None else CAMERA_PRESETS[self.camera_angle_id][0]

    @property
    def target(self) -> tuple[float, float, float]:
        if self.camera_target is not None:
            return self.camera_target
        return CAMERA_PRESETS.get(self.camera_angle_id, CAMERA_PRESETS["A"])[1]

    @property
    def frame_dt(self) -> float:
        return 1.0 / self.frame_rate

    def path(self) -> tuple[np.ndarray, np.ndarray, float]:
        a = np.array(self.path_start, dtype=float)
        b = np.array(self.path_end, dtype=float)
        length = float(np.linalg.norm(b - a))
        return a, (b - a) / length, length


@dataclass(frozen=True)
class Pedestrian:
    position: np.ndarray  # (x, y, 0)
    velocity: np.ndarray
    width: float
    height: float
    active: bool = True
    wait: float = 0.0
    crossing: int = 0
    depth_db: float = 14.2
    decay5: float = 0.059
    rise5: float = 0.049

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.velocity))


@dataclass
class DepthFrame:
    width: int
    height: int
    pixels: np.ndarray  # (height, width) uint8, 0 = far clip, 255 = near clip

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width):
            raise InputError(f"pixel array {self.pixels.shape} != ({self.height}, {self.width})")


@dataclass
class SyntheticEpisode:
    frames: np.ndarray  # (K, H, W) uint8
    power: PowerTrace
    blockage_onsets: list[int]  # frame indices where attenuation first exceeds 3 dB
    blockage_ends: list[int] = field(default_factory=list)  # last frame above 3 dB
    attenuation: np.ndarray | None = None
    tracks: np.ndarray | None = None  # (K, P, 3): x, y, active
    events: list[BlockageEvent] = field(default_factory=list)
    fps: float = 30.0

    def __post_init__(self):
        if len(self.frames) != len(self.power):
            raise InputError(f"frame count {len(self.frames)} != power samples {len(self.power)}")

    def __len__(self):
        return len(self.power)

    @property
    def onset_times(self) -> np.ndarray:
        return np.asarray(self.blockage_onsets, dtype=float) * self.power.tau

    def slice(self, start: int, stop: int) -> "SyntheticEpisode":
        keep = [(o, e) for o, e in zip(self.blockage_onsets, self.blockage_ends) if start <= o < stop]
        return SyntheticEpisode(
            frames=self.frames[start:stop],
            power=self.power.slice(start, stop),
            blockage_onsets=[o - start for o, _ in keep],
            blockage_ends=[min(e, stop - 1) - start for _, e in keep],
            attenuation=None if self.attenuation is None else self.attenuation[start:stop],
            tracks=None if self.tracks is None else self.tracks[start:stop],
            events=[],
            fps=self.fps,
        )


# ---------------------------------------------------------------------------
# pedestrians


def _spawn(p: Pedestrian, cfg: SceneConfig, dist: BlockageDistParams, rng: np.random.Generator,
           elapsed: float) -> Pedestrian:
    start, u, _ = cfg.path()
    speed = float(rng.uniform(*cfg.pedestrian_speed_range))
    width = float(rng.uniform(*cfg.pedestrian_width_range))
    height = float(rng.uniform(*cfg.pedestrian_height_range))
    decay5 = _truncated_normal(rng, dist.decay5db_mean, dist.decay5db_std)
    rise5 = float(rng.lognormal(dist.rise5db_logmean, dist.rise5db_logstd))
    depth = _truncated_normal(rng, dist.atten_mean_db, dist.atten_std_db)
    xy = start + u * speed * elapsed
    return Pedestrian(
        position=np.array([xy[0], xy[1], 0.0]),
        velocity=np.array([u[0] * speed, u[1] * speed, 0.0]),
        width=width,
        height=height,
        active=True,
        wait=0.0,
        crossing=p.crossing + 1,
        depth_db=depth,
        decay5=decay5,
        rise5=rise5,
    )


def _idle_time(cfg: SceneConfig, rng: np.random.Generator) -> float:
    if cfg.spawn_rate <= 0:
        return math.inf
    return float(rng.exponential(1.0 / cfg.spawn_rate))


def initial_pedestrians(cfg: SceneConfig, rng: np.random.Generator) -> list[Pedestrian]:
    start, _, _ = cfg.path()
    lo_w, hi_w = cfg.pedestrian_width_range
    lo_h, hi_h = cfg.pedestrian_height_range
    return [
        Pedestrian(
            position=np.array([start[0], start[1], 0.0]),
            velocity=np.zeros(3),
            width=0.5 * (lo_w + hi_w),
            height=0.5 * (lo_h + hi_h),
            active=False,
            wait=_idle_time(cfg, rng),
        )
        for _ in range(cfg.n_pedestrians)
    ]


def step_pedestrians(peds: Sequence[Pedestrian], cfg: SceneConfig, dt: float,
                     rng: np.random.Generator,
                     dist: BlockageDistParams | None = None) -> list[Pedestrian]:
    """Advance every pedestrian by ``dt`` seconds along the crossing path.

    Idle pedestrians count down their exponential wait and then respawn at the
    path start with a fresh speed and body size; walkers leaving the path go idle.
    """
    if dt < 0:
        raise InputError("dt must be >= 0")
    if dt == 0:
        return list(peds)
    dist = dist or BlockageDistParams()
    start, u, length = cfg.path()
    out = []
    for p in peds:
        if not p.active:
            if p.wait > dt:
                out.append(replace(p, wait=p.wait - dt))
                continue
            p = _spawn(p, cfg, dist, rng, elapsed=dt - p.wait)
            out.append(p)
            continue
        pos = p.position + p.velocity * dt
        s = float((pos[:2] - start) @ u)
        if s > length:
            out.append(replace(p, position=pos, active=False, wait=_idle_time(cfg, rng)))
        else:
            out.append(replace(p, position=pos))
    return out


# ---------------------------------------------------------------------------
# geometry


def point_segment_distance(pt, a, b) -> float:
    pt, a, b = (np.asarray(v, dtype=float) for v in (pt, a, b))
    ab = b - a
    denom = float(ab @ ab)
    s = 0.0 if denom == 0 else float(np.clip((pt - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(pt - (a + s * ab)))


def blocks_los(p: Pedestrian, bs1_pos, sta_pos) -> bool:
    """Closed test: the pedestrian's vertical cylinder touches the LOS segment."""
    if not p.active:
        return False
    a = np.asarray(sta_pos, dtype=float)
    b = np.asarray(bs1_pos, dtype=float)
    ab = b[:2] - a[:2]
    denom = float(ab @ ab)
    s = 0.0 if denom == 0 else float(np.clip((p.position[:2] - a[:2]) @ ab / denom, 0.0, 1.0))
    closest = a + s * (b - a)
    d = float(np.linalg.norm(p.position[:2] - closest[:2]))
    return d <= 0.5 * p.width and closest[2] <= p.height


def occlusion_depth(peds: Sequence[Pedestrian], bs1_pos, sta_pos) -> float:
    """Attenuation (dB) imposed on the LOS link by the pedestrians currently crossing it."""
    if np.allclose(bs1_pos, sta_pos):
        raise ContractViolation("BS1 and STA positions coincide")
    depths = [p.depth_db for p in peds if blocks_los(p, bs1_pos, sta_pos)]
    return max(depths) if depths else 0.0


def crossing_interval(cfg: SceneConfig, width: float, resolution: float = 1e-3):
    """Arc-length interval [s_in, s_out] along the path where a body of ``width`` blocks the LOS."""
    start, u, length = cfg.path()
    s = np.arange(0.0, length + resolution, resolution)
    pts = start[None, :] + s[:, None] * u[None, :]
    a = np.asarray(cfg.sta_pos[:2], dtype=float)
    b = np.asarray(cfg.bs1_pos[:2], dtype=float)
    ab = b - a
    w = np.clip(((pts - a) @ ab) / (ab @ ab), 0.0, 1.0)
    d = np.linalg.norm(pts - (a + w[:, None] * ab), axis=1)
    hit = np.flatnonzero(d <= 0.5 * width)
    if hit.size == 0:
        return None
    return float(s[hit[0]]), float(s[hit[-1]])


# ---------------------------------------------------------------------------
# rendering


class DepthCamera:
    """Pinhole depth camera returning z-depth per pixel."""

    def __init__(self, cfg: SceneConfig):
        self.cfg = cfg
        w, h = cfg.resolution
        self.origin = np.asarray(cfg.camera, dtype=float)
        fwd = np.asarray(cfg.target, dtype=float) - self.origin
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, [0.0, 0.0, 1.0])
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        half = math.tan(math.radians(cfg.fov_deg) / 2)
        us = (2 * (np.arange(w) + 0.5) / w - 1) * half
        vs = (1 - 2 * (np.arange(h) + 0.5) / h) * half
        uu, vv = np.meshgrid(us, vs)
        # forward component 1, so ray parameter t equals z-depth
        self.dirs = fwd[None, None, :] + uu[..., None] * right + vv[..., None] * up
        self.forward, self.right, self.up, self.half = fwd, right, up, half
        self.background = self._room_depth()

    def _room_depth(self) -> np.ndarray:
        d = self.dirs
        o = self.origin
        room = np.asarray(self.cfg.room, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_hi = np.where(d > 0, (room - o) / d, np.inf)
            t_lo = np.where(d < 0, (0.0 - o) / d, np.inf)
        return np.minimum(t_hi, t_lo).min(axis=-1)

    def _box_depth(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        d = self.dirs
        o = self.origin
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - o) / d
            t2 = (hi - o) / d
        tmin = np.nanmax(np.where(d == 0, np.where((o >= lo) & (o <= hi), -np.inf, np.nan),
                                  np.minimum(t1, t2)), axis=-1)
        tmax = np.nanmin(np.where(d == 0, np.where((o >= lo) & (o <= hi), np.inf, np.nan),
                                  np.maximum(t1, t2)), axis=-1)
        hit = (tmax >= np.maximum(tmin, 0.0)) & ~np.isnan(tmin) & ~np.isnan(tmax)
        t = np.where(tmin > 0, tmin, 0.0)
        return np.where(hit, t, np.inf)

    def pedestrian_box(self, p: Pedestrian) -> tuple[np.ndarray, np.ndarray]:
        _, u, _ = self.cfg.path()
        perp = np.array([-u[1], u[0]])
        half = np.abs(perp) * 0.5 * p.width + np.abs(u) * 0.5 * self.cfg.pedestrian_thickness
        lo = np.array([p.position[0] - half[0], p.position[1] - half[1], 0.0])
        hi = np.array([p.position[0] + half[0], p.position[1] + half[1], p.height])
        return lo, hi

    def depth(self, peds: Sequence[Pedestrian]) -> np.ndarray:
        z = self.background
        for p in peds:
            if p.active:
                z = np.minimum(z, self._box_depth(*self.pedestrian_box(p)))
        return z

    def quantize(self, z: np.ndarray) -> np.ndarray:
        near, far = self.cfg.near_clip, self.cfg.far_clip
        v = np.rint(255.0 * (far - z) / (far - near))
        v = np.where(z >= far, 0.0, v)
        return np.clip(v, 0, 255).astype(np.uint8)

    def project(self, xyz) -> tuple[float, float]:
        """Pixel (column, row) of a world point; may fall outside the frame."""
        rel = np.asarray(xyz, dtype=float) - self.origin
        z = rel @ self.forward
        w, h = self.cfg.resolution
        x = (rel @ self.right) / z / self.half
        y = (rel @ self.up) / z / self.half
        return (x + 1) * w / 2 - 0.5, (1 - y) * h / 2 - 0.5


def render_depth_frame(peds: Sequence[Pedestrian], cfg: SceneConfig,
                       camera: DepthCamera | None = None) -> DepthFrame:
    camera = camera or DepthCamera(cfg)
    w, h = cfg.resolution
    return DepthFrame(w, h, camera.quantize(camera.depth(peds)))


# ---------------------------------------------------------------------------
# episodes


def _crossing_event(p: Pedestrian, t_in: float, t_out: float) -> BlockageEvent:
    """Trapezoid for one crossing: ramp down from entry, ramp up from exit."""
    blocked = max(t_out - t_in, 0.0)
    t_decay = p.decay5 * p.depth_db / 5.0
    if blocked >= t_decay:
        depth, hold = p.depth_db, blocked - t_decay
    else:
        depth, hold = p.depth_db * blocked / t_decay, 0.0
        t_decay = blocked
    t_rise = p.rise5 * depth / 5.0
    return BlockageEvent(t_in, t_decay, hold, t_rise, depth)


def label_blockages(atten: np.ndarray, threshold_db: float = BLOCKAGE_THRESHOLD_DB):
    runs = _runs(atten > threshold_db)
    return [lo for lo, _ in runs], [hi for _, hi in runs]


def generate_episode(cfg: SceneConfig, budget: LinkBudget, dist: BlockageDistParams,
                     duration: float, rng: np.random.Generator, noise_db_std: float = 0.5,
                     p2_dbm: float = P2_DEFAULT_DBM, render: bool = True) -> SyntheticEpisode:
    """Simulate the scene at the camera frame rate and derive the aligned BS1 power trace."""
    if not duration > 0:
        raise InputError("duration must be positive")
    n = int(round(duration * cfg.frame_rate))
    dt = cfg.frame_dt
    camera = DepthCamera(cfg) if render else None
    w, h = cfg.resolution
    frames = np.zeros((n, h, w), dtype=np.uint8)
    tracks = np.zeros((n, cfg.n_pedestrians, 3))
    start, u, _ = cfg.path()
    interval_cache: dict[float, tuple[float, float] | None] = {}
    events: list[BlockageEvent] = []

    peds = initial_pedestrians(cfg, rng)
    for k in range(n):
        for i, p in enumerate(peds):
            tracks[k, i] = (p.position[0], p.position[1], float(p.active))
        if render:
            frames[k] = camera.quantize(camera.depth(peds))
        before = [p.crossing for p in peds]
        peds = step_pedestrians(peds, cfg, dt, rng, dist)
        t_next = (k + 1) * dt
        for p, c0 in zip(peds, before):
            if p.crossing == c0 or not p.active:
                continue
            s_now = float((p.position[:2] - start) @ u)
            t_spawn = t_next - s_now / p.speed
            if p.width not in interval_cache:
                interval_cache[p.width] = crossing_interval(cfg, p.width)
            span = interval_cache[p.width]
            if span is None:
                continue
            t_in = t_spawn + span[0] / p.speed
            t_out = t_spawn + span[1] / p.speed
            if t_in < duration:
                events.append(_crossing_event(p, t_in, t_out))

    times = np.arange(n) * dt
    atten = np.zeros(n)
    for e in events:
        atten = np.maximum(atten, event_profile(e, times))
    p1 = budget.p_los_dbm - atten
    if noise_db_std > 0:
        p1 = p1 + rng.normal(0.0, noise_db_std, size=n)
    power = PowerTrace(dt, p1, np.full(n, p2_dbm))
    onsets, ends = label_blockages(atten)
    return SyntheticEpisode(
        frames=frames,
        power=power,
        blockage_onsets=onsets,
        blockage_ends=ends,
        attenuation=atten,
        tracks=tracks,
        events=sorted(events, key=lambda e: e.onset),
        fps=cfg.frame_rate,
    )


def blocked_fraction(episode: SyntheticEpisode) -> float:
    """Fraction of frames inside a blockage event (attenuation above zero)."""
    return float(np.mean(episode.attenuation > 0))
