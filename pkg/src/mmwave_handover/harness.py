"""Experiment orchestration.

An :class:`ExperimentConfig` fully determines a run: it builds (or ingests) an
aligned frame/power episode, trains the image and power agents for every
disruption time in the sweep, evaluates all four policies on the held-out split
and writes plot-ready CSVs.  Everything except the wall-clock timing files is a
pure function of the config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import os
import struct
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import EvalResult, TrainConfig, TrainResult, evaluate, train
from .baselines import ThresholdPolicyCfg, make_threshold_policy, oracle_dp
from .channel import (
    BLOCKAGE_THRESHOLD_DB,
    BlockageDistParams,
    LinkBudget,
    PowerTrace,
    power_for_rate,
    read_power_csv,
    shannon_rate,
)
from .env import EpisodeLog, HandoverEnv, MdpConfig, next_counters, run_episode
from .errors import CalibrationError, FormatError, InputError
from .qfunc import NetArch, QNetwork, save_snapshot
from .scene import SceneConfig, SyntheticEpisode, blocked_fraction, generate_episode, label_blockages

log = logging.getLogger(__name__)

OUTPUT_ENV_VAR = "MMWAVE_HANDOVER_OUT"
SCENARIOS = ("synthetic-A", "synthetic-B", "external-trace")
POLICIES = ("image", "power", "threshold", "oracle")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SceneSection:
    spawn_rate: float = 0.45
    n_pedestrians: int = 2
    noise_db_std: float = 0.5


@dataclass(frozen=True)
class ChannelSection:
    bandwidth_hz: float = 40e6
    noise_psd_dbm_per_hz: float = -173.0
    los_rate_mbps: float = 200.0
    bs2_rate_mbps: float = 170.0


@dataclass(frozen=True)
class DataSection:
    train_samples: int = 16860
    test_samples: int = 13500
    power_csv: str = ""
    frames: str = ""
    los_reference_dbm: str = "median"  # external traces: a dBm value, or the median of BS1 power


@dataclass(frozen=True)
class MdpSection:
    n_window: int = 2
    tau: float = 0.030
    gamma: float = 0.99


@dataclass(frozen=True)
class TrainSection:
    iterations: int = 1000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.01
    epsilon_decrement: float = 0.01
    batch_size: int = 32
    target_sync_every: int = 10000
    replay_capacity: int = 50000
    learn_rate: float = 2.5e-4
    rms_decay: float = 0.95
    rms_eps: float = 1e-6
    reward_offset_mbps: float = 200.0
    dtype: str = "float32"


@dataclass(frozen=True)
class ThresholdSection:
    away_db: float = BLOCKAGE_THRESHOLD_DB
    back_db: float = 1.0


@dataclass(frozen=True)
class ReportSection:
    window_margin_s: float = 0.2
    lead_search_s: float = 1.5
    lead_good_s: float = 0.1


_SECTIONS = {
    "scene": SceneSection,
    "channel": ChannelSection,
    "data": DataSection,
    "mdp": MdpSection,
    "train": TrainSection,
    "threshold": ThresholdSection,
    "report": ReportSection,
}

_DOC = {
    "seed": "master seed; every random stream is derived from it",
    "scenario": "synthetic-A or synthetic-B (camera preset), or external-trace",
    "output_dir": "root directory for run outputs (overridden by $" + OUTPUT_ENV_VAR + ")",
    "t_dis_sweep": "comma-separated service disruption times in seconds",
    "scene.spawn_rate": "pedestrian arrival rate per idle walker (1/s)",
    "scene.n_pedestrians": "number of walkers sharing the corridor",
    "scene.noise_db_std": "Gaussian noise on BS1 power samples (dB)",
    "channel.bandwidth_hz": "system bandwidth W",
    "channel.noise_psd_dbm_per_hz": "noise power spectral density",
    "channel.los_rate_mbps": "BS1 rate with a clear line of sight; sets its LOS power",
    "channel.bs2_rate_mbps": "constant BS2 rate; sets its received power",
    "data.train_samples": "training split length in samples",
    "data.test_samples": "test split length in samples (follows the training split)",
    "data.power_csv": "external-trace: power CSV path",
    "data.frames": "external-trace: MMHF frame file path",
    "data.los_reference_dbm": "external-trace: BS1 LOS power for blockage labels, in dBm or 'median'",
    "mdp.n_window": "observations per state",
    "mdp.tau": "epoch length used to discretise disruption times (s)",
    "mdp.gamma": "discount factor",
    "train.iterations": "training iterations per agent",
    "train.epsilon_start": "initial exploration rate",
    "train.epsilon_end": "exploration floor",
    "train.epsilon_decrement": "exploration decrease per iteration",
    "train.batch_size": "replay minibatch size",
    "train.target_sync_every": "updates between target network syncs",
    "train.replay_capacity": "replay buffer size",
    "train.learn_rate": "RMSProp learning rate",
    "train.rms_decay": "RMSProp squared-gradient decay",
    "train.rms_eps": "RMSProp denominator floor",
    "train.reward_offset_mbps": "constant subtracted from rewards before scaling (argmax-invariant)",
    "train.dtype": "network precision, float32 or float64",
    "threshold.away_db": "threshold rule: leave BS1 when its power drops this far below LOS",
    "threshold.back_db": "threshold rule: return when BS1 recovers to within this of LOS",
    "report.window_margin_s": "blockage window margin before onset and after the end",
    "report.lead_search_s": "how far before an onset a handover still counts as leading it",
    "report.lead_good_s": "lead (s) an event needs to count as proactively handled",
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    scenario: str = "synthetic-A"
    output_dir: str = "runs"
    t_dis_sweep: tuple[float, ...] = (0.0, 0.03, 0.06, 0.09, 0.12)
    scene: SceneSection = field(default_factory=SceneSection)
    channel: ChannelSection = field(default_factory=ChannelSection)
    data: DataSection = field(default_factory=DataSection)
    mdp: MdpSection = field(default_factory=MdpSection)
    train: TrainSection = field(default_factory=TrainSection)
    threshold: ThresholdSection = field(default_factory=ThresholdSection)
    report: ReportSection = field(default_factory=ReportSection)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise InputError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if not self.t_dis_sweep or any(not (v >= 0) for v in self.t_dis_sweep):
            raise InputError(f"t_dis_sweep needs values >= 0, got {self.t_dis_sweep}")
        if self.data.train_samples <= self.mdp.n_window + 1 or self.data.test_samples <= self.mdp.n_window + 1:
            raise InputError("both splits must be longer than the observation window")
        if self.train.dtype not in ("float32", "float64"):
            raise InputError(f"train.dtype must be float32 or float64, got {self.train.dtype!r}")
        if self.data.los_reference_dbm != "median":
            try:
                float(self.data.los_reference_dbm)
            except ValueError:
                raise InputError("data.los_reference_dbm must be 'median' or a number") from None
        if self.scenario == "external-trace" and not (self.data.power_csv and self.data.frames):
            raise InputError("external-trace needs data.power_csv and data.frames")

    # -- flat key/value form -------------------------------------------------

    @classmethod
    def keys(cls) -> list[str]:
        out = []
        for f in dataclasses.fields(cls):
            if f.name in _SECTIONS:
                out += [f"{f.name}.{g.name}" for g in dataclasses.fields(_SECTIONS[f.name])]
            else:
                out.append(f.name)
        return out

    @classmethod
    def schema(cls) -> str:
        """Every accepted key with its type, default and meaning."""
        default = cls().flat()
        lines = ["# key | type | default | meaning"]
        for key in cls.keys():
            lines.append(f"{key} | {_type_name(_field_type(key))} | {default[key]} | {_DOC[key]}")
        return "\n".join(lines) + "\n"

    def flat(self) -> dict[str, str]:
        out = {}
        for key in self.keys():
            value = self
            for part in key.split("."):
                value = getattr(value, part)
            out[key] = _format_value(value)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.flat().items())

    @classmethod
    def from_mapping(cls, items: dict[str, str], base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        known = set(cls.keys())
        unknown = sorted(set(items) - known)
        if unknown:
            raise InputError(f"unknown config key(s): {', '.join(unknown)}")
        base = base or cls()
        top, sections = {}, {name: {} for name in _SECTIONS}
        for key, raw in items.items():
            value = _parse_value(key, raw)
            if "." in key:
                sec, name = key.split(".", 1)
                sections[sec][name] = value
            else:
                top[key] = value
        for sec, vals in sections.items():
            if vals:
                top[sec] = dataclasses.replace(getattr(base, sec), **vals)
        return dataclasses.replace(base, **top)

    @classmethod
    def from_text(cls, text: str, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        items = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"config line {lineno}: expected 'key = value', got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in items:
                raise InputError(f"config line {lineno}: duplicate key {key!r}")
            items[key] = value
        return cls.from_mapping(items, base)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        return cls.from_text(path.read_text(encoding="utf-8"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:10]

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV_VAR) or self.output_dir)

    def link_budget(self) -> LinkBudget:
        ch = self.channel
        p_los = power_for_rate(ch.los_rate_mbps * 1e6, ch.bandwidth_hz, ch.noise_psd_dbm_per_hz)
        return LinkBudget(p_los, ch.bandwidth_hz, ch.noise_psd_dbm_per_hz)

    def bs2_power_dbm(self) -> float:
        ch = self.channel
        return power_for_rate(ch.bs2_rate_mbps * 1e6, ch.bandwidth_hz, ch.noise_psd_dbm_per_hz)

    def mdp_config(self, t_dis: float) -> MdpConfig:
        return MdpConfig(n_window=self.mdp.n_window, tau=self.mdp.tau, t_dis=t_dis, gamma=self.mdp.gamma)

    def train_config(self, seed: int) -> TrainConfig:
        t = self.train
        return TrainConfig(
            gamma=self.mdp.gamma, iterations=t.iterations, epsilon_start=t.epsilon_start,
            epsilon_end=t.epsilon_end, epsilon_decrement=t.epsilon_decrement, batch_size=t.batch_size,
            target_sync_every=t.target_sync_every, replay_capacity=t.replay_capacity,
            learn_rate=t.learn_rate, rms_decay=t.rms_decay, rms_eps=t.rms_eps,
            reward_offset_mbps=t.reward_offset_mbps, seed=seed,
        )


def _field_type(key: str):
    owner, name = ExperimentConfig, key
    if "." in key:
        sec, name = key.split(".", 1)
        owner = _SECTIONS[sec]
    return typing.get_type_hints(owner)[name]


def _type_name(tp) -> str:
    if typing.get_origin(tp) is tuple:
        return "list[float]"
    return getattr(tp, "__name__", str(tp))


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key: str, raw: str):
    tp = _field_type(key)
    try:
        if typing.get_origin(tp) is tuple:
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError:
        raise InputError(f"config key {key!r}: cannot parse {raw!r} as {_type_name(tp)}") from None


# ---------------------------------------------------------------------------
# frame files: "MMHF", u32 LE width, height, count, fps * 1000, then count*height*width bytes

FRAME_MAGIC = b"MMHF"
_FRAME_HEADER = struct.Struct("<4sIIII")


def write_frames(frames: np.ndarray, fps: float, path) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 3 or frames.dtype != np.uint8:
        raise InputError(f"frames must be a (K, H, W) uint8 array, got {frames.dtype} {frames.shape}")
    k, h, w = frames.shape
    with open(path, "wb") as fh:
        fh.write(_FRAME_HEADER.pack(FRAME_MAGIC, w, h, k, int(round(fps * 1000))))
        fh.write(np.ascontiguousarray(frames).tobytes())


def read_frames(path) -> tuple[np.ndarray, float]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"frame file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _FRAME_HEADER.size:
        raise FormatError(f"frame file header truncated ({len(raw)} bytes)", offset=len(raw))
    magic, w, h, k, fps_milli = _FRAME_HEADER.unpack_from(raw)
    if magic != FRAME_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FRAME_MAGIC!r}", offset=0)
    if fps_milli == 0:
        raise FormatError("frame rate is zero", offset=16)
    expect = _FRAME_HEADER.size + w * h * k
    if len(raw) != expect:
        what = "truncated" if len(raw) < expect else "has trailing bytes"
        raise FormatError(f"frame file {what}: {len(raw)} bytes, header implies {expect}",
                          offset=min(len(raw), expect))
    frames = np.frombuffer(raw, dtype=np.uint8, offset=_FRAME_HEADER.size).reshape(k, h, w).copy()
    return frames, fps_milli / 1000.0


def ingest_external(power_csv, frames_path, los_reference_dbm: float | str | None = None) -> SyntheticEpisode:
    """Load an aligned power CSV and frame file; blockages are labelled from BS1's power."""
    if not Path(power_csv).is_file():
        raise InputError(f"power CSV not found: {power_csv}")
    power = read_power_csv(power_csv)
    frames, fps = read_frames(frames_path)
    if len(frames) != len(power):
        raise FormatError(f"length mismatch: {len(power)} power rows vs {len(frames)} frames")
    if abs(power.tau - 1.0 / fps) > 1e-6 + 1e-3 / 1000.0:
        raise FormatError(f"power step {power.tau * 1e3:.3f} ms does not match {fps} frames/s")
    power = PowerTrace(1.0 / fps, power.p1_dbm, power.p2_dbm)
    if los_reference_dbm is None or los_reference_dbm == "median":
        ref = float(np.median(power.p1_dbm))
    else:
        ref = float(los_reference_dbm)
    atten = np.clip(ref - power.p1_dbm, 0.0, None)
    onsets, ends = label_blockages(atten)
    return SyntheticEpisode(frames, power, onsets, ends, attenuation=atten, fps=fps)


def write_labels(onsets, ends, tau: float, path) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("event,onset_index,end_index,onset_ms,end_ms\n")
        for k, (o, e) in enumerate(zip(onsets, ends)):
            fh.write(f"{k},{o},{e},{o * tau * 1e3:.3f},{e * tau * 1e3:.3f}\n")


def read_labels(path) -> tuple[list[int], list[int]]:
    onsets, ends = [], []
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) >= 3:
                onsets.append(int(parts[1]))
                ends.append(int(parts[2]))
    return onsets, ends


# ---------------------------------------------------------------------------
# data


def scene_config(cfg: ExperimentConfig, spawn_rate: float | None = None) -> SceneConfig:
    angle = "B" if cfg.scenario == "synthetic-B" else "A"
    rate = cfg.scene.spawn_rate if spawn_rate is None else spawn_rate
    return SceneConfig(camera_angle_id=angle, spawn_rate=rate, n_pedestrians=cfg.scene.n_pedestrians)


def build_dataset(cfg: ExperimentConfig) -> SyntheticEpisode:
    """Training split followed by test split; both are read from one continuous episode."""
    need = cfg.data.train_samples + cfg.data.test_samples
    if cfg.scenario == "external-trace":
        ep = ingest_external(cfg.data.power_csv, cfg.data.frames, cfg.data.los_reference_dbm)
        if len(ep) < need:
            raise InputError(f"external trace has {len(ep)} samples, config needs {need}")
        return ep.slice(0, need) if len(ep) > need else ep
    sc = scene_config(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xDA7A]))
    return generate_episode(sc, cfg.link_budget(), BlockageDistParams(), need / sc.frame_rate, rng,
                            noise_db_std=cfg.scene.noise_db_std, p2_dbm=cfg.bs2_power_dbm())


def calibrate_arrival_rate(scene: SceneConfig, target_fraction: float, tolerance: float = 0.02,
                           duration: float = 600.0, seed: int = 0, rate_hi: float = 8.0,
                           max_steps: int = 40, dist: BlockageDistParams | None = None) -> float:
    """Bisect the spawn rate until the simulated blocked fraction lies within ``tolerance`` of the target.

    Every probe reuses the same seed so the fraction is compared on common random numbers.
    """
    if not 0 <= target_fraction < 1:
        raise InputError(f"target fraction must lie in [0, 1), got {target_fraction}")
    if duration < 600.0:
        raise InputError("calibration needs at least 600 s of simulated time")
    if target_fraction == 0:
        return 0.0
    dist = dist or BlockageDistParams()

    def fraction(rate):
        sc = dataclasses.replace(scene, spawn_rate=rate)
        ep = generate_episode(sc, LinkBudget(), dist, duration, np.random.default_rng(seed),
                              noise_db_std=0.0, render=False)
        return blocked_fraction(ep)

    lo, hi = 0.0, rate_hi
    f_lo, f_hi = 0.0, fraction(hi)
    if abs(f_hi - target_fraction) <= tolerance:
        return hi
    if f_hi < target_fraction:
        raise CalibrationError(f"target {target_fraction} unreachable", (lo, hi), (f_lo, f_hi))
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        f_mid = fraction(mid)
        log.debug("calibrate rate=%.5f fraction=%.4f", mid, f_mid)
        if abs(f_mid - target_fraction) <= tolerance:
            return mid
        if f_mid < target_fraction:
            lo, f_lo = mid, f_mid
        else:
            hi, f_hi = mid, f_mid
    raise CalibrationError(f"no rate within {tolerance} of {target_fraction}", (lo, hi), (f_lo, f_hi))


# ---------------------------------------------------------------------------
# metrics


def _away_epochs(log_: EpisodeLog) -> np.ndarray:
    """Absolute indices of decisions that hand over away from BS1."""
    mask = (log_.j == 1) & (log_.c == 0) & (log_.a != 1)
    return log_.t[mask]


def lead_time(log_: EpisodeLog, onsets, ends, dt: float, search_s: float = 1.5) -> np.ndarray:
    """Signed seconds from the handover away from BS1 to each onset; NaN marks a missed event.

    A handover counts for an event if it is issued after the previous event ended,
    no more than ``search_s`` before the onset and no later than the event's end.
    """
    away = _away_epochs(log_)
    reach = int(round(search_s / dt))
    out = np.full(len(onsets), np.nan)
    prev_end = -np.inf
    for k, (o, e) in enumerate(zip(onsets, ends)):
        lo = max(prev_end + 1, o - reach)
        hits = away[(away >= lo) & (away <= e)]
        if hits.size:
            out[k] = (hits[0] - o) * dt
        prev_end = e
    return out


def window_mask(log_: EpisodeLog, onsets, ends, margin: int) -> np.ndarray:
    """Decisions whose reward sample (t + 1) falls in some [onset - margin, end + margin]."""
    s = log_.t + 1
    mask = np.zeros(len(s), dtype=bool)
    for o, e in zip(onsets, ends):
        mask |= (s >= o - margin) & (s <= e + margin)
    return mask


@dataclass
class PolicyMetrics:
    t_dis: float
    policy: str
    avg_rate_mbps: float
    window_rate_mbps: float
    handovers: int
    n_events: int
    n_missed: int
    median_lead_s: float
    frac_led: float
    best_iteration: int | None = None
    best_score_mbps: float | None = None
    final_score_mbps: float | None = None

    HEADER = ("t_dis_s,policy,avg_rate_mbps,window_rate_mbps,handovers,n_events,n_missed,"
              "median_lead_s,frac_led,best_iteration,best_score_mbps,final_score_mbps")

    def csv_row(self) -> str:
        def num(v, fmt):
            return "" if v is None or (isinstance(v, float) and np.isnan(v)) else format(v, fmt)
        return ",".join([
            f"{self.t_dis:.3f}", self.policy, num(self.avg_rate_mbps, ".6f"), num(self.window_rate_mbps, ".6f"),
            str(self.handovers), str(self.n_events), str(self.n_missed), num(self.median_lead_s, ".3f"),
            num(self.frac_led, ".4f"), num(self.best_iteration, "d"), num(self.best_score_mbps, ".6f"),
            num(self.final_score_mbps, ".6f"),
        ])


def policy_metrics(t_dis, policy, log_: EpisodeLog, onsets, ends, dt, rep: ReportSection,
                   trained: TrainResult | None = None) -> PolicyMetrics:
    leads = lead_time(log_, onsets, ends, dt, rep.lead_search_s)
    hit = leads[~np.isnan(leads)]
    mask = window_mask(log_, onsets, ends, int(round(rep.window_margin_s / dt)))
    window = float(log_.reward_mbps[mask].mean()) if mask.any() else float("nan")
    frac = float(np.sum(hit <= -rep.lead_good_s + 1e-6) / len(leads)) if len(leads) else float("nan")
    m = PolicyMetrics(
        t_dis, policy, log_.average_reward, window, log_.handovers, len(leads), int(np.isnan(leads).sum()),
        float(np.median(hit)) if hit.size else float("nan"), frac,
    )
    if trained is not None:
        m.best_iteration = trained.best.iteration
        m.best_score_mbps = trained.best.score_mbps
        m.final_score_mbps = trained.curve.avg_rate_mbps[-1] if len(trained.curve) else None
    return m


def event_bits(logs: dict[str, EpisodeLog], onsets, ends, margin: int, dt: float) -> list[dict]:
    """Per-event cumulative bits of each policy from the start of the event's window."""
    out = []
    t = next(iter(logs.values())).t
    for k, (o, e) in enumerate(zip(onsets, ends)):
        sel = (t + 1 >= o - margin) & (t + 1 <= e + margin)
        if not sel.any():
            continue
        row = {"event": k, "t": t[sel] + 1, "onset": o, "end": e}
        for name, lg in logs.items():
            row[name] = np.cumsum(lg.reward_mbps[sel]) * 1e6 * dt
        out.append(row)
    return out


def crossover(ev: dict, a: str = "image", b: str = "power") -> bool:
    """``a`` trails ``b`` at some point before the event ends, then leads strictly at the end."""
    d = ev[a] - ev[b]
    upto = ev["t"] <= ev["end"]
    if not upto.any():
        return False
    d = d[upto]
    dips = np.flatnonzero(d < 0)
    return bool(dips.size and dips[0] < len(d) - 1 and d[-1] > 0)


# ---------------------------------------------------------------------------
# running


@dataclass
class PointResult:
    t_dis: float
    metrics: list[PolicyMetrics]
    logs: dict[str, EpisodeLog]
    trained: dict[str, TrainResult]
    forward_seconds: dict[str, np.ndarray]
    events: list[dict]
    leads: dict[str, np.ndarray]

    @property
    def crossovers(self) -> int:
        return sum(crossover(ev) for ev in self.events)


@dataclass
class RunReport:
    config: ExperimentConfig
    points: list[PointResult]
    run_dir: Path | None = None
    onsets: list[int] = field(default_factory=list)
    ends: list[int] = field(default_factory=list)

    @property
    def rows(self) -> list[PolicyMetrics]:
        return [m for p in self.points for m in p.metrics]

    def row(self, t_dis: float, policy: str) -> PolicyMetrics:
        for m in self.rows:
            if abs(m.t_dis - t_dis) < 1e-12 and m.policy == policy:
                return m
        raise KeyError((t_dis, policy))

    def point(self, t_dis: float) -> PointResult:
        for p in self.points:
            if abs(p.t_dis - t_dis) < 1e-12:
                return p
        raise KeyError(t_dis)

    def report_csv(self) -> str:
        return PolicyMetrics.HEADER + "\n" + "".join(m.csv_row() + "\n" for m in self.rows)

    def markdown(self) -> str:
        lines = ["| T_dis (s) | policy | avg rate | window rate | handovers | median lead (s) | led | missed |",
                 "|---|---|---|---|---|---|---|---|"]
        for m in self.rows:
            lead = "" if np.isnan(m.median_lead_s) else f"{m.median_lead_s:+.3f}"
            lines.append(f"| {m.t_dis:.3f} | {m.policy} | {m.avg_rate_mbps:.2f} | {m.window_rate_mbps:.2f} | "
                         f"{m.handovers} | {lead} | {m.frac_led:.2f} | {m.n_missed}/{m.n_events} |")
        return "\n".join(lines) + "\n"


def derived_seeds(master: int, point: int, agent: str) -> tuple[int, int]:
    """(network init seed, exploration seed) for one agent at one sweep point."""
    tag = {"image": 1, "power": 2}[agent]
    a, b = np.random.SeedSequence([master, point, tag]).generate_state(2)
    return int(a), int(b)


def split_envs(obs, rates_bps, mdp, n_train, n_total, dt):
    def make_env(split):
        if split == "train":
            return HandoverEnv(obs, rates_bps, mdp, 0, n_train, dt=dt)
        return HandoverEnv(obs, rates_bps, mdp, n_train, n_total, dt=dt)
    return make_env


def oracle_log(rates_mbps: np.ndarray, mdp: MdpConfig, start: int, stop: int, dt: float) -> EpisodeLog:
    res = oracle_dp(rates_mbps[start:stop], mdp)
    n = mdp.n_window
    ts = np.arange(start + n - 1, stop - 1)
    j, c = 1, 0
    js, cs, rs = [], [], []
    for t, a in zip(ts, res.actions):
        js.append(j)
        cs.append(c)
        j, c = next_counters(j, c, int(a), mdp.c_max)
        rs.append(rates_mbps[t + 1, j - 1] if c == 0 else 0.0)
    return EpisodeLog(t=ts, j=np.array(js), c=np.array(cs), a=res.actions.astype(int),
                      reward_mbps=np.array(rs), q_values=None, tau=dt, n_window=n)


def train_agent(variant, cfg, mdp, make_env, point, dtype):
    init_seed, explore_seed = derived_seeds(cfg.seed, point, variant)
    arch = NetArch.image(n_window=mdp.n_window, c_max=mdp.c_max) if variant == "image" \
        else NetArch.power(n_window=mdp.n_window, c_max=mdp.c_max)
    net = QNetwork(arch, np.random.default_rng(init_seed), dtype=dtype)

    def progress(it, eps, score):
        log.info("T_dis=%.3f %s iteration %d eps=%.2f score=%.3f Mbit/s", mdp.t_dis, variant, it + 1, eps, score)

    return train(make_env, net, cfg.train_config(explore_seed), progress=progress)


def run_point(cfg: ExperimentConfig, data: SyntheticEpisode, point: int) -> PointResult:
    t_dis = cfg.t_dis_sweep[point]
    mdp = cfg.mdp_config(t_dis)
    budget = cfg.link_budget()
    dt = data.power.tau
    n_train, n_total = cfg.data.train_samples, cfg.data.train_samples + cfg.data.test_samples
    rates_bps = shannon_rate(data.power.powers, budget)
    dtype = np.float32 if cfg.train.dtype == "float32" else np.float64
    img_env = split_envs(data.frames, rates_bps, mdp, n_train, n_total, dt)
    pow_env = split_envs(data.power.powers, rates_bps, mdp, n_train, n_total, dt)

    trained = {"image": train_agent("image", cfg, mdp, img_env, point, dtype),
               "power": train_agent("power", cfg, mdp, pow_env, point, dtype)}
    evals: dict[str, EvalResult] = {
        "image": evaluate(trained["image"].best, img_env("test")),
        "power": evaluate(trained["power"].best, pow_env("test")),
    }
    thr = ThresholdPolicyCfg.from_los(budget.p_los_dbm, cfg.threshold.away_db, cfg.threshold.back_db)
    logs = {name: ev.log for name, ev in evals.items()}
    logs["threshold"] = run_episode(pow_env("test"), make_threshold_policy(thr))
    logs["oracle"] = oracle_log(rates_bps / 1e6, mdp, n_train, n_total, dt)

    onsets, ends = test_labels(cfg, data)
    metrics = [policy_metrics(t_dis, name, logs[name], onsets, ends, dt, cfg.report, trained.get(name))
               for name in POLICIES]
    leads = {name: lead_time(logs[name], onsets, ends, dt, cfg.report.lead_search_s) for name in POLICIES}
    margin = int(round(cfg.report.window_margin_s / dt))
    return PointResult(t_dis, metrics, logs, trained,
                       {name: ev.forward_seconds for name, ev in evals.items()},
                       event_bits(logs, onsets, ends, margin, dt), leads)


def test_labels(cfg: ExperimentConfig, data: SyntheticEpisode) -> tuple[list[int], list[int]]:
    """Blockages whose onset lies in the test split; indices are absolute sample numbers."""
    n_train, n_total = cfg.data.train_samples, cfg.data.train_samples + cfg.data.test_samples
    first = n_train + cfg.mdp.n_window
    keep = [(o, e) for o, e in zip(data.blockage_onsets, data.blockage_ends) if first <= o < n_total - 1]
    return [o for o, _ in keep], [e for _, e in keep]


def run_experiment(cfg: ExperimentConfig, workers: int = 1, write: bool = True,
                   data: SyntheticEpisode | None = None) -> RunReport:
    """Train and evaluate every policy at every sweep point; optionally persist all outputs."""
    data = data if data is not None else build_dataset(cfg)
    need = cfg.data.train_samples + cfg.data.test_samples
    if len(data) < need:
        raise InputError(f"dataset has {len(data)} samples, config needs {need}")
    indices = range(len(cfg.t_dis_sweep))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(run_point, [cfg] * len(indices), [data] * len(indices), indices))
    else:
        points = [run_point(cfg, data, i) for i in indices]
    onsets, ends = test_labels(cfg, data)
    report = RunReport(cfg, points, onsets=onsets, ends=ends)
    if write:
        report.run_dir = write_run(report, data)
    return report


# ---------------------------------------------------------------------------
# persistence


def run_directory(cfg: ExperimentConfig) -> Path:
    return cfg.resolved_output_dir() / f"{cfg.scenario}_seed{cfg.seed}_{cfg.digest()}"


def write_policy_log(lg: EpisodeLog, path) -> None:
    q = lg.q_values
    cum = lg.cumulative_bits()
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("t,t_ms,j,c,action,reward_mbps,cum_bits,q_a1,q_a2\n")
        for k in range(len(lg.t)):
            qs = ",".join(f"{v:.6f}" for v in q[k]) if q is not None else ","
            fh.write(f"{lg.t[k]},{lg.t[k] * lg.tau * 1e3:.3f},{lg.j[k]},{lg.c[k]},{lg.a[k]},"
                     f"{lg.reward_mbps[k]:.6f},{cum[k]:.1f},{qs}\n")


def read_policy_log(path, tau: float, n_window: int) -> EpisodeLog:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, usecols=(0, 2, 3, 4, 5), ndmin=2)
    return EpisodeLog(t=arr[:, 0].astype(int), j=arr[:, 1].astype(int), c=arr[:, 2].astype(int),
                      a=arr[:, 3].astype(int), reward_mbps=arr[:, 4], q_values=None, tau=tau, n_window=n_window)


def _point_dir(run_dir: Path, t_dis: float) -> Path:
    return run_dir / f"tdis_{int(round(t_dis * 1000)):03d}ms"


def write_run(report: RunReport, data: SyntheticEpisode) -> Path:
    cfg = report.config
    run_dir = run_directory(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.to_text(), encoding="utf-8", newline="\n")
    write_labels(report.onsets, report.ends, data.power.tau, run_dir / "labels.csv")
    (run_dir / "dataset.txt").write_text(f"sample_period_s = {data.power.tau!r}\nsamples = {len(data)}\n",
                                         encoding="utf-8", newline="\n")
    (run_dir / "report.csv").write_text(report.report_csv(), encoding="utf-8", newline="\n")
    (run_dir / "summary.md").write_text(report.markdown(), encoding="utf-8", newline="\n")
    with open(run_dir / "timing.csv", "w", newline="\n", encoding="utf-8") as fh:
        fh.write("t_dis_s,policy,decisions,mean_forward_ms,max_forward_ms\n")
        for p in report.points:
            for name, secs in p.forward_seconds.items():
                fh.write(f"{p.t_dis:.3f},{name},{len(secs)},{secs.mean() * 1e3:.4f},{secs.max() * 1e3:.4f}\n")
    for p in report.points:
        d = _point_dir(run_dir, p.t_dis)
        d.mkdir(exist_ok=True)
        for name, lg in p.logs.items():
            write_policy_log(lg, d / f"eval_{name}.csv")
        for name, tr in p.trained.items():
            tr.curve.write_csv(d / f"curve_{name}.csv")
            save_snapshot(tr.best.net, d / f"best_{name}.mmhq",
                          snapshot_sidecar(tr.best, p.t_dis, cfg.seed))
        with open(d / "forward_seconds.csv", "w", newline="\n", encoding="utf-8") as fh:
            fh.write("decision," + ",".join(p.forward_seconds) + "\n")
            cols = list(p.forward_seconds.values())
            for k in range(len(cols[0])):
                fh.write(f"{k}," + ",".join(f"{c[k]:.9f}" for c in cols) + "\n")
        with open(d / "leads.csv", "w", newline="\n", encoding="utf-8") as fh:
            fh.write("event,onset_index," + ",".join(f"lead_s_{n}" for n in POLICIES) + "\n")
            for k, o in enumerate(report.onsets):
                vals = ",".join("" if np.isnan(p.leads[n][k]) else f"{p.leads[n][k]:.3f}" for n in POLICIES)
                fh.write(f"{k},{o},{vals}\n")
        with open(d / "event_bits.csv", "w", newline="\n", encoding="utf-8") as fh:
            fh.write("event,t_ms," + ",".join(f"bits_{n}" for n in POLICIES) + ",crossover\n")
            for ev in p.events:
                flag = int(crossover(ev))
                for k, t in enumerate(ev["t"]):
                    bits = ",".join(f"{ev[n][k]:.1f}" for n in POLICIES)
                    fh.write(f"{ev['event']},{t * data.power.tau * 1e3:.3f},{bits},{flag}\n")
    return run_dir


def snapshot_sidecar(snap, t_dis: float, seed: int) -> dict:
    return {"iteration": snap.iteration, "score_mbps": round(snap.score_mbps, 6), "t_dis": t_dis,
            "seed": seed, "reward_scale": snap.reward_scale, "value_offset": snap.value_offset}


DETERMINISTIC_FILES = ("config.txt", "dataset.txt", "labels.csv", "report.csv", "summary.md")
POINT_DETERMINISTIC_FILES = tuple(f"eval_{n}.csv" for n in POLICIES) + (
    "curve_image.csv", "curve_power.csv", "leads.csv", "event_bits.csv")


def report_files(run_dir: Path) -> list[Path]:
    """Every persisted CSV/text output that must be reproducible from the config alone."""
    out = [run_dir / f for f in DETERMINISTIC_FILES]
    for d in sorted(p for p in run_dir.iterdir() if p.is_dir() and p.name.startswith("tdis_")):
        out += [d / f for f in POINT_DETERMINISTIC_FILES]
    return out


def recompute_report(run_dir) -> str:
    """Rebuild report.csv from the persisted per-policy logs, labels and learning curves."""
    run_dir = Path(run_dir)
    cfg = ExperimentConfig.load(run_dir / "config.txt")
    onsets, ends = read_labels(run_dir / "labels.csv")
    meta = dict(line.split(" = ", 1) for line in (run_dir / "dataset.txt").read_text().splitlines())
    dt = float(meta["sample_period_s"])
    lines = [PolicyMetrics.HEADER]
    for t_dis in cfg.t_dis_sweep:
        d = _point_dir(run_dir, t_dis)
        for name in POLICIES:
            lg = read_policy_log(d / f"eval_{name}.csv", dt, cfg.mdp.n_window)
            m = policy_metrics(t_dis, name, lg, onsets, ends, dt, cfg.report)
            if name in ("image", "power"):
                curve = np.loadtxt(d / f"curve_{name}.csv", delimiter=",", skiprows=1, ndmin=2)
                if len(curve):
                    best = int(np.argmax(curve[:, 1]))
                    m.best_iteration = int(curve[best, 0])
                    m.best_score_mbps = float(curve[best, 1])
                    m.final_score_mbps = float(curve[-1, 1])
                else:
                    m.best_iteration, m.best_score_mbps = 0, float(m.avg_rate_mbps)
            lines.append(m.csv_row())
    return "\n".join(lines) + "\n"

