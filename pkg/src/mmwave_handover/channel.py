"""60 GHz blockage channel: event sampling, attenuation profiles, power traces, rates.

Blockage events follow the five fitted laws of the indoor measurement campaign
(decay/rise 5 dB crossing times, mean attenuation, event duration, LOS gaps).
Every random draw goes through an explicit ``numpy.random.Generator`` so traces
are pure functions of their seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import FormatError, InputError, ParameterError

BLOCKAGE_THRESHOLD_DB = 3.0
P2_DEFAULT_DBM = -129.0


def dbm_to_watt(p_dbm):
    return 10.0 ** ((np.asarray(p_dbm, dtype=float) - 30.0) / 10.0)


def watt_to_dbm(p_w):
    return 10.0 * np.log10(np.asarray(p_w, dtype=float)) + 30.0


def power_for_rate(rate_bps: float, bandwidth_hz: float, noise_psd_dbm_per_hz: float) -> float:
    """Received power (dBm) at which the Shannon rate equals ``rate_bps``."""
    snr = 2.0 ** (rate_bps / bandwidth_hz) - 1.0
    noise_w = float(dbm_to_watt(noise_psd_dbm_per_hz)) * bandwidth_hz
    return float(watt_to_dbm(snr * noise_w))


DEFAULT_BANDWIDTH_HZ = 40e6
DEFAULT_NOISE_PSD_DBM_PER_HZ = -173.0
# LOS level calibrated so the unblocked link carries ~200 Mbit/s.
DEFAULT_LOS_RATE_BPS = 200e6
DEFAULT_P_LOS_DBM = power_for_rate(DEFAULT_LOS_RATE_BPS, DEFAULT_BANDWIDTH_HZ, DEFAULT_NOISE_PSD_DBM_PER_HZ)


@dataclass(frozen=True)
class BlockageDistParams:
    """Distribution parameters of blockage events (seconds / dB)."""

    decay5db_mean: float = 0.059
    decay5db_std: float = 0.034
    rise5db_logmean: float = -3.01
    rise5db_logstd: float = 0.195
    atten_mean_db: float = 14.2
    atten_std_db: float = 2.08
    duration_scale: float = 0.553
    duration_shape: float = 4.08
    los_scale: float = 2.31
    los_shape: float = 1.51

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not math.isfinite(value):
                raise ParameterError(f"{f.name} must be finite, got {value}")
        for name in ("decay5db_std", "rise5db_logstd", "atten_std_db", "duration_scale",
                     "duration_shape", "los_scale", "los_shape", "decay5db_mean", "atten_mean_db"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be strictly positive, got {getattr(self, name)}")

    def mean_duration(self) -> float:
        return self.duration_scale * math.gamma(1.0 + 1.0 / self.duration_shape)

    def mean_los(self) -> float:
        return self.los_scale * math.gamma(1.0 + 1.0 / self.los_shape)


@dataclass(frozen=True)
class BlockageEvent:
    onset: float
    t_decay: float
    t_hold: float
    t_rise: float
    depth_db: float

    @property
    def duration(self) -> float:
        return self.t_decay + self.t_hold + self.t_rise

    @property
    def end(self) -> float:
        return self.onset + self.duration


@dataclass
class AttenuationTrace:
    dt: float
    samples: np.ndarray

    def __len__(self):
        return len(self.samples)


@dataclass
class PowerTrace:
    """Received powers per BS sampled every ``tau`` seconds."""

    tau: float
    p1_dbm: np.ndarray
    p2_dbm: np.ndarray

    def __post_init__(self):
        self.p1_dbm = np.asarray(self.p1_dbm, dtype=float)
        self.p2_dbm = np.asarray(self.p2_dbm, dtype=float)
        if self.tau <= 0:
            raise InputError(f"tau must be positive, got {self.tau}")
        if self.p1_dbm.shape != self.p2_dbm.shape or self.p1_dbm.ndim != 1:
            raise InputError(
                f"p1/p2 length mismatch: {self.p1_dbm.shape} vs {self.p2_dbm.shape}"
            )

    def __len__(self):
        return len(self.p1_dbm)

    @property
    def powers(self) -> np.ndarray:
        """(T, 2) array of per-BS received powers."""
        return np.stack([self.p1_dbm, self.p2_dbm], axis=1)

    def times(self) -> np.ndarray:
        return np.arange(len(self)) * self.tau

    def slice(self, start: int, stop: int) -> "PowerTrace":
        return PowerTrace(self.tau, self.p1_dbm[start:stop].copy(), self.p2_dbm[start:stop].copy())


@dataclass(frozen=True)
class LinkBudget:
    p_los_dbm: float = DEFAULT_P_LOS_DBM
    bandwidth_hz: float = DEFAULT_BANDWIDTH_HZ
    noise_psd_dbm_per_hz: float = DEFAULT_NOISE_PSD_DBM_PER_HZ

    def __post_init__(self):
        if not self.bandwidth_hz > 0:
            raise ParameterError(f"bandwidth must be positive, got {self.bandwidth_hz}")

    @property
    def noise_w(self) -> float:
        return float(dbm_to_watt(self.noise_psd_dbm_per_hz)) * self.bandwidth_hz


def shannon_rate(p_dbm, budget: LinkBudget):
    """Achievable rate in bit/s, W log2(1 + p / (sigma^2 W)); vectorised over ``p_dbm``."""
    snr = dbm_to_watt(p_dbm) / budget.noise_w
    rate = budget.bandwidth_hz * np.log2(1.0 + snr)
    return float(rate) if np.ndim(rate) == 0 else rate


# ---------------------------------------------------------------------------
# sampling


def _truncated_normal(rng: np.random.Generator, mean: float, std: float) -> float:
    # resample non-positive draws
    while True:
        x = rng.normal(mean, std)
        if x > 0:
            return float(x)


def sample_event_shape(params: BlockageDistParams, total: float, rng: np.random.Generator):
    """Draw (t_decay, t_hold, t_rise, depth) for an event lasting ``total`` seconds.

    Full ramp times extrapolate the 5 dB crossing times linearly to the sampled
    depth; ramps longer than the event are shrunk proportionally.
    """
    decay5 = _truncated_normal(rng, params.decay5db_mean, params.decay5db_std)
    rise5 = float(rng.lognormal(params.rise5db_logmean, params.rise5db_logstd))
    depth = _truncated_normal(rng, params.atten_mean_db, params.atten_std_db)
    t_decay = decay5 * depth / 5.0
    t_rise = rise5 * depth / 5.0
    ramps = t_decay + t_rise
    if ramps > total:
        t_decay *= total / ramps
        t_rise *= total / ramps
    t_hold = max(total - t_decay - t_rise, 0.0)
    return t_decay, t_hold, t_rise, depth


def sample_blockage_events(params: BlockageDistParams, duration: float,
                           rng: np.random.Generator) -> list[BlockageEvent]:
    """Alternate Weibull LOS gaps and Weibull blockage durations over ``[0, duration)``."""
    if duration < 0 or not math.isfinite(duration):
        raise InputError(f"duration must be finite and >= 0, got {duration}")
    events: list[BlockageEvent] = []
    t = 0.0
    while True:
        gap = params.los_scale * rng.weibull(params.los_shape)
        onset = t + gap
        if onset >= duration:
            break
        total = params.duration_scale * rng.weibull(params.duration_shape)
        t_decay, t_hold, t_rise, depth = sample_event_shape(params, total, rng)
        events.append(BlockageEvent(onset, t_decay, t_hold, t_rise, depth))
        t = onset + t_decay + t_hold + t_rise
    return events


def blocked_time_fraction(events: Sequence[BlockageEvent], duration: float) -> float:
    if duration <= 0:
        return 0.0
    inside = sum(max(0.0, min(e.end, duration) - e.onset) for e in events)
    return inside / duration


# ---------------------------------------------------------------------------
# rendering


def event_profile(event: BlockageEvent, times: np.ndarray) -> np.ndarray:
    """Trapezoidal attenuation (dB) of one event at ``times``."""
    u = np.asarray(times, dtype=float) - event.onset
    out = np.zeros_like(u)
    d, h, r = event.t_decay, event.t_hold, event.t_rise
    if d > 0:
        m = (u >= 0) & (u < d)
        out[m] = event.depth_db * u[m] / d
    m = (u >= d) & (u < d + h)
    out[m] = event.depth_db
    if r > 0:
        m = (u >= d + h) & (u < d + h + r)
        out[m] = event.depth_db * (d + h + r - u[m]) / r
    return out


def _n_samples(duration: float, dt: float) -> int:
    return int(math.floor(duration / dt + 1e-9))


def render_attenuation(events: Sequence[BlockageEvent], dt: float, duration: float) -> AttenuationTrace:
    """Sample the dB attenuation of non-overlapping events every ``dt`` seconds."""
    if not dt > 0:
        raise InputError(f"dt must be positive, got {dt}")
    for prev, nxt in zip(events, events[1:]):
        if nxt.onset < prev.end:
            raise InputError(
                f"overlapping events: [{prev.onset:.6f}, {prev.end:.6f}) and onset {nxt.onset:.6f}"
            )
    n = _n_samples(duration, dt)
    samples = np.zeros(n)
    for e in events:
        lo = max(0, int(math.floor(e.onset / dt)))
        hi = min(n, int(math.ceil(e.end / dt)) + 1)
        if lo >= hi:
            continue
        idx = np.arange(lo, hi)
        samples[lo:hi] = np.maximum(samples[lo:hi], event_profile(e, idx * dt))
    return AttenuationTrace(dt, samples)


def synth_power_trace(budget: LinkBudget, atten: AttenuationTrace, tau: float,
                      noise_db_std: float = 0.5, rng: np.random.Generator | None = None,
                      p2_dbm: float = P2_DEFAULT_DBM) -> PowerTrace:
    """Decimate an attenuation trace to ``tau`` and add dB observation noise on BS1."""
    if tau < atten.dt * (1 - 1e-9):
        raise InputError(f"tau={tau} is finer than the attenuation step {atten.dt}")
    ratio = tau / atten.dt
    step = int(round(ratio))
    if abs(ratio - step) > 1e-6 * max(1.0, ratio):
        raise InputError(f"tau={tau} is not an integer multiple of dt={atten.dt}")
    picked = atten.samples[::step]
    p1 = budget.p_los_dbm - picked
    if noise_db_std > 0:
        if rng is None:
            raise InputError("a random source is required when noise_db_std > 0")
        p1 = p1 + rng.normal(0.0, noise_db_std, size=p1.shape)
    return PowerTrace(tau, p1, np.full_like(p1, p2_dbm))


# ---------------------------------------------------------------------------
# estimation


def fit_weibull(x) -> tuple[float, float]:
    """Maximum-likelihood (scale, shape) of a two-parameter Weibull sample."""
    x = np.asarray(x, dtype=float)
    if x.size < 2 or np.any(x <= 0):
        raise ParameterError("Weibull fit needs at least two positive values")
    norm = x.mean()
    y = x / norm
    ly = np.log(y)
    if np.allclose(y, y[0]):
        raise ParameterError("Weibull fit undefined for a constant sample")

    def score(k):
        yk = y ** k
        return (yk * ly).sum() / yk.sum() - 1.0 / k - ly.mean()

    lo, hi = 1e-3, 1.0
    while score(hi) < 0:
        hi *= 2.0
        if hi > 1e4:
            raise ParameterError("Weibull shape does not converge")
    k = brentq(score, lo, hi, xtol=1e-12, rtol=1e-12)
    scale = norm * np.mean(y ** k) ** (1.0 / k)
    return float(scale), float(k)


@dataclass
class BlockageStats:
    n_events: int
    blocked_fraction: float
    fit_defined: bool
    params: BlockageDistParams | None
    durations: np.ndarray = field(repr=False)
    depths: np.ndarray = field(repr=False)
    decay5: np.ndarray = field(repr=False)
    rise5: np.ndarray = field(repr=False)
    los_gaps: np.ndarray = field(repr=False)
    spans: list[tuple[int, int]] = field(repr=False, default_factory=list)


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Inclusive (start, stop) index pairs of True runs."""
    if not mask.any():
        return []
    m = np.concatenate([[False], mask, [False]]).astype(np.int8)
    d = np.diff(m)
    starts = np.flatnonzero(d == 1)
    stops = np.flatnonzero(d == -1) - 1
    return list(zip(starts.tolist(), stops.tolist()))


def detect_events(atten: np.ndarray, threshold_db: float = BLOCKAGE_THRESHOLD_DB,
                  edge_tol_db: float = 0.1) -> list[tuple[int, int]]:
    """Events are runs above ``threshold_db``, widened to where attenuation fades out."""
    spans = []
    for lo, hi in _runs(atten > threshold_db):
        while lo > 0 and atten[lo - 1] > edge_tol_db:
            lo -= 1
        while hi < len(atten) - 1 and atten[hi + 1] > edge_tol_db:
            hi += 1
        if spans and lo <= spans[-1][1] + 1:
            spans[-1] = (spans[-1][0], max(hi, spans[-1][1]))
        else:
            spans.append((lo, hi))
    return spans


def _crossing_time(a0: float, a1: float, level: float) -> float:
    """Fraction in [0, 1] where the segment a0->a1 crosses ``level``."""
    if a1 == a0:
        return 0.0
    return float(np.clip((level - a0) / (a1 - a0), 0.0, 1.0))


def estimate_blockage_stats(trace: PowerTrace, los_reference_dbm: float,
                            edge_tol_db: float = 0.1, plateau_tol_db: float = 1.0) -> BlockageStats:
    """Detect blockage events in BS1's power and refit the five distribution laws."""
    if len(trace) < 2:
        raise InputError("trace needs at least two samples")
    tau = trace.tau
    atten = los_reference_dbm - trace.p1_dbm
    spans = detect_events(atten, BLOCKAGE_THRESHOLD_DB, edge_tol_db)
    durations, depths, decay5, rise5 = [], [], [], []
    for lo, hi in spans:
        seg = atten[lo:hi + 1]
        durations.append((hi - lo + 1) * tau)
        peak = seg.max()
        depths.append(seg[seg >= peak - plateau_tol_db].mean())
        above = np.flatnonzero(seg >= 5.0)
        if above.size:
            k = above[0]
            prev = seg[k - 1] if k > 0 else 0.0
            frac = _crossing_time(prev, seg[k], 5.0)
            # event starts half a sample before its first non-zero sample
            decay5.append((k - 1 + frac + 0.5) * tau)
            k = above[-1]
            nxt = seg[k + 1] if k + 1 < seg.size else 0.0
            frac = _crossing_time(seg[k], nxt, 5.0)
            rise5.append((seg.size - 1 - k - frac + 0.5) * tau)
    gaps = [(spans[i + 1][0] - spans[i][1] - 1) * tau for i in range(len(spans) - 1)]
    inside = sum(hi - lo + 1 for lo, hi in spans)
    stats = BlockageStats(
        n_events=len(spans),
        blocked_fraction=inside / len(trace),
        fit_defined=False,
        params=None,
        durations=np.array(durations),
        depths=np.array(depths),
        decay5=np.array(decay5),
        rise5=np.array(rise5),
        los_gaps=np.array([g for g in gaps if g > 0]),
        spans=spans,
    )
    if len(spans) < 3 or stats.decay5.size < 2:
        return stats
    try:
        d_scale, d_shape = fit_weibull(stats.durations)
        l_scale, l_shape = fit_weibull(stats.los_gaps)
        with np.errstate(all="raise"):
            stats.params = BlockageDistParams(
                decay5db_mean=float(stats.decay5.mean()),
                decay5db_std=float(stats.decay5.std()),
                rise5db_logmean=float(np.log(stats.rise5).mean()),
                rise5db_logstd=float(np.log(stats.rise5).std()),
                atten_mean_db=float(stats.depths.mean()),
                atten_std_db=float(stats.depths.std()),
                duration_scale=d_scale,
                duration_shape=d_shape,
                los_scale=l_scale,
                los_shape=l_shape,
            )
        stats.fit_defined = True
    except (ParameterError, FloatingPointError):
        stats.params = None
    return stats


# ---------------------------------------------------------------------------
# CSV


def write_power_csv(trace: PowerTrace, path) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("t_ms,p1_dbm,p2_dbm\n")
        for k in range(len(trace)):
            fh.write(f"{k * trace.tau * 1000.0:.3f},{trace.p1_dbm[k]:.6f},{trace.p2_dbm[k]:.6f}\n")


def read_power_csv(path) -> PowerTrace:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != "t_ms,p1_dbm,p2_dbm":
            raise FormatError(f"unexpected power CSV header {header!r}", row=0)
        t, p1, p2 = [], [], []
        for row, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise FormatError(f"expected 3 columns, got {len(parts)}", row=row)
            try:
                vals = [float(v) for v in parts]
            except ValueError as exc:
                raise FormatError(f"unparseable number: {exc}", row=row) from None
            if t and vals[0] <= t[-1]:
                raise FormatError(f"non-monotone timestamp {vals[0]} after {t[-1]}", row=row)
            t.append(vals[0])
            p1.append(vals[1])
            p2.append(vals[2])
    if len(t) < 2:
        raise FormatError("power CSV needs at least two rows", row=len(t))
    steps = np.diff(t)
    tau_ms = float(np.median(steps))
    bad = np.flatnonzero(np.abs(steps - tau_ms) > 1e-3 + 1e-6 * tau_ms)
    if bad.size:
        raise FormatError(f"irregular sampling step {steps[bad[0]]} ms (expected {tau_ms})",
                          row=int(bad[0]) + 2)
    return PowerTrace(tau_ms / 1000.0, np.array(p1), np.array(p2))
