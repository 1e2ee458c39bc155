"""Handover decision process with service-disruption bookkeeping.

The environment replays a recorded (or synthesised) observation sequence; only
the association ``j`` and the remaining-disruption counter ``c`` evolve with
the controller's actions.  BS indices are 1-based throughout the public API.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, InputError


@dataclass(frozen=True)
class MdpConfig:
    n_window: int = 2
    tau: float = 0.030
    t_dis: float = 0.0
    num_bs: int = 2
    gamma: float = 0.99

    def __post_init__(self):
        if self.n_window < 1:
            raise InputError("n_window must be >= 1")
        if self.num_bs < 2:
            raise InputError("num_bs must be >= 2")
        if self.tau <= 0 or self.t_dis < 0:
            raise InputError("tau must be > 0 and t_dis >= 0")
        if not 0 <= self.gamma < 1:
            raise InputError("gamma must lie in [0, 1)")

    @property
    def c_max(self) -> int:
        # 0.09 / 0.03 is 2.9999999999999996 in binary floating point
        return int(math.floor(self.t_dis / self.tau + 1e-9))


@dataclass(frozen=True, eq=False)
class MdpState:
    """Observation window (newest first), associated BS ``j`` and disruption counter ``c``.

    ``t`` is the index of the newest observation in the replayed source, -1 if unknown.
    """

    window: np.ndarray
    j: int
    c: int
    t: int = -1


@dataclass(frozen=True)
class TransitionSample:
    s: MdpState
    a: int
    r: float
    s_next: MdpState
    terminal: bool = False


def legal_actions(s: MdpState, num_bs: int = 2) -> tuple[int, ...]:
    if s.c == 0:
        return tuple(range(1, num_bs + 1))
    return (s.j,)


def next_counters(j: int, c: int, a: int, c_max: int) -> tuple[int, int]:
    """(j_next, c_next) after action ``a``; a handover starts a c_max-epoch countdown."""
    if c != 0:
        return a, c - 1
    if a != j:
        return a, c_max
    return a, 0


def reward(s_next: MdpState, rates: Sequence[float]) -> float:
    """Rate of the newly associated BS, or zero while the disruption lasts."""
    if s_next.c != 0:
        return 0.0
    return float(rates[s_next.j - 1])


def check_action(s: MdpState, a: int, num_bs: int) -> None:
    if a not in legal_actions(s, num_bs):
        raise ContractViolation(f"action {a} is illegal in state j={s.j}, c={s.c}")


def step(s: MdpState, a: int, next_observation, cfg: MdpConfig) -> MdpState:
    check_action(s, a, cfg.num_bs)
    j_next, c_next = next_counters(s.j, s.c, a, cfg.c_max)
    obs = np.asarray(next_observation)
    window = np.concatenate([obs[None], s.window[:-1]], axis=0)
    return MdpState(window, j_next, c_next, s.t + 1 if s.t >= 0 else -1)


@dataclass
class EpisodeLog:
    """Per-epoch record of one rollout; arrays are aligned with decision epochs."""

    t: np.ndarray
    j: np.ndarray
    c: np.ndarray
    a: np.ndarray
    reward_mbps: np.ndarray
    q_values: np.ndarray | None = None
    transitions: list[TransitionSample] = field(default_factory=list, repr=False)
    tau: float = 0.030
    n_window: int = 2

    @property
    def average_reward(self) -> float:
        return float(self.reward_mbps.mean()) if len(self.reward_mbps) else 0.0

    @property
    def handovers(self) -> int:
        return int(np.sum((self.c == 0) & (self.a != self.j)))

    def cumulative_bits(self) -> np.ndarray:
        return np.cumsum(self.reward_mbps * 1e6 * self.tau)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            fh.write("t,j,c,a,reward_mbps,window_first,window_last\n")
            for k in range(len(self.t)):
                t = int(self.t[k])
                fh.write(f"{t},{self.j[k]},{self.c[k]},{self.a[k]},{self.reward_mbps[k]:.6f},"
                         f"{t - self.n_window + 1},{t}\n")


class HandoverEnv:
    """Replays observations ``obs[start:stop]`` with per-BS rates in bit/s."""

    def __init__(self, observations: np.ndarray, rates_bps: np.ndarray, cfg: MdpConfig,
                 start: int = 0, stop: int | None = None, dt: float | None = None):
        rates_bps = np.asarray(rates_bps, dtype=float)
        if len(observations) != len(rates_bps):
            raise InputError(f"observation count {len(observations)} != rate rows {len(rates_bps)}")
        if rates_bps.ndim != 2 or rates_bps.shape[1] != cfg.num_bs:
            raise InputError(f"rates must be (T, {cfg.num_bs}), got {rates_bps.shape}")
        stop = len(observations) if stop is None else stop
        if stop - start < cfg.n_window + 1:
            raise InputError(
                f"episode needs at least {cfg.n_window + 1} observations, got {stop - start}"
            )
        self.obs = observations
        self.rates_mbps = rates_bps / 1e6
        self.cfg = cfg
        # sample spacing of the source; may differ from cfg.tau (30 fps frames vs 30 ms epochs)
        self.dt = cfg.tau if dt is None else dt
        self.start, self.stop = start, stop
        self.state: MdpState | None = None

    def __len__(self):
        return self.stop - self.start

    @property
    def n_decisions(self) -> int:
        return self.stop - self.start - self.cfg.n_window

    def window(self, t: int) -> np.ndarray:
        n = self.cfg.n_window
        return self.obs[t - n + 1:t + 1][::-1]

    def reset(self) -> MdpState:
        t = self.start + self.cfg.n_window - 1
        self.state = MdpState(self.window(t), 1, 0, t)
        return self.state

    @property
    def done(self) -> bool:
        return self.state is not None and self.state.t >= self.stop - 1

    def step(self, a: int) -> tuple[MdpState, float, bool]:
        s = self.state
        if s is None or self.done:
            raise ContractViolation("step() called on a finished or unreset episode")
        check_action(s, a, self.cfg.num_bs)
        j_next, c_next = next_counters(s.j, s.c, a, self.cfg.c_max)
        t = s.t + 1
        self.state = MdpState(self.window(t), j_next, c_next, t)
        r = reward(self.state, self.rates_mbps[t])
        return self.state, r, self.done


Policy = Callable[[MdpState], int]


def run_episode(env: HandoverEnv, policy: Policy, keep_transitions: bool = False) -> EpisodeLog:
    """Roll ``policy`` from (j=1, c=0) at the N-th observation to the end of the source."""
    s = env.reset()
    rows = []
    transitions = []
    done = False
    while not done:
        a = policy(s)
        s_next, r, done = env.step(a)
        rows.append((s.t, s.j, s.c, a, r))
        if keep_transitions:
            transitions.append(TransitionSample(s, a, r, s_next, terminal=done))
        s = s_next
    arr = np.array(rows, dtype=float)
    return EpisodeLog(
        t=arr[:, 0].astype(int),
        j=arr[:, 1].astype(int),
        c=arr[:, 2].astype(int),
        a=arr[:, 3].astype(int),
        reward_mbps=arr[:, 4],
        transitions=transitions,
        tau=env.dt,
        n_window=env.cfg.n_window,
    )


def replay_actions(rates_mbps: np.ndarray, actions: Sequence[int], cfg: MdpConfig,
                   j0: int = 1, c0: int = 0) -> np.ndarray:
    """Rewards of an open-loop action sequence; ``actions[k]`` is taken at epoch k, rewarded at k+1."""
    j, c = j0, c0
    out = np.zeros(len(actions))
    for k, a in enumerate(actions):
        if c != 0 and a != j:
            raise ContractViolation(f"action {a} illegal at epoch {k} (j={j}, c={c})")
        j, c = next_counters(j, c, a, cfg.c_max)
        out[k] = rates_mbps[k + 1][j - 1] if c == 0 else 0.0
    return out
