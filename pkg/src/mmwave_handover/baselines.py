"""Comparison policies: hindsight DP oracle, hysteresis threshold rule, power-state RL."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .agent import TrainConfig, TrainResult, train
from .channel import BLOCKAGE_THRESHOLD_DB, DEFAULT_P_LOS_DBM, LinkBudget, PowerTrace, shannon_rate
from .env import HandoverEnv, MdpConfig, MdpState, legal_actions, next_counters
from .errors import ContractViolation, InputError
from .qfunc import NetArch, QNetwork


@dataclass
class OracleResult:
    actions: np.ndarray  # one action per decision epoch
    total_reward: float  # sum of per-epoch rewards (Mbit/s x epochs)
    values: np.ndarray  # (K + 1, J, C): optimal reward-to-go before decision k
    n_window: int = 2
    dt: float = 0.030

    @property
    def average_rate(self) -> float:
        return self.total_reward / max(len(self.actions), 1)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            fh.write("t_ms,best_action,V_j1_c0,V_j2_c0\n")
            for k, a in enumerate(self.actions):
                t = k + self.n_window - 1
                fh.write(f"{t * self.dt * 1e3:.3f},{a},{self.values[k, 0, 0]:.6f},{self.values[k, 1, 0]:.6f}\n")


def _rates_of(trace, budget: LinkBudget | None) -> tuple[np.ndarray, float]:
    if isinstance(trace, PowerTrace):
        return shannon_rate(trace.powers, budget or LinkBudget()) / 1e6, trace.tau
    return np.asarray(trace, dtype=float), None


def oracle_dp(trace: PowerTrace | np.ndarray, cfg: MdpConfig, budget: LinkBudget | None = None,
              j0: int = 1, c0: int = 0) -> OracleResult:
    """Undiscounted finite-horizon optimum over (j, c) with the whole future known.

    ``trace`` is a power trace (rates via ``budget``) or a (T, J) rate array in
    Mbit/s.  Decisions are made at the N-th through the second-to-last sample,
    exactly as :class:`HandoverEnv` replays them.
    """
    rates, dt = _rates_of(trace, budget)
    if rates.ndim != 2 or rates.shape[1] != cfg.num_bs:
        raise InputError(f"rates must be (T, {cfg.num_bs}), got {rates.shape}")
    n = cfg.n_window
    k_len = len(rates) - n
    if k_len < 1:
        raise InputError(f"trace needs more than {n} samples, got {len(rates)}")
    num_bs, c_max = cfg.num_bs, cfg.c_max
    values = np.zeros((k_len + 1, num_bs, c_max + 1))
    for k in range(k_len - 1, -1, -1):
        r_next = rates[k + n]  # rewards are read one sample after the decision
        v_next = values[k + 1]
        for j in range(1, num_bs + 1):
            for c in range(c_max + 1):
                best = -np.inf
                for a in legal_actions(MdpState(None, j, c), num_bs):
                    j2, c2 = next_counters(j, c, a, c_max)
                    v = (r_next[j2 - 1] if c2 == 0 else 0.0) + v_next[j2 - 1, c2]
                    best = max(best, v)
                values[k, j - 1, c] = best

    actions = np.zeros(k_len, dtype=int)
    j, c = j0, c0
    for k in range(k_len):
        r_next = rates[k + n]
        target = values[k, j - 1, c]
        for a in legal_actions(MdpState(None, j, c), num_bs):
            j2, c2 = next_counters(j, c, a, c_max)
            v = (r_next[j2 - 1] if c2 == 0 else 0.0) + values[k + 1, j2 - 1, c2]
            if v >= target:
                break
        actions[k] = a
        j, c = j2, c2
    return OracleResult(actions, float(values[0, j0 - 1, c0]), values, n, dt if dt else cfg.tau)


def brute_force_best(rates: np.ndarray, cfg: MdpConfig, j0: int = 1, c0: int = 0) -> float:
    """Exhaustive search over every legal action sequence (small traces only)."""
    rates = np.asarray(rates, dtype=float)
    n = cfg.n_window
    k_len = len(rates) - n
    best = -np.inf
    for seq in itertools.product(range(1, cfg.num_bs + 1), repeat=k_len):
        j, c, total = j0, c0, 0.0
        for k, a in enumerate(seq):
            if c != 0 and a != j:
                break
            j, c = next_counters(j, c, a, cfg.c_max)
            total += rates[k + n, j - 1] if c == 0 else 0.0
        else:
            best = max(best, total)
    return best


def replay_total(rates: np.ndarray, actions, cfg: MdpConfig, j0: int = 1, c0: int = 0) -> float:
    """Total reward of an action sequence under the same indexing as :func:`oracle_dp`."""
    rates = np.asarray(rates, dtype=float)
    n = cfg.n_window
    j, c, total = j0, c0, 0.0
    for k, a in enumerate(actions):
        if c != 0 and a != j:
            raise ContractViolation(f"action {a} illegal at epoch {k} (j={j}, c={c})")
        j, c = next_counters(j, c, a, cfg.c_max)
        total += rates[k + n, j - 1] if c == 0 else 0.0
    return total


# ---------------------------------------------------------------------------
# threshold rule


@dataclass(frozen=True)
class ThresholdPolicyCfg:
    switch_to_2_below_dbm: float = DEFAULT_P_LOS_DBM - BLOCKAGE_THRESHOLD_DB
    switch_back_above_dbm: float = DEFAULT_P_LOS_DBM - 1.0

    def __post_init__(self):
        if self.switch_back_above_dbm < self.switch_to_2_below_dbm:
            raise InputError("switch_back_above_dbm must be >= switch_to_2_below_dbm")

    @classmethod
    def from_los(cls, p_los_dbm: float, away_db: float = BLOCKAGE_THRESHOLD_DB,
                 back_db: float = 1.0) -> "ThresholdPolicyCfg":
        return cls(p_los_dbm - away_db, p_los_dbm - back_db)


def threshold_policy(window, cfg: ThresholdPolicyCfg, j: int) -> int:
    """Hysteresis rule on the newest BS1 power sample of a power window."""
    w = np.asarray(window)
    if w.ndim != 2 or w.shape[1] < 2 or w.dtype == np.uint8:
        raise ContractViolation(f"threshold rule needs a (N, J) power window, got shape {w.shape}")
    p1 = w[0, 0]
    if j == 1 and p1 < cfg.switch_to_2_below_dbm:
        return 2
    if j == 2 and p1 > cfg.switch_back_above_dbm:
        return 1
    return j


def make_threshold_policy(cfg: ThresholdPolicyCfg) -> Callable[[MdpState], int]:
    def policy(s: MdpState) -> int:
        if s.c != 0:
            return s.j
        return threshold_policy(s.window, cfg, s.j)
    return policy


# ---------------------------------------------------------------------------
# received-power RL


def power_state_dim(n_window: int, num_bs: int) -> int:
    """Input width of the power network: N x J powers, one-hot j, scaled c."""
    return n_window * num_bs + num_bs + 1


def train_rp_baseline(make_env: Callable[[str], HandoverEnv], cfg: TrainConfig,
                      mdp: MdpConfig | None = None, init_seed: int = 0, dtype=np.float32,
                      **arch_kw) -> TrainResult:
    """The same training loop as the image agent, on power windows with the small network."""
    mdp = mdp or make_env("train").cfg
    arch = NetArch.power(n_window=mdp.n_window, num_bs=mdp.num_bs, c_max=mdp.c_max, **arch_kw)
    net = QNetwork(arch, np.random.default_rng(init_seed), dtype=dtype)
    return train(make_env, net, cfg)
