"""DQN training loop: epsilon-greedy exploration, uniform replay, periodic target sync.

Each iteration runs one exploratory episode over the training split (one batch
update per environment step once the buffer holds a batch) followed by a greedy
performance test on the held-out split.  The best-scoring parameters are kept.

Rewards enter the network scaled by ``reward_scale`` (Mbit/s -> dimensionless);
Q-values reported by :func:`evaluate` are converted back to Mbit/s units.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .env import EpisodeLog, HandoverEnv, legal_actions, next_counters
from .errors import ContractViolation, InputError, TrainingDivergenceError
from .qfunc import IMAGE, POWER, QNetwork, RMSProp, copy_into


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
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
    optimizer: str = "rmsprop"
    reward_scale: float | None = None  # None -> (1 - gamma) / 200 per Mbit/s
    reward_offset_mbps: float = 0.0  # subtracted before scaling; argmax-invariant shift
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise InputError("gamma must lie in [0, 1)")
        if self.iterations < 0:
            raise InputError("iterations must be >= 0")
        if not 0 <= self.epsilon_end <= self.epsilon_start <= 1:
            raise InputError("need 0 <= epsilon_end <= epsilon_start <= 1")
        if self.epsilon_decrement < 0:
            raise InputError("epsilon_decrement must be >= 0")
        if not 0 < self.batch_size <= self.replay_capacity:
            raise InputError("need 0 < batch_size <= replay_capacity")
        if self.target_sync_every < 1 or self.learn_rate <= 0:
            raise InputError("target_sync_every and learn_rate must be positive")
        if self.optimizer not in ("rmsprop", "sgd"):
            raise InputError(f"unknown optimizer {self.optimizer!r}")

    @property
    def scale(self) -> float:
        if self.reward_scale is not None:
            return self.reward_scale
        return (1.0 - self.gamma) / 200.0 if self.gamma > 0 else 1.0 / 200.0

    def epsilon(self, iteration: int) -> float:
        return max(self.epsilon_start - self.epsilon_decrement * iteration, self.epsilon_end)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, theta, grad, mask=None):
        upd = self.lr * grad
        if mask is not None:
            upd = np.where(mask, upd, 0)
        theta -= upd.astype(theta.dtype)


def make_optimizer(net, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.learn_rate)
    return RMSProp(net.size, cfg.learn_rate, cfg.rms_decay, cfg.rms_eps, dtype=net.theta.dtype)


# ---------------------------------------------------------------------------
# replay


class ReplayBuffer:
    """Ring buffer of transitions stored as indices into the replayed source.

    A transition (s, a, r, s') is kept as (t, j, c, a, r, t', j', c', terminal):
    the windows are recovered from the source observations on sampling.
    """

    FIELDS = ("t", "j", "c", "a", "r", "t2", "j2", "c2", "term")

    def __init__(self, capacity: int):
        if capacity < 1:
            raise InputError("capacity must be positive")
        self.capacity = capacity
        self.inserted = 0
        self.data = {
            name: np.zeros(capacity, dtype=float if name == "r" else (bool if name == "term" else np.int64))
            for name in self.FIELDS
        }

    def __len__(self):
        return min(self.inserted, self.capacity)

    def push(self, t, j, c, a, r, t2, j2, c2, terminal) -> None:
        k = self.inserted % self.capacity
        for name, v in zip(self.FIELDS, (t, j, c, a, r, t2, j2, c2, terminal)):
            self.data[name][k] = v
        self.inserted += 1

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if len(self) == 0:
            raise ContractViolation("cannot sample an empty buffer")
        return rng.integers(0, len(self), size=n)

    def sample(self, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        idx = self.sample_indices(n, rng)
        return {name: arr[idx] for name, arr in self.data.items()}


def gather_windows(obs: np.ndarray, t: np.ndarray, n_window: int) -> np.ndarray:
    """Newest-first windows ending at each index in ``t``."""
    return obs[np.asarray(t)[:, None] - np.arange(n_window)[None, :]]


# ---------------------------------------------------------------------------
# acting


def select_action(qvals, legal, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy over ``legal`` (1-based); ties go to the lowest index.

    ``qvals`` may be a zero-argument callable so the forward pass is skipped
    whenever the action is forced or drawn at random.  A forced action consumes
    no random draw.
    """
    legal = sorted(legal)
    if not legal:
        raise ContractViolation("no legal action")
    if len(legal) == 1:
        return legal[0]
    if epsilon > 0 and rng.random() < epsilon:
        return legal[int(rng.integers(len(legal)))]
    q = qvals() if callable(qvals) else qvals
    q = np.asarray(q)
    best = legal[0]
    for a in legal[1:]:
        if q[a - 1] > q[best - 1]:
            best = a
    return best


def greedy_from_table(q: np.ndarray, j: int, c: int) -> int:
    if c != 0:
        return j
    return int(np.argmax(q)) + 1


# ---------------------------------------------------------------------------
# targets


class TargetCache:
    """Lazily filled Q-values of a frozen target network, keyed by source index.

    For the image network Q depends on (j, c) only through the head, so one
    embedding per index fills every (j, c) row at once.
    """

    def __init__(self, net, obs: np.ndarray, n_window: int, num_bs: int, c_max: int):
        self.net, self.obs, self.n = net, obs, n_window
        self.per_index = getattr(getattr(net, "arch", None), "variant", None) == IMAGE
        self.table = np.zeros((len(obs), num_bs, c_max + 1, num_bs))
        shape = (len(obs),) if self.per_index else (len(obs), num_bs, c_max + 1)
        self.known = np.zeros(shape, dtype=bool)

    def invalidate(self) -> None:
        self.known[:] = False

    def q(self, t: np.ndarray, j: np.ndarray, c: np.ndarray) -> np.ndarray:
        if self.per_index:
            miss = np.unique(t[~self.known[t]])
            if miss.size:
                self.table[miss] = self.net.q_table(gather_windows(self.obs, miss, self.n))
                self.known[miss] = True
        else:
            key = self.known[t, j - 1, c]
            if not key.all():
                tm, jm, cm = t[~key], j[~key], c[~key]
                self.table[tm, jm - 1, cm] = self.net.q_batch(gather_windows(self.obs, tm, self.n), jm, cm)
                self.known[tm, jm - 1, cm] = True
        return self.table[t, j - 1, c]


def build_targets(r, j2, c2, terminal, q_next: np.ndarray, gamma: float) -> np.ndarray:
    """y = r + gamma * max over legal a' of Q_target(s', a'); terminal samples use y = r.

    ``q_next`` holds the target network's Q-values at s' for every action.
    While a disruption is pending (c' != 0) the only legal action is j'.
    """
    r = np.asarray(r, dtype=float)
    q_next = np.asarray(q_next, dtype=float)
    j2 = np.asarray(j2)
    c2 = np.asarray(c2)
    best = np.where(c2 == 0, q_next.max(axis=1), q_next[np.arange(len(r)), j2 - 1])
    return r + gamma * np.where(np.asarray(terminal), 0.0, best)


# ---------------------------------------------------------------------------
# training


@dataclass
class PolicySnapshot:
    net: QNetwork
    iteration: int
    score_mbps: float  # same float as the learning-curve entry it was taken from
    reward_scale: float = 1.0
    value_offset: float = 0.0  # Mbit/s-epochs added back when reporting Q in rate units

    @property
    def score_bps(self) -> float:
        return self.score_mbps * 1e6


@dataclass
class LearningCurve:
    avg_rate_mbps: list[float] = field(default_factory=list)
    epsilon: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    divergences: list[tuple[int, int, str]] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.avg_rate_mbps)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            fh.write("iteration,avg_rate_mbps\n")
            for i, v in enumerate(self.avg_rate_mbps):
                fh.write(f"{i + 1},{v:.6f}\n")


@dataclass
class TrainResult:
    best: PolicySnapshot
    curve: LearningCurve
    final: QNetwork
    updates: int


def decision_indices(env: HandoverEnv) -> np.ndarray:
    return np.arange(env.start + env.cfg.n_window - 1, env.stop - 1)


def performance_test(net, env: HandoverEnv) -> float:
    """Time-average reward (Mbit/s) of the greedy policy; Q is tabulated up front."""
    ts = decision_indices(env)
    q = net.q_table(gather_windows(env.obs, ts, env.cfg.n_window))
    return _table_rollout(q, env)[0]


def _table_rollout(q: np.ndarray, env: HandoverEnv):
    c_max = env.cfg.c_max
    ts = decision_indices(env)
    rates = env.rates_mbps
    j, c = 1, 0
    total = 0.0
    actions = np.zeros(len(ts), dtype=int)
    for k, t in enumerate(ts):
        a = greedy_from_table(q[k, j - 1, c], j, c)
        actions[k] = a
        j, c = next_counters(j, c, a, c_max)
        if c == 0:
            total += rates[t + 1, j - 1]
    return total / len(ts), actions


def _check_env(net, env: HandoverEnv) -> None:
    arch = getattr(net, "arch", None)
    if arch is None or not hasattr(arch, "n_window"):
        return
    if arch.n_window != env.cfg.n_window or arch.num_bs != env.cfg.num_bs or arch.c_max != env.cfg.c_max:
        raise ContractViolation(
            f"network built for N={arch.n_window}, J={arch.num_bs}, c_max={arch.c_max}; "
            f"environment has N={env.cfg.n_window}, J={env.cfg.num_bs}, c_max={env.cfg.c_max}"
        )
    obs_shape = env.obs.shape[1:]
    expect = arch.frame_shape if arch.variant == IMAGE else (arch.num_bs,)
    if tuple(obs_shape) != tuple(expect):
        raise ContractViolation(f"{arch.variant} network cannot read observations of shape {obs_shape}")


def train(make_env: Callable[[str], HandoverEnv], net, cfg: TrainConfig, optimizer=None,
          progress: Callable[[int, float, float], None] | None = None) -> TrainResult:
    """Train ``net`` in place; returns the best snapshot and the learning curve.

    ``make_env("train")`` and ``make_env("test")`` give the two splits.
    """
    train_env, test_env = make_env("train"), make_env("test")
    if train_env.stop - train_env.start <= train_env.cfg.n_window + 1:
        raise InputError("training split is too short for the observation window")
    _check_env(net, train_env)
    _check_env(net, test_env)
    mdp = train_env.cfg
    rng = np.random.default_rng(cfg.seed)
    scale = cfg.scale
    offset = cfg.reward_offset_mbps
    n = mdp.n_window

    if getattr(getattr(net, "arch", None), "variant", None) == POWER:
        seg = np.asarray(train_env.obs[train_env.start:train_env.stop], dtype=float)
        net.set_power_normalisation(seg.mean(axis=0), seg.std(axis=0))

    opt = optimizer if optimizer is not None else make_optimizer(net, cfg)
    target = net.clone()
    cache = TargetCache(target, train_env.obs, n, mdp.num_bs, mdp.c_max)
    buffer = ReplayBuffer(cfg.replay_capacity)
    curve = LearningCurve()
    updates = 0

    def snapshot(it, score):
        return PolicySnapshot(net.clone(), it, score, scale, offset / (1.0 - cfg.gamma))

    best = snapshot(0, performance_test(net, test_env)) if cfg.iterations == 0 else None
    obs = train_env.obs
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        eps = cfg.epsilon(it)
        theta0 = net.theta.copy()
        opt_state = getattr(opt, "ms", None)
        opt_state = None if opt_state is None else opt_state.copy()
        losses = []
        try:
            s = train_env.reset()
            done = False
            while not done:
                a = select_action(lambda: net.forward(s), legal_actions(s, mdp.num_bs), eps, rng)
                s2, r, done = train_env.step(a)
                buffer.push(s.t, s.j, s.c, a, (r - offset) * scale, s2.t, s2.j, s2.c, done)
                s = s2
                if len(buffer) < cfg.batch_size:
                    continue
                b = buffer.sample(cfg.batch_size, rng)
                q_next = cache.q(b["t2"], b["j2"], b["c2"])
                y = build_targets(b["r"], b["j2"], b["c2"], b["term"], q_next, cfg.gamma)
                losses.append(_update(net, gather_windows(obs, b["t"], n), b["j"], b["c"], b["a"], y, opt))
                updates += 1
                if updates % cfg.target_sync_every == 0:
                    copy_into(target, net)
                    cache.invalidate()
        except TrainingDivergenceError as exc:
            net.theta[:] = theta0
            if opt_state is not None:
                opt.ms[:] = opt_state
            copy_into(target, net)
            cache.invalidate()
            curve.divergences.append((it, exc.batch_index, str(exc)))
        score = performance_test(net, test_env)
        curve.avg_rate_mbps.append(score)
        curve.epsilon.append(eps)
        curve.losses.append(float(np.mean(losses)) if losses else float("nan"))
        curve.seconds.append(time.perf_counter() - t0)
        if best is None or score > best.score_mbps:
            best = snapshot(it + 1, score)
        if progress is not None:
            progress(it, eps, score)
    return TrainResult(best, curve, net, updates)


def _update(net, windows, j, c, a, y, opt) -> float:
    loss, grad, _ = net.loss_and_grad(windows, j, c, a, y)
    opt.step(net.theta, grad, getattr(net, "trainable_mask", None))
    if not np.all(np.isfinite(net.theta)):
        raise TrainingDivergenceError("parameters became non-finite", 0)
    return loss


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    log: EpisodeLog
    forward_seconds: np.ndarray

    @property
    def average_rate_mbps(self) -> float:
        return self.log.average_reward

    @property
    def handovers(self) -> int:
        return self.log.handovers

    def cumulative_bits(self) -> np.ndarray:
        return self.log.cumulative_bits()

    def write_csv(self, path) -> None:
        write_eval_csv(self.log, path)


def evaluate(snapshot: PolicySnapshot | QNetwork, env: HandoverEnv,
             emit: Callable[[dict], None] | None = None, reward_scale: float | None = None) -> EvalResult:
    """Greedy rollout with one timed forward pass per decision epoch."""
    if isinstance(snapshot, PolicySnapshot):
        net, scale, shift = snapshot.net, snapshot.reward_scale, snapshot.value_offset
    else:
        net, scale, shift = snapshot, 1.0, 0.0
    if reward_scale is not None:
        scale = reward_scale
    _check_env(net, env)
    s = env.reset()
    rows, qs, times = [], [], []
    cum = 0.0
    done = False
    while not done:
        t0 = time.perf_counter_ns()
        q = net.forward(s)
        times.append((time.perf_counter_ns() - t0) * 1e-9)
        a = select_action(q, legal_actions(s, env.cfg.num_bs), 0.0, None)
        s2, r, done = env.step(a)
        rows.append((s.t, s.j, s.c, a, r))
        qs.append(np.asarray(q, dtype=float) / scale + shift)
        cum += r * 1e6 * env.dt
        if emit is not None:
            emit({"t": s.t, "j": s.j, "c": s.c, "q": qs[-1], "action": a, "reward_mbps": r, "cum_bits": cum})
        s = s2
    arr = np.array(rows, dtype=float)
    log = EpisodeLog(
        t=arr[:, 0].astype(int), j=arr[:, 1].astype(int), c=arr[:, 2].astype(int),
        a=arr[:, 3].astype(int), reward_mbps=arr[:, 4], q_values=np.array(qs),
        tau=env.dt, n_window=env.cfg.n_window,
    )
    return EvalResult(log, np.array(times))


def write_eval_csv(log: EpisodeLog, path) -> None:
    q = log.q_values if log.q_values is not None else np.full((len(log.t), 2), np.nan)
    cum = log.cumulative_bits()
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        cols = ",".join(f"q_a{k + 1}" for k in range(q.shape[1]))
        fh.write(f"t_ms,{cols},action,reward_mbps,cum_bits\n")
        for k in range(len(log.t)):
            qv = ",".join(f"{v:.6f}" for v in q[k])
            fh.write(f"{log.t[k] * log.tau * 1e3:.3f},{qv},{log.a[k]},{log.reward_mbps[k]:.6f},{cum[k]:.1f}\n")
