import numpy as np
import pytest
from scipy import stats

from mmwave_handover.agent import (
    PolicySnapshot,
    ReplayBuffer,
    TargetCache,
    TrainConfig,
    build_targets,
    evaluate,
    gather_windows,
    performance_test,
    select_action,
    train,
    write_eval_csv,
)
from mmwave_handover.env import HandoverEnv, MdpConfig
from mmwave_handover.errors import ContractViolation, InputError, TrainingDivergenceError
from mmwave_handover.qfunc import NetArch, QNetwork


def test_epsilon_schedule_exact():
    cfg = TrainConfig()
    for i in range(0, 150):
        assert cfg.epsilon(i) == max(1 - 0.01 * i, 0.01)
    assert cfg.epsilon(99) == pytest.approx(0.01)


def test_select_action_examples():
    rng = np.random.default_rng(0)
    assert select_action([5.0, 7.0], {1, 2}, 0.0, rng) == 2
    assert select_action([7.0, 7.0], {1, 2}, 0.0, rng) == 1
    assert select_action([0.0, 9.0], {1}, 1.0, rng) == 1
    with pytest.raises(ContractViolation):
        select_action([0.0], set(), 0.5, rng)


def test_forced_action_draws_nothing():
    a, b = np.random.default_rng(3), np.random.default_rng(3)
    for _ in range(10):
        select_action([1.0, 0.0], {2}, 0.7, a)
    assert a.random() == b.random()


def test_exploration_frequency():
    rng = np.random.default_rng(1)
    picks = np.array([select_action([0.0, 1.0], {1, 2}, 1.0, rng) for _ in range(100_000)])
    assert np.mean(picks == 1) == pytest.approx(0.5, abs=0.01)


def test_lazy_q_skipped_when_random():
    calls = []
    rng = np.random.default_rng(2)
    for _ in range(50):
        select_action(lambda: calls.append(1) or [0.0, 1.0], {1, 2}, 1.0, rng)
    assert calls == []


def test_build_targets():
    r = np.array([1.0, 2.0])
    q = np.array([[3.0, 5.0], [4.0, 1.0]])
    assert np.array_equal(build_targets(r, [1, 1], [0, 0], [False, False], q, 0.0), r)
    # second sample is mid-disruption on BS1: only a' = 1 is legal
    y = build_targets(r, [2, 1], [0, 2], [False, False], q, 0.5)
    assert y.tolist() == [1.0 + 0.5 * 5.0, 2.0 + 0.5 * 4.0]
    y = build_targets(r, [2, 2], [1, 0], [False, True], q, 0.9)
    assert y.tolist() == [1.0 + 0.9 * 5.0, 2.0]


def test_replay_ring_and_uniformity():
    buf = ReplayBuffer(50)
    for k in range(80):
        buf.push(k, 1, 0, 1, float(k), k + 1, 1, 0, False)
    assert len(buf) == 50 and buf.inserted == 80
    assert set(buf.data["t"]) == set(range(30, 80))
    idx = buf.sample_indices(200_000, np.random.default_rng(4))
    counts = np.bincount(idx, minlength=50)
    assert stats.chisquare(counts).pvalue > 0.01
    with pytest.raises(ContractViolation):
        ReplayBuffer(3).sample_indices(1, np.random.default_rng(0))


def test_gather_windows_newest_first():
    obs = np.arange(10)[:, None] * np.ones((1, 2))
    w = gather_windows(obs, np.array([3, 7]), 3)
    assert w[:, :, 0].tolist() == [[3, 2, 1], [7, 6, 5]]


def _power_split(rates_mbps, t_dis=0.0, t_train=None):
    T = len(rates_mbps)
    rates = np.asarray(rates_mbps, dtype=float) * 1e6
    obs = np.column_stack([np.full(T, -82.0), np.full(T, -85.0)]) + np.random.default_rng(0).normal(0, 0.1, (T, 2))
    mdp = MdpConfig(t_dis=t_dis)
    tp = t_train or T // 2

    def make_env(split):
        return HandoverEnv(obs, rates, mdp, 0, tp, dt=0.03) if split == "train" else HandoverEnv(obs, rates, mdp, tp, T, dt=0.03)

    return make_env, mdp


def _power_net(mdp, seed=0):
    return QNetwork(NetArch.power(c_max=mdp.c_max), np.random.default_rng(seed))


def test_zero_iterations_snapshot():
    make_env, mdp = _power_split(np.tile([200.0, 100.0], (200, 1)))
    net = _power_net(mdp)
    res = train(make_env, net, TrainConfig(iterations=0))
    assert res.best.iteration == 0 and len(res.curve) == 0
    assert res.best.score_mbps == pytest.approx(200.0)  # Q = 0 ties break to BS1
    assert np.array_equal(res.best.net.theta[net.trainable_mask], net.theta[net.trainable_mask])


def test_constant_rates_bs1_best_never_hands_over():
    make_env, mdp = _power_split(np.tile([200.0, 120.0], (400, 1)), t_dis=0.06)
    cfg = TrainConfig(iterations=6, epsilon_decrement=0.2, target_sync_every=100, learn_rate=1e-3, seed=1)
    res = train(make_env, _power_net(mdp), cfg)
    ev = evaluate(res.best, make_env("test"))
    assert ev.handovers == 0
    assert ev.average_rate_mbps == pytest.approx(200.0)


def test_constant_rates_bs2_best_moves_to_bs2():
    make_env, mdp = _power_split(np.tile([80.0, 150.0], (400, 1)))
    cfg = TrainConfig(iterations=6, epsilon_decrement=0.2, target_sync_every=100, learn_rate=1e-3, seed=2)
    res = train(make_env, _power_net(mdp), cfg)
    ev = evaluate(res.best, make_env("test"))
    assert ev.average_rate_mbps == pytest.approx(150.0)
    assert np.all(ev.log.a == 2)


def test_best_snapshot_is_curve_max_and_reproducible():
    rng = np.random.default_rng(5)
    rates = np.column_stack([np.where(rng.random(600) < 0.2, 40.0, 200.0), np.full(600, 150.0)])
    make_env, mdp = _power_split(rates, t_dis=0.03)
    cfg = TrainConfig(iterations=8, epsilon_decrement=0.15, target_sync_every=100, learn_rate=1e-3, seed=3)
    res = train(make_env, _power_net(mdp), cfg)
    assert len(res.curve) == 8
    assert res.best.score_mbps == max(res.curve.avg_rate_mbps)
    assert res.best.iteration == int(np.argmax(res.curve.avg_rate_mbps)) + 1
    assert performance_test(res.best.net, make_env("test")) == pytest.approx(res.best.score_mbps)
    again = train(make_env, _power_net(mdp), cfg)
    assert again.curve.avg_rate_mbps == res.curve.avg_rate_mbps


def test_table_rollout_matches_causal_rollout():
    rng = np.random.default_rng(6)
    rates = np.column_stack([rng.uniform(20, 200, 300), rng.uniform(20, 200, 300)])
    make_env, mdp = _power_split(rates, t_dis=0.06)
    net = _power_net(mdp)
    net.p["heads"][:] = rng.normal(0, 1, net.p["heads"].shape)
    env = make_env("test")
    assert performance_test(net, env) == pytest.approx(evaluate(net, env).average_rate_mbps)


def test_evaluate_outputs(tmp_path):
    make_env, mdp = _power_split(np.tile([100.0, 50.0], (668, 1)), t_train=334)
    env = make_env("test")
    seen = []
    ev = evaluate(_power_net(mdp), env, emit=seen.append)
    assert len(ev.log.q_values) == len(seen) == env.n_decisions == 332
    assert ev.cumulative_bits()[-1] == pytest.approx(100e6 * 0.03 * 332)
    assert len(ev.forward_seconds) == 332 and np.all(ev.forward_seconds >= 0)
    path = tmp_path / "eval.csv"
    write_eval_csv(ev.log, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t_ms,q_a1,q_a2,action,reward_mbps,cum_bits"
    assert len(lines) == 333


def test_target_cache_is_frozen_between_syncs():
    rng = np.random.default_rng(7)
    obs = rng.normal(-85, 3, (50, 2))
    net = QNetwork(NetArch.power(c_max=1), rng)
    net.p["heads"][:] = rng.normal(0, 1, net.p["heads"].shape)
    target = net.clone()
    cache = TargetCache(target, obs, 2, 2, 1)
    t, j, c = np.arange(5, 15), np.ones(10, int), np.zeros(10, int)
    before = cache.q(t, j, c).copy()
    net.theta += 1.0  # online network moves; the target does not
    assert np.array_equal(cache.q(t, j, c), before)
    assert np.array_equal(before, target.q_batch(gather_windows(obs, t, 2), j, c))


def test_bad_configs():
    with pytest.raises(InputError):
        TrainConfig(batch_size=64, replay_capacity=32)
    with pytest.raises(InputError):
        TrainConfig(gamma=1.0)


# ---------------------------------------------------------------------------
# tabular sanity: exact lookup-table approximator on a 3-state cyclic MDP


class TabularQ:
    """Lookup table Q[x, j, c, a] over an observed state id x."""

    def __init__(self, n_states, num_bs=2, c_max=0, theta=None):
        self.shape = (n_states, num_bs, c_max + 1, num_bs)
        self.arch = ("tabular", self.shape)
        self.size = int(np.prod(self.shape))
        self.theta = np.zeros(self.size) if theta is None else theta.copy()
        self.trainable_mask = np.ones(self.size, dtype=bool)

    @property
    def table(self):
        return self.theta.reshape(self.shape)

    def clone(self):
        return TabularQ(self.shape[0], self.shape[1], self.shape[2] - 1, self.theta)

    def q_batch(self, windows, j, c):
        x = np.asarray(windows)[:, 0, 0].astype(int)
        return self.table[x, np.asarray(j) - 1, np.asarray(c)]

    def forward(self, s):
        return self.q_batch(np.asarray(s.window)[None], [s.j], [s.c])[0]

    def q_table(self, windows):
        return self.table[np.asarray(windows)[:, 0, 0].astype(int)]

    def loss_and_grad(self, windows, j, c, a, y):
        x = np.asarray(windows)[:, 0, 0].astype(int)
        j, c, a = np.asarray(j), np.asarray(c), np.asarray(a)
        q = self.table[x, j - 1, c, a - 1]
        err = q - y
        grad = np.zeros(self.shape)
        np.add.at(grad, (x, j - 1, c, a - 1), err / len(y))
        return 0.5 * float(np.mean(err ** 2)), grad.ravel(), q


def test_tabular_training_reaches_value_iteration_fixed_point():
    # episode ends bias one entry by about (terminal share) * gamma * V; long episodes keep it < 1e-4
    gamma = 0.8
    nxt = np.array([1, 2, 0])
    rew = np.array([[1.0, 0.2], [0.1, 0.8], [0.5, 0.6]])  # R[x', a]
    q = np.zeros((3, 2))
    for _ in range(2000):  # independent value iteration
        q = rew[nxt] + gamma * q[nxt].max(axis=1, keepdims=True)
    T = 20000
    x = np.arange(T) % 3
    obs = np.stack([x, x], axis=1).astype(float)
    rates = rew[x] * 1e6
    mdp = MdpConfig(t_dis=0.0)

    def make_env(split):
        return HandoverEnv(obs, rates, mdp, 0, T, dt=0.03) if split == "train" else HandoverEnv(obs, rates, mdp, 0, 300, dt=0.03)

    net = TabularQ(3)
    cfg = TrainConfig(gamma=gamma, iterations=4, epsilon_decrement=0.3, batch_size=32, target_sync_every=50,
                      optimizer="sgd", learn_rate=2.0, reward_scale=1.0, seed=0)
    train(make_env, net, cfg)
    for j in (0, 1):
        assert np.max(np.abs(net.table[:, j, 0, :] - q)) < 1e-3


def test_divergence_restores_and_continues():
    make_env, mdp = _power_split(np.tile([200.0, 100.0], (200, 1)))
    net = _power_net(mdp)
    calls = {"n": 0}
    real = net.loss_and_grad

    def flaky(*args):
        calls["n"] += 1
        if calls["n"] == 40:
            raise TrainingDivergenceError("non-finite loss", 7)
        return real(*args)

    net.loss_and_grad = flaky
    cfg = TrainConfig(iterations=2, epsilon_decrement=0.5, target_sync_every=50, learn_rate=1e-3)
    res = train(make_env, net, cfg)
    assert len(res.curve) == 2
    assert res.curve.divergences and res.curve.divergences[0][:2] == (0, 7)
    assert np.all(np.isfinite(res.final.theta))


def test_snapshot_value_offset_restores_rate_units():
    make_env, mdp = _power_split(np.tile([200.0, 100.0], (100, 1)))
    net = _power_net(mdp)
    snap = PolicySnapshot(net, 0, 0.0, reward_scale=0.5, value_offset=10.0)
    ev = evaluate(snap, make_env("test"))
    assert np.all(ev.log.q_values == 10.0)
