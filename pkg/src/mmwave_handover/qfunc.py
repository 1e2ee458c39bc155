"""Action-value networks with hand-written backpropagation.

Both variants end in a multi-head linear layer: one weight vector per
(associated BS j, disruption counter c, action a) applied to a shared
embedding ``h``, so ``Q(s, a) = <theta[j, c, a], h(window)>``.

* image: per-frame conv stack -> LSTM over the N frames (oldest first)
  -> ReLU embedding (512) -> heads
* power: standardised power window + one-hot j + scaled c -> ReLU(8)
  -> ReLU(32) -> heads

All parameters live in one flat vector with named segment views, which makes
cloning, snapshots and finite-difference checks straightforward.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .env import MdpState
from .errors import ContractViolation, FormatError, TrainingDivergenceError

IMAGE, POWER = "image", "power"


@dataclass(frozen=True)
class NetArch:
    variant: str
    n_window: int = 2
    num_bs: int = 2
    c_max: int = 0
    conv_layers: tuple[tuple[int, int, int], ...] = ((8, 4, 2), (16, 3, 2))
    frame_shape: tuple[int, int] = (40, 40)
    recurrent_units: int = 128
    embed_units: int = 512
    hidden_units_power: int = 8

    def __post_init__(self):
        if self.variant not in (IMAGE, POWER):
            raise ContractViolation(f"unknown variant {self.variant!r}")
        if self.embed_units <= 0:
            raise ContractViolation("embed_units must be positive")

    @classmethod
    def image(cls, n_window=2, num_bs=2, c_max=0, **kw) -> "NetArch":
        return cls(IMAGE, n_window, num_bs, c_max, **kw)

    @classmethod
    def power(cls, n_window=2, num_bs=2, c_max=0, **kw) -> "NetArch":
        kw.setdefault("embed_units", 32)
        return cls(POWER, n_window, num_bs, c_max, **kw)

    @property
    def head_shape(self) -> tuple[int, int, int]:
        return (self.num_bs, self.c_max + 1, self.num_bs)

    @property
    def power_input_dim(self) -> int:
        return self.n_window * self.num_bs + self.num_bs + 1

    def conv_output_shapes(self) -> list[tuple[int, int, int]]:
        h, w = self.frame_shape
        shapes = []
        for filters, k, s in self.conv_layers:
            h, w = (h - k) // s + 1, (w - k) // s + 1
            shapes.append((h, w, filters))
        return shapes

    def segments(self) -> list[tuple[str, tuple[int, ...], bool]]:
        """Ordered (name, shape, trainable) triples of the flat parameter vector."""
        segs = []
        if self.variant == IMAGE:
            channels = 1
            for i, (filters, k, _) in enumerate(self.conv_layers):
                segs.append((f"conv{i}.w", (filters, channels, k, k), True))
                segs.append((f"conv{i}.b", (filters,), True))
                channels = filters
            h, w, f = self.conv_output_shapes()[-1]
            d, u = h * w * f, self.recurrent_units
            segs += [
                ("lstm.wx", (d, 4 * u), True),
                ("lstm.wh", (u, 4 * u), True),
                ("lstm.b", (4 * u,), True),
                ("embed.w", (u, self.embed_units), True),
                ("embed.b", (self.embed_units,), True),
            ]
        else:
            d, hdn = self.power_input_dim, self.hidden_units_power
            segs += [
                ("fc1.w", (d, hdn), True),
                ("fc1.b", (hdn,), True),
                ("fc2.w", (hdn, self.embed_units), True),
                ("fc2.b", (self.embed_units,), True),
            ]
        segs.append(("heads", self.head_shape + (self.embed_units,), True))
        if self.variant == POWER:
            segs.append(("norm.mean", (self.num_bs,), False))
            segs.append(("norm.std", (self.num_bs,), False))
        return segs

    def n_params(self, trainable_only: bool = True) -> int:
        return sum(int(np.prod(shape)) for _, shape, tr in self.segments() if tr or not trainable_only)

    def descriptor(self) -> list[int]:
        vals = [0 if self.variant == IMAGE else 1, self.n_window, self.num_bs, self.c_max,
                self.embed_units, self.hidden_units_power, self.recurrent_units,
                self.frame_shape[0], self.frame_shape[1], len(self.conv_layers)]
        for layer in self.conv_layers:
            vals += list(layer)
        return vals

    @classmethod
    def from_descriptor(cls, vals: list[int]) -> "NetArch":
        n_conv = vals[9]
        convs = tuple(tuple(vals[10 + 3 * i:13 + 3 * i]) for i in range(n_conv))
        return cls(
            variant=IMAGE if vals[0] == 0 else POWER,
            n_window=vals[1], num_bs=vals[2], c_max=vals[3], embed_units=vals[4],
            hidden_units_power=vals[5], recurrent_units=vals[6],
            frame_shape=(vals[7], vals[8]), conv_layers=convs,
        )


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _im2col(x: np.ndarray, k: int, s: int) -> np.ndarray:
    """(B, H, W, C) -> (B, Ho, Wo, C*k*k) patches ordered (C, ki, kj)."""
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
    b, ho, wo, c = win.shape[:4]
    return win.reshape(b, ho, wo, c * k * k)


def _col2im(dcols: np.ndarray, in_shape, k: int, s: int) -> np.ndarray:
    b, h, w, c = in_shape
    _, ho, wo, _ = dcols.shape
    d = dcols.reshape(b, ho, wo, c, k, k)
    dx = np.zeros(in_shape, dtype=dcols.dtype)
    for di in range(k):
        for dj in range(k):
            dx[:, di:di + s * (ho - 1) + 1:s, dj:dj + s * (wo - 1) + 1:s, :] += d[..., di, dj]
    return dx


@dataclass
class _Cache:
    embed: np.ndarray
    store: dict = field(default_factory=dict)


class QNetwork:
    """Multi-head action-value approximator over a flat parameter vector."""

    def __init__(self, arch: NetArch, rng: np.random.Generator | None = None,
                 dtype=np.float64, theta: np.ndarray | None = None):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        self._segs = arch.segments()
        sizes = [int(np.prod(shape)) for _, shape, _ in self._segs]
        self.size = sum(sizes)
        if theta is not None:
            if theta.shape != (self.size,):
                raise ContractViolation(f"theta has {theta.shape}, arch needs ({self.size},)")
            self.theta = np.array(theta, dtype=self.dtype)
        else:
            self.theta = np.zeros(self.size, dtype=self.dtype)
        self.offsets = {}
        off = 0
        for (name, shape, trainable), n in zip(self._segs, sizes):
            self.offsets[name] = (off, off + n, shape, trainable)
            off += n
        self.p = {name: self.theta[a:b].reshape(shape) for name, (a, b, shape, _) in self.offsets.items()}
        self.trainable_mask = np.zeros(self.size, dtype=bool)
        for a, b, _, tr in self.offsets.values():
            self.trainable_mask[a:b] = tr
        if theta is None:
            self._init(rng or np.random.default_rng(0))

    # -- construction -----------------------------------------------------

    def _init(self, rng: np.random.Generator) -> None:
        for name, (a, b, shape, trainable) in self.offsets.items():
            if not trainable or name.endswith(".b") or name == "heads":
                continue
            if name.startswith("lstm"):
                bound = 1.0 / np.sqrt(self.arch.recurrent_units)
            else:
                fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
                bound = np.sqrt(6.0 / fan_in)
            self.theta[a:b] = rng.uniform(-bound, bound, size=b - a)
        if self.arch.variant == IMAGE:
            u = self.arch.recurrent_units
            self.p["lstm.b"][u:2 * u] = 1.0  # forget-gate bias
        else:
            self.p["norm.std"][:] = 1.0

    def clone(self) -> "QNetwork":
        return QNetwork(self.arch, dtype=self.dtype, theta=self.theta.copy())

    def copy_into(self, target: "QNetwork") -> None:
        copy_into(target, self)

    def set_power_normalisation(self, mean, std) -> None:
        if self.arch.variant != POWER:
            raise ContractViolation("only the power network standardises its inputs")
        std = np.where(np.asarray(std) > 1e-9, std, 1.0)
        self.p["norm.mean"][:] = mean
        self.p["norm.std"][:] = std

    def segment(self, name: str) -> np.ndarray:
        return self.p[name]

    # -- forward ----------------------------------------------------------

    def _check_windows(self, windows: np.ndarray) -> None:
        a = self.arch
        expect = (a.n_window,) + (a.frame_shape if a.variant == IMAGE else (a.num_bs,))
        if windows.shape[1:] != expect:
            raise ContractViolation(f"window shape {windows.shape[1:]} does not match {expect}")

    def _conv_stack(self, windows: np.ndarray, keep: bool, store: dict) -> np.ndarray:
        """(B, N, H, W) newest-first windows -> (B, N, D) per-frame features, oldest first."""
        a = self.arch
        b, n = windows.shape[:2]
        x = windows[:, ::-1].reshape(b * n, *a.frame_shape, 1).astype(self.dtype) / 255.0
        for i, (filters, k, s) in enumerate(a.conv_layers):
            cols = _im2col(x, k, s)
            w = self.p[f"conv{i}.w"].reshape(filters, -1)
            z = cols @ w.T + self.p[f"conv{i}.b"]
            if keep:
                store[f"conv{i}"] = (x.shape, cols, z)
            x = np.maximum(z, 0)
        return x.reshape(b, n, -1)

    def _recurrent_embed(self, xw: np.ndarray, keep: bool, store: dict) -> np.ndarray:
        """Unroll the LSTM over input projections ``xw`` (B, N, 4U) and embed its last output."""
        u = self.arch.recurrent_units
        b, n = xw.shape[:2]
        xw = xw + self.p["lstm.b"]
        h = np.zeros((b, u), dtype=self.dtype)
        c = np.zeros((b, u), dtype=self.dtype)
        steps = []
        for t in range(n):
            z = xw[:, t] + h @ self.p["lstm.wh"]
            i_g = _sigmoid(z[:, :u])
            f_g = _sigmoid(z[:, u:2 * u])
            g_g = np.tanh(z[:, 2 * u:3 * u])
            o_g = _sigmoid(z[:, 3 * u:])
            c_prev, h_prev = c, h
            c = f_g * c_prev + i_g * g_g
            tc = np.tanh(c)
            h = o_g * tc
            if keep:
                steps.append((i_g, f_g, g_g, o_g, c_prev, h_prev, tc))
        ze = h @ self.p["embed.w"] + self.p["embed.b"]
        if keep:
            store.update(steps=steps, h_last=h, ze=ze)
        return np.maximum(ze, 0)

    def _input_projection(self, feats: np.ndarray) -> np.ndarray:
        b, n, d = feats.shape
        return (feats.reshape(b * n, d) @ self.p["lstm.wx"]).reshape(b, n, -1)

    def _image_features(self, windows: np.ndarray, keep: bool):
        store = {}
        feats = self._conv_stack(windows, keep, store)
        if keep:
            store["feats"] = feats
        emb = self._recurrent_embed(self._input_projection(feats), keep, store)
        return emb, store

    def _power_input(self, windows: np.ndarray, j: np.ndarray, c: np.ndarray) -> np.ndarray:
        a = self.arch
        b = windows.shape[0]
        z = (windows - self.p["norm.mean"]) / self.p["norm.std"]
        onehot = np.zeros((b, a.num_bs), dtype=self.dtype)
        onehot[np.arange(b), j - 1] = 1.0
        cs = (c / a.c_max if a.c_max > 0 else np.zeros(b)).reshape(b, 1)
        return np.concatenate([z.reshape(b, -1), onehot, cs], axis=1).astype(self.dtype)

    def _power_features(self, x: np.ndarray, keep: bool):
        z1 = x @ self.p["fc1.w"] + self.p["fc1.b"]
        a1 = np.maximum(z1, 0)
        z2 = a1 @ self.p["fc2.w"] + self.p["fc2.b"]
        emb = np.maximum(z2, 0)
        return emb, ({"x": x, "z1": z1, "a1": a1, "z2": z2} if keep else {})

    def embed(self, windows: np.ndarray, j=None, c=None, keep: bool = False) -> _Cache:
        windows = np.asarray(windows)
        self._check_windows(windows)
        if self.arch.variant == IMAGE:
            emb, store = self._image_features(windows, keep)
        else:
            x = self._power_input(windows, np.asarray(j), np.asarray(c))
            emb, store = self._power_features(x, keep)
        return _Cache(emb, store)

    def heads_q(self, emb: np.ndarray, j: np.ndarray, c: np.ndarray) -> np.ndarray:
        """(B, A) Q-values for embeddings and 1-based ``j``, counters ``c``."""
        w = self.p["heads"][np.asarray(j) - 1, np.asarray(c)]  # (B, A, E)
        return np.einsum("bae,be->ba", w, emb)

    def q_batch(self, windows, j, c) -> np.ndarray:
        j = np.asarray(j)
        c = np.asarray(c)
        if np.any(c > self.arch.c_max) or np.any(c < 0) or np.any(j < 1) or np.any(j > self.arch.num_bs):
            raise ContractViolation("state counters outside the network's head grid")
        cache = self.embed(windows, j, c)
        return self.heads_q(cache.embed, j, c)

    def forward(self, s: MdpState) -> np.ndarray:
        """Q-values of every action (index a-1) in state ``s``."""
        return self.q_batch(np.asarray(s.window)[None], [s.j], [s.c])[0]

    def q_table(self, windows: np.ndarray, chunk: int = 256) -> np.ndarray:
        """(T, J, C, A) Q-values of each window under every (j, c) combination."""
        a = self.arch
        t_len = len(windows)
        out = np.zeros((t_len, a.num_bs, a.c_max + 1, a.num_bs))
        for lo in range(0, t_len, chunk):
            w = np.asarray(windows[lo:lo + chunk])
            b = len(w)
            if a.variant == IMAGE:
                emb = self.embed(w).embed
                out[lo:lo + b] = np.einsum("jcae,be->bjca", self.p["heads"], emb)
            else:
                for jj in range(1, a.num_bs + 1):
                    for cc in range(a.c_max + 1):
                        emb = self.embed(w, np.full(b, jj), np.full(b, cc)).embed
                        out[lo:lo + b, jj - 1, cc] = emb @ self.p["heads"][jj - 1, cc].T
        return out

    # -- backward ---------------------------------------------------------

    def loss_and_grad(self, windows, j, c, a, y) -> tuple[float, np.ndarray, np.ndarray]:
        """Loss 0.5 * mean((Q(s,a) - y)^2), its gradient, and the selected Q-values."""
        windows = np.asarray(windows)
        j = np.asarray(j)
        c = np.asarray(c)
        a = np.asarray(a)
        y = np.asarray(y, dtype=self.dtype)
        b = len(y)
        cache = self.embed(windows, j, c, keep=True)
        emb = cache.embed
        q_all = self.heads_q(emb, j, c)
        q = q_all[np.arange(b), a - 1]
        err = q - y
        loss = 0.5 * float(np.mean(err * err))
        if not np.isfinite(loss):
            bad = np.flatnonzero(~np.isfinite(err))
            raise TrainingDivergenceError("non-finite loss", int(bad[0]) if bad.size else 0)
        dq = err / b
        grad = np.zeros(self.size, dtype=self.dtype)
        g = {name: grad[lo:hi].reshape(shape) for name, (lo, hi, shape, _) in self.offsets.items()}
        heads = self.p["heads"]
        # only the selected head of each sample receives gradient
        np.add.at(g["heads"], (j - 1, c, a - 1), dq[:, None] * emb)
        demb = dq[:, None] * heads[j - 1, c, a - 1]
        if self.arch.variant == IMAGE:
            self._image_backward(cache.store, demb, g)
        else:
            self._power_backward(cache.store, demb, g)
        return loss, grad, q

    def _power_backward(self, st, demb, g):
        dz2 = demb * (st["z2"] > 0)
        g["fc2.w"] += st["a1"].T @ dz2
        g["fc2.b"] += dz2.sum(0)
        dz1 = (dz2 @ self.p["fc2.w"].T) * (st["z1"] > 0)
        g["fc1.w"] += st["x"].T @ dz1
        g["fc1.b"] += dz1.sum(0)

    def _image_backward(self, st, demb, g):
        a = self.arch
        u = a.recurrent_units
        dze = demb * (st["ze"] > 0)
        g["embed.w"] += st["h_last"].T @ dze
        g["embed.b"] += dze.sum(0)
        dh = dze @ self.p["embed.w"].T
        dc = np.zeros_like(dh)
        feats = st["feats"]
        b, n, d = feats.shape
        dxw = np.zeros((b, n, 4 * u), dtype=self.dtype)
        wh = self.p["lstm.wh"]
        for t in reversed(range(n)):
            i_g, f_g, g_g, o_g, c_prev, h_prev, tc = st["steps"][t]
            do = dh * tc
            dc = dc + dh * o_g * (1 - tc * tc)
            di = dc * g_g
            dg = dc * i_g
            df = dc * c_prev
            dz = np.concatenate([
                di * i_g * (1 - i_g),
                df * f_g * (1 - f_g),
                dg * (1 - g_g * g_g),
                do * o_g * (1 - o_g),
            ], axis=1)
            dxw[:, t] = dz
            g["lstm.wh"] += h_prev.T @ dz
            dh = dz @ wh.T
            dc = dc * f_g
        dz_all = dxw.reshape(b * n, 4 * u)
        g["lstm.b"] += dz_all.sum(0)
        g["lstm.wx"] += feats.reshape(b * n, d).T @ dz_all
        dx = (dz_all @ self.p["lstm.wx"].T)
        for i in reversed(range(len(a.conv_layers))):
            filters, k, s = a.conv_layers[i]
            in_shape, cols, z = st[f"conv{i}"]
            dz = dx.reshape(z.shape) * (z > 0)
            dzf = dz.reshape(-1, filters)
            g[f"conv{i}.w"] += (dzf.T @ cols.reshape(dzf.shape[0], -1)).reshape(g[f"conv{i}.w"].shape)
            g[f"conv{i}.b"] += dzf.sum(0)
            if i > 0:
                w = self.p[f"conv{i}.w"].reshape(filters, -1)
                dx = _col2im((dzf @ w).reshape(z.shape[:3] + (w.shape[1],)), in_shape, k, s)


def copy_into(target: QNetwork, source: QNetwork) -> None:
    if target.arch != source.arch:
        raise ContractViolation(f"architecture mismatch: {target.arch} vs {source.arch}")
    target.theta[:] = source.theta


def clone_params(net: QNetwork) -> QNetwork:
    return net.clone()


class RMSProp:
    """Per-parameter step scaling by a running RMS of past gradients."""

    def __init__(self, size: int, lr: float = 2.5e-4, decay: float = 0.95, eps: float = 1e-6,
                 dtype=np.float64):
        self.lr, self.decay, self.eps = lr, decay, eps
        self.ms = np.zeros(size, dtype=dtype)
        self._tmp = np.empty(size, dtype=dtype)

    def step(self, theta: np.ndarray, grad: np.ndarray, mask: np.ndarray | None = None) -> None:
        tmp = self._tmp
        np.multiply(grad, grad, out=tmp)
        tmp *= 1 - self.decay
        self.ms *= self.decay
        self.ms += tmp
        np.sqrt(self.ms, out=tmp)
        tmp += self.eps
        np.divide(grad, tmp, out=tmp)
        tmp *= self.lr
        if mask is not None and not mask.all():
            tmp[~mask] = 0
        theta -= tmp


def backward_update(net: QNetwork, windows, j, c, a, y, opt: RMSProp) -> float:
    """One RMSProp step on the squared TD error of a batch; returns the pre-step loss."""
    if len(np.atleast_1d(y)) == 0:
        raise ContractViolation("empty batch")
    if not np.all(np.isfinite(y)):
        bad = int(np.flatnonzero(~np.isfinite(np.asarray(y, dtype=float)))[0])
        raise TrainingDivergenceError("non-finite target", bad)
    loss, grad, _ = net.loss_and_grad(windows, j, c, a, y)
    opt.step(net.theta, grad, net.trainable_mask)
    if not np.all(np.isfinite(net.theta)):
        raise TrainingDivergenceError("parameters became non-finite", 0)
    return loss


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradientReport:
    max_rel_error: float
    per_segment: dict[str, float]
    n_checked: int


def grad_check(net: QNetwork, s: MdpState, a: int, epsilon: float = 1e-6, y: float = 1.0,
               n_params: int = 240, rng: np.random.Generator | None = None,
               segments: list[str] | None = None) -> GradientReport:
    """Central differences of 0.5 (Q(s,a) - y)^2 against the analytic gradient.

    Parameters are sampled per segment; for the head segment only the head
    selected by (s.j, s.c, a) is sampled since every other head has zero gradient.
    The perturbed forward passes run in extended precision on a copy of the
    network, so roundoff does not swamp the tiny gradients of saturated units.
    """
    if epsilon <= 0:
        raise ContractViolation("epsilon must be positive")
    rng = rng or np.random.default_rng(0)
    windows = np.asarray(s.window)[None]
    jj, cc, aa = np.array([s.j]), np.array([s.c]), np.array([a])
    _, grad, _ = net.loss_and_grad(windows, jj, cc, aa, np.array([y]))
    hp = QNetwork(net.arch, dtype=np.longdouble, theta=net.theta)
    wl = windows.astype(np.longdouble)
    theta = hp.theta
    y_l = np.longdouble(y)
    eps_l = np.longdouble(epsilon)
    image = net.arch.variant == IMAGE
    if image:
        # parameters downstream of the conv stack reuse its output
        feats = hp._conv_stack(wl, False, {})
        xw = hp._input_projection(feats)
        wx_lo = net.offsets["lstm.wx"][0]
        n_gates = 4 * net.arch.recurrent_units

    def q_at(i, delta):
        if not image:
            return hp.q_batch(wl, jj, cc)[0, a - 1]
        proj = xw
        if i < wx_lo:
            # conv parameter: project only the features that actually moved
            df = hp._conv_stack(wl, False, {}) - feats
            moved = np.flatnonzero(np.any(df != 0, axis=(0, 1)))
            proj = xw + df[..., moved] @ hp.p["lstm.wx"][moved]
        elif i < net.offsets["lstm.wx"][1]:
            r, col = divmod(i - wx_lo, n_gates)
            proj = xw.copy()
            proj[..., col] += delta * feats[..., r]
        emb = hp._recurrent_embed(proj, False, {})
        return hp.heads_q(emb, jj, cc)[0, a - 1]

    names = segments or [n for n, (_, _, _, tr) in net.offsets.items() if tr]
    per = max(1, -(-n_params // len(names)))
    report = {}
    n_checked = 0
    for name in names:
        lo, hi, shape, _ = net.offsets[name]
        if name == "heads":
            flat = np.ravel_multi_index((s.j - 1, s.c, a - 1, 0), shape)
            pool = lo + flat + np.arange(shape[-1])
        else:
            pool = np.arange(lo, hi)
        idx = rng.choice(pool, size=min(per, pool.size), replace=False)
        worst = 0.0
        for i in idx:
            old = theta[i]
            theta[i] = old + eps_l
            qp = q_at(i, eps_l)
            theta[i] = old - eps_l
            qm = q_at(i, -eps_l)
            theta[i] = old
            # L+ - L- factored so the large common part cancels exactly
            num = float(0.5 * (qp - qm) * (qp + qm - 2 * y_l) / (2 * eps_l))
            ana = float(grad[i])
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
        report[name] = worst
        n_checked += idx.size
    return GradientReport(max(report.values()), report, n_checked)


# ---------------------------------------------------------------------------
# snapshot files

MAGIC = b"MMHQ"
VERSION = 1


def save_snapshot(net: QNetwork, path, sidecar: dict | None = None) -> None:
    desc = net.arch.descriptor()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(desc)))
        fh.write(struct.pack(f"<{len(desc)}I", *desc))
        fh.write(struct.pack("<I", net.size))
        fh.write(net.theta.astype("<f8").tobytes())
    if sidecar is not None:
        echo = {"arch": net.arch.__dict__ | {"conv_layers": [list(c) for c in net.arch.conv_layers]},
                "segments": [[n, list(shape)] for n, shape, _ in net.arch.segments()]}
        echo.update(sidecar)
        with open(str(path) + ".json", "w", encoding="utf-8") as fh:
            json.dump(echo, fh, indent=2, sort_keys=True, default=str)


def load_snapshot(path, dtype=np.float64) -> QNetwork:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(data) < 12:
        raise FormatError("truncated header", offset=len(data))
    version, n_desc = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported snapshot version {version}", offset=4)
    off = 12
    if len(data) < off + 4 * n_desc + 4:
        raise FormatError("truncated architecture block", offset=len(data))
    desc = list(struct.unpack_from(f"<{n_desc}I", data, off))
    off += 4 * n_desc
    (size,) = struct.unpack_from("<I", data, off)
    off += 4
    arch = NetArch.from_descriptor(desc)
    if len(data) != off + 8 * size:
        raise FormatError(f"expected {size} parameters, file holds {(len(data) - off) / 8:g}",
                          offset=len(data))
    theta = np.frombuffer(data, dtype="<f8", count=size, offset=off)
    net = QNetwork(arch, dtype=dtype, theta=theta.astype(dtype))
    if net.size != size:
        raise FormatError(f"descriptor implies {net.size} parameters, header says {size}", offset=off - 4)
    return net
