"""Recurrent (LSTM) filter written directly in numpy.

The network reads a record one ``(I, Q)`` sample at a time and emits three
probabilities ``s = (s_x, s_y, s_z)`` per step; the Bloch estimate is
``2 s - 1``.  A zero frame is fed first so output ``k`` is the estimate after
``k`` samples, aligned with :class:`~qtraj.core.Trajectory`.

Training uses only projective labels: the cross-entropy between the head of
the measured axis at the final step and the tomography outcome, plus penalties
for missing the known initial state and for leaving the Bloch ball.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .core import Trajectory, VoltageRecord, stack_records

CLIP = 1e-7
SCHEMA_VERSION = 1
_AXIS = {"X": 0, "Y": 1, "Z": 2}


@dataclass(frozen=True)
class NetworkConfig:
    hidden_size: int = 32
    num_layers: int = 1
    input_size: int = 2

    def __post_init__(self):
        if self.hidden_size < 1 or self.num_layers < 1:
            raise ValueError("hidden_size and num_layers must be >= 1")
        if self.input_size != 2:
            raise ValueError("input_size is fixed at 2 (I, Q)")


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 512
    split: float = 0.9
    base_lr: float = 1e-4
    max_lr: float = 5e-3
    cycle_len: int = 400  # iterations per full triangle
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    w_init: float = 1.0
    w_purity: float = 1.0
    max_epochs: int = 50
    clip_norm: float = 5.0

    def __post_init__(self):
        if not (0.0 < self.split < 1.0):
            raise ValueError("split must lie in (0, 1)")
        if not (0.0 < self.base_lr < self.max_lr):
            raise ValueError("need 0 < base_lr < max_lr")
        if self.batch_size < 1 or self.cycle_len < 2 or self.max_epochs < 1:
            raise ValueError("batch_size, cycle_len and max_epochs must be positive")


@dataclass
class LossBreakdown:
    l_ce: float
    l_init: float
    l_purity: float
    total: float


def triangular_lr(iteration: int, cfg: TrainingConfig) -> float:
    """Triangular cyclical learning rate; starts at ``base_lr``, peaks mid-cycle."""
    pos = (iteration % cfg.cycle_len) / cfg.cycle_len
    frac = 1.0 - abs(2.0 * pos - 1.0)
    return cfg.base_lr + (cfg.max_lr - cfg.base_lr) * frac


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


# ---------------------------------------------------------------------------
# model


class LSTMModel:
    """Weights plus input scaling.  ``params`` maps names to arrays.

    Layer ``l`` has ``W{l}`` of shape ``(in + H, 4H)`` and ``b{l}`` (gate order
    input, forget, output, candidate); the head is ``Wy (H, 3)``, ``by (3,)``.
    """

    def __init__(self, config: NetworkConfig, params: Dict[str, np.ndarray],
                 input_scale: float = 1.0, max_length: Optional[int] = None):
        self.config = config
        self.params = params
        self.input_scale = float(input_scale)
        self.max_length = max_length

    @classmethod
    def init(cls, config: NetworkConfig = NetworkConfig(), seed: int = 0, input_scale: float = 1.0,
             forget_bias: float = 1.0) -> "LSTMModel":
        rng = np.random.default_rng(seed)
        H = config.hidden_size
        params = {}
        n_in = config.input_size
        for l in range(config.num_layers):
            lim = math.sqrt(6.0 / (n_in + H + 4 * H))
            params[f"W{l}"] = rng.uniform(-lim, lim, (n_in + H, 4 * H))
            b = np.zeros(4 * H)
            b[H:2 * H] = forget_bias
            params[f"b{l}"] = b
            n_in = H
        lim = math.sqrt(6.0 / (H + 3))
        params["Wy"] = rng.uniform(-lim, lim, (H, 3))
        params["by"] = np.zeros(3)
        return cls(config, params, input_scale)

    def copy(self) -> "LSTMModel":
        return LSTMModel(self.config, {k: v.copy() for k, v in self.params.items()},
                         self.input_scale, self.max_length)

    # -- forward / backward ------------------------------------------------

    def forward(self, X: np.ndarray, keep_cache: bool = False):
        """``X`` is ``(B, T, 2)`` with the zero frame already prepended.

        Returns probabilities ``(B, T, 3)`` and, optionally, the cache for
        :meth:`backward`.
        """
        X = np.asarray(X, dtype=float) * self.input_scale
        B, T, _ = X.shape
        H = self.config.hidden_size
        inp = X.transpose(1, 0, 2)  # time-major
        caches = []
        for l in range(self.config.num_layers):
            W, b = self.params[f"W{l}"], self.params[f"b{l}"]
            h = np.zeros((B, H))
            c = np.zeros((B, H))
            hs = np.empty((T, B, H))
            if keep_cache:
                xh_all = np.empty((T, B, inp.shape[2] + H))
                gates = np.empty((T, B, 4 * H))
                cs = np.empty((T + 1, B, H))
                cs[0] = c
            for t in range(T):
                xh = np.concatenate([inp[t], h], axis=1)
                z = xh @ W + b
                g_sig = _sigmoid(z[:, : 3 * H])
                g_tanh = np.tanh(z[:, 3 * H:])
                i, f, o = g_sig[:, :H], g_sig[:, H:2 * H], g_sig[:, 2 * H:]
                c = f * c + i * g_tanh
                h = o * np.tanh(c)
                hs[t] = h
                if keep_cache:
                    xh_all[t] = xh
                    gates[t, :, : 3 * H] = g_sig
                    gates[t, :, 3 * H:] = g_tanh
                    cs[t + 1] = c
            if keep_cache:
                caches.append((xh_all, gates, cs))
            inp = hs
        a = inp @ self.params["Wy"] + self.params["by"]
        s = _sigmoid(a).transpose(1, 0, 2)
        if keep_cache:
            return s, (caches, inp)
        return s

    def backward(self, ds: np.ndarray, cache) -> Dict[str, np.ndarray]:
        """Gradients of a scalar loss given ``dL/ds`` of shape ``(B, T, 3)``."""
        caches, h_top = cache
        H = self.config.hidden_size
        s = _sigmoid(h_top @ self.params["Wy"] + self.params["by"])  # (T, B, 3)
        da = ds.transpose(1, 0, 2) * s * (1.0 - s)
        grads = {
            "Wy": np.einsum("tbh,tbk->hk", h_top, da),
            "by": da.sum(axis=(0, 1)),
        }
        dh_above = da @ self.params["Wy"].T  # (T, B, H)
        for l in reversed(range(self.config.num_layers)):
            W = self.params[f"W{l}"]
            xh_all, gates, cs = caches[l]
            T, B, _ = xh_all.shape
            n_in = xh_all.shape[2] - H
            dW = np.zeros_like(W)
            db = np.zeros(4 * H)
            dx = np.empty((T, B, n_in))
            dh_next = np.zeros((B, H))
            dc_next = np.zeros((B, H))
            dz = np.empty((B, 4 * H))
            for t in reversed(range(T)):
                i = gates[t, :, :H]
                f = gates[t, :, H:2 * H]
                o = gates[t, :, 2 * H:3 * H]
                g = gates[t, :, 3 * H:]
                tc = np.tanh(cs[t + 1])
                dh = dh_above[t] + dh_next
                dc = dc_next + dh * o * (1.0 - tc * tc)
                dz[:, :H] = dc * g * i * (1.0 - i)
                dz[:, H:2 * H] = dc * cs[t] * f * (1.0 - f)
                dz[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
                dz[:, 3 * H:] = dc * i * (1.0 - g * g)
                dc_next = dc * f
                dW += xh_all[t].T @ dz
                db += dz.sum(axis=0)
                dxh = dz @ W.T
                dx[t] = dxh[:, :n_in]
                dh_next = dxh[:, n_in:]
            grads[f"W{l}"] = dW
            grads[f"b{l}"] = db
            dh_above = dx
        return grads

    # -- inference ---------------------------------------------------------

    def check_length(self, n_steps: int):
        if self.max_length is not None and n_steps > self.max_length:
            raise ValueError(f"record of {n_steps} samples exceeds trained max length {self.max_length}")

    def predict_records(self, records: Sequence[VoltageRecord], chunk: int = 1024) -> List[Trajectory]:
        out = []
        for lo in range(0, len(records), chunk):
            recs = records[lo: lo + chunk]
            X, lengths = stack_records(recs)
            for n in lengths:
                self.check_length(int(n))
            T = int(lengths.max())
            X = _with_zero_frame(X[:, :T])
            bloch = 2.0 * self.forward(X) - 1.0
            for k, r in enumerate(recs):
                out.append(Trajectory(bloch[k, : lengths[k] + 1], r.dt, id=r.id))
        return out

    def forward_record(self, record: VoltageRecord) -> Trajectory:
        return self.predict_records([record])[0]

    # -- persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config": asdict(self.config),
            "input_scale": self.input_scale,
            "max_length": self.max_length,
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                       for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LSTMModel":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported checkpoint schema {d.get('schema_version')!r}")
        cfg = NetworkConfig(**d["config"])
        params = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in d["params"].items()}
        model = cls(cfg, params, d["input_scale"], d["max_length"])
        ref = cls.init(cfg)
        for k, v in ref.params.items():
            if k not in params or params[k].shape != v.shape:
                raise ValueError(f"checkpoint parameter {k} missing or misshapen")
        return model

    def save(self, path: str):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path: str) -> "LSTMModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _with_zero_frame(X: np.ndarray) -> np.ndarray:
    return np.concatenate([np.zeros((X.shape[0], 1, X.shape[2])), X], axis=1)


# ---------------------------------------------------------------------------
# loss


@dataclass
class Batch:
    X: np.ndarray  # (B, T + 1, 2), zero frame first
    lengths: np.ndarray  # (B,)
    axis: np.ndarray  # (B,) in {0, 1, 2}
    outcome: np.ndarray  # (B,) in {0, 1}
    init: np.ndarray  # (B, 3)


def make_batch(records: Sequence[VoltageRecord], length: Optional[int] = None) -> Batch:
    for r in records:
        if r.tomo_axis is None or r.tomo_outcome is None:
            raise ValueError(f"record {r.id} has no tomography label")
    X, lengths = stack_records(records, length)
    return Batch(
        X=_with_zero_frame(X),
        lengths=lengths,
        axis=np.array([_AXIS[r.tomo_axis] for r in records]),
        outcome=np.array([r.tomo_outcome for r in records], dtype=float),
        init=np.array([r.init_state.normalized().as_array() for r in records]),
    )


def loss(s: np.ndarray, batch: Batch, cfg: TrainingConfig = TrainingConfig(), with_grad: bool = False):
    """Composite loss of probabilities ``s`` (B, T + 1, 3); optionally ``dL/ds``."""
    B, T1, _ = s.shape
    rows = np.arange(B)
    p = s[rows, batch.lengths, batch.axis]
    pc = np.clip(p, CLIP, 1.0 - CLIP)
    y = batch.outcome
    l_ce = float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))

    b0 = 2.0 * s[:, 0] - 1.0
    l_init = float(np.mean((b0 - batch.init) ** 2))

    valid = np.arange(T1)[None, :] <= batch.lengths[:, None]
    bloch = 2.0 * s - 1.0
    r2 = np.sum(bloch * bloch, axis=-1)
    excess = np.where(valid, np.maximum(r2 - 1.0, 0.0), 0.0)
    n_valid = valid.sum()
    l_pur = float(excess.sum() / n_valid)

    total = l_ce + cfg.w_init * l_init + cfg.w_purity * l_pur
    out = LossBreakdown(l_ce, l_init, l_pur, total)
    if not with_grad:
        return out
    ds = np.zeros_like(s)
    inside = (p > CLIP) & (p < 1.0 - CLIP)
    ds[rows, batch.lengths, batch.axis] = np.where(inside, -(y / pc - (1.0 - y) / (1.0 - pc)) / B, 0.0)
    ds[:, 0] += cfg.w_init * 4.0 * (b0 - batch.init) / b0.size
    active = valid & (r2 > 1.0)
    ds += cfg.w_purity * np.where(active[..., None], 4.0 * bloch / n_valid, 0.0)
    return out, ds


def loss_and_grad(model: LSTMModel, batch: Batch, cfg: TrainingConfig = TrainingConfig()):
    T = int(batch.lengths.max()) + 1
    X = batch.X[:, :T]
    sub = Batch(X, batch.lengths, batch.axis, batch.outcome, batch.init)
    s, cache = model.forward(X, keep_cache=True)
    lb, ds = loss(s, sub, cfg, with_grad=True)
    return lb, model.backward(ds, cache)


def evaluate(model: LSTMModel, batch: Batch, cfg: TrainingConfig = TrainingConfig(),
             chunk: int = 2048) -> LossBreakdown:
    """Loss over a large batch, evaluated in chunks and recombined exactly."""
    n = len(batch.lengths)
    parts = []
    for lo in range(0, n, chunk):
        sl = slice(lo, lo + chunk)
        T = int(batch.lengths[sl].max()) + 1
        sub = Batch(batch.X[sl, :T], batch.lengths[sl], batch.axis[sl], batch.outcome[sl], batch.init[sl])
        lb = loss(model.forward(sub.X), sub, cfg)
        parts.append((len(sub.lengths), int((sub.lengths + 1).sum()), lb))
    nb = sum(p[0] for p in parts)
    nv = sum(p[1] for p in parts)
    l_ce = sum(p[0] * p[2].l_ce for p in parts) / nb
    l_init = sum(p[0] * p[2].l_init for p in parts) / nb
    l_pur = sum(p[1] * p[2].l_purity for p in parts) / nv
    return LossBreakdown(l_ce, l_init, l_pur, l_ce + cfg.w_init * l_init + cfg.w_purity * l_pur)


# ---------------------------------------------------------------------------
# training


class Adam:
    def __init__(self, params: Dict[str, np.ndarray], cfg: TrainingConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr: float):
        c = self.cfg
        self.t += 1
        b1t = 1.0 - c.beta1 ** self.t
        b2t = 1.0 - c.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g
            params[k] -= lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + c.eps_opt)


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


@dataclass
class TrainingLog:
    rows: List[dict] = field(default_factory=list)

    def append(self, **kw):
        self.rows.append(kw)

    @property
    def train_loss(self) -> np.ndarray:
        return np.array([r["train_loss"] for r in self.rows])

    @property
    def val_loss(self) -> np.ndarray:
        return np.array([r["val_loss"] for r in self.rows])

    def to_csv(self, path: str):
        if not self.rows:
            raise ValueError("empty training log")
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            w.writeheader()
            w.writerows(self.rows)


def _bucketed_batches(lengths: np.ndarray, batch_size: int, rng, pool: int = 16):
    """Shuffled batches of similar length (sorted within pools of ``pool`` batches)."""
    order = rng.permutation(len(lengths))
    batches = []
    span = batch_size * pool
    for lo in range(0, len(order), span):
        chunk = order[lo: lo + span]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches.extend(np.sort(chunk[k: k + batch_size]) for k in range(0, len(chunk), batch_size))
    return [batches[k] for k in rng.permutation(len(batches))]


class TrainingDiverged(RuntimeError):
    pass


def input_scale_from(records: Sequence[VoltageRecord]) -> float:
    """Inverse RMS of the unpadded I/Q samples."""
    sq = sum(float(np.sum(r.i[: r.n_steps] ** 2) + np.sum(r.q[: r.n_steps] ** 2)) for r in records)
    n = sum(2 * r.n_steps for r in records)
    return 1.0 / math.sqrt(sq / n) if n and sq > 0 else 1.0


def train(dataset, net_config: NetworkConfig = NetworkConfig(), train_config: TrainingConfig = TrainingConfig(),
          seed: int = 0, verbose: bool = False):
    """Train on a labelled dataset (``Dataset`` or record list).

    Returns ``(model, log)``; the model is the one with the lowest validation loss.
    """
    cfg = train_config
    records = list(getattr(dataset, "records", dataset))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(records))
    n_train = int(round(cfg.split * len(records)))
    train_recs = [records[k] for k in np.sort(perm[:n_train])]
    val_recs = [records[k] for k in np.sort(perm[n_train:])]
    if len(train_recs) < 2 * cfg.batch_size or not val_recs:
        raise ValueError("dataset must hold at least two training batches and a validation set")
    T = max(r.n_steps for r in records)
    tb = make_batch(train_recs, T)
    vb = make_batch(val_recs, T)
    model = LSTMModel.init(net_config, seed=seed, input_scale=input_scale_from(train_recs))
    model.max_length = T
    opt = Adam(model.params, cfg)
    log = TrainingLog()
    best_val, best_model = math.inf, model.copy()
    best_train, last_improve = math.inf, 0
    it = 0
    n = len(train_recs)
    for epoch in range(cfg.max_epochs):
        totals = []
        for idx in _bucketed_batches(tb.lengths, cfg.batch_size, rng):
            sub = Batch(tb.X[idx], tb.lengths[idx], tb.axis[idx], tb.outcome[idx], tb.init[idx])
            lb, grads = loss_and_grad(model, sub, cfg)
            if not np.isfinite(lb.total):
                raise TrainingDiverged(f"loss {lb.total} at epoch {epoch}, iteration {it}: {lb}")
            clip_gradients(grads, cfg.clip_norm)
            lr = triangular_lr(it, cfg)
            opt.step(model.params, grads, lr)
            totals.append(lb.total)
            it += 1
        train_loss = float(np.mean(totals))
        val = evaluate(model, vb, cfg)
        log.append(epoch=epoch, lr=triangular_lr(it, cfg), train_loss=train_loss, val_loss=val.total,
                   l_ce=val.l_ce, l_init=val.l_init, l_purity=val.l_purity)
        if verbose:
            print(f"epoch {epoch}: train {train_loss:.4f} val {val.total:.4f}")
        if val.total < best_val:
            best_val, best_model = val.total, model.copy()
        if train_loss < best_train:
            best_train, last_improve = train_loss, it
        elif it - last_improve >= cfg.cycle_len:
            break
    return best_model, log


class LSTMFilter(BaseEstimator, TransformerMixin):
    """Estimator wrapper around :func:`train` and :meth:`LSTMModel.predict_records`."""

    def __init__(self, hidden_size: int = 32, num_layers: int = 1, batch_size: int = 512,
                 base_lr: float = 1e-4, max_lr: float = 5e-3, cycle_len: int = 400,
                 max_epochs: int = 50, w_init: float = 1.0, w_purity: float = 1.0,
                 split: float = 0.9, random_state: int = 0):
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.max_lr = max_lr
        self.cycle_len = cycle_len
        self.max_epochs = max_epochs
        self.w_init = w_init
        self.w_purity = w_purity
        self.split = split
        self.random_state = random_state

    def _configs(self):
        net = NetworkConfig(self.hidden_size, self.num_layers)
        tr = TrainingConfig(batch_size=self.batch_size, split=self.split, base_lr=self.base_lr,
                            max_lr=self.max_lr, cycle_len=self.cycle_len, max_epochs=self.max_epochs,
                            w_init=self.w_init, w_purity=self.w_purity)
        return net, tr

    def fit(self, X, y=None):
        net, tr = self._configs()
        self.model_, self.log_ = train(X, net, tr, seed=self.random_state)
        return self

    def transform(self, X: Sequence[VoltageRecord]) -> List[Trajectory]:
        if not hasattr(self, "model_"):
            raise RuntimeError("LSTMFilter is not fitted")
        return self.model_.predict_records(list(X))

    def predict(self, X: Sequence[VoltageRecord]) -> np.ndarray:
        return np.array([t.states[-1] for t in self.transform(X)])


def predict_dataset(dataset, model: LSTMModel) -> Dict[str, Trajectory]:
    records = list(getattr(dataset, "records", dataset))
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate record ids")
    return {t.id: t for t in model.predict_records(records)}
