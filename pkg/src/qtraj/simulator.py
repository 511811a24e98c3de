"""Synthetic heterodyne records and ground-truth qubit trajectories.

Three generation models are available (see :class:`SimRegime`):

``memoryless``
    Euler-Maruyama integration of the heterodyne SME; the record mean is the
    instantaneous ``z``.
``kernel``
    Resonator memory. The record mean is the exponentially delay-averaged ``z``
    history; the state backaction is a boost about the tilted, attenuated
    measurement axis, interleaved with exact Lindblad propagation.
``boost``
    Record drawn from the two-component Gaussian mixture and the state updated
    by the exact boost map; this is exactly invertible by the Bayesian filter.

Noise for trajectory ``i`` comes from its own counter-based Philox stream keyed
by ``(seed, i)``, so results do not depend on chunking or worker count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.signal import lfilter

from .core import (
    CARDINAL_STATES,
    BlochState,
    PhysicalParams,
    Trajectory,
    VoltageRecord,
    averaging_efficiency,
    tilt_angle,
)
from .bloch_dynamics import bloch_propagator

REGIMES = ("memoryless", "kernel", "boost")
_REGIME_ALIASES = {
    "memoryless": "memoryless",
    "Memoryless": "memoryless",
    "kernel": "kernel",
    "MemoryKernel": "kernel",
    "memory_kernel": "kernel",
    "boost": "boost",
    "BoostUpdate": "boost",
    "boost_update": "boost",
}
AXES = ("X", "Y", "Z")
_CHUNK = 2048


@dataclass(frozen=True)
class SimRegime:
    kind: str = "memoryless"
    rng_seed: int = 0
    n_traj: int = 1
    substeps: int = 1
    # boost regime only: axis tilt and attenuation of the measured observable
    theta: float = 0.0
    eta2: float = 1.0

    def __post_init__(self):
        if self.kind not in _REGIME_ALIASES:
            raise ValueError(f"unknown regime {self.kind!r}")
        object.__setattr__(self, "kind", _REGIME_ALIASES[self.kind])
        if self.n_traj < 1:
            raise ValueError("n_traj must be >= 1")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if not (0.0 < self.eta2 <= 1.0):
            raise ValueError("eta2 must lie in (0, 1]")


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Independent counter-based stream for trajectory ``index``."""
    if seed < 0 or index < 0:
        raise ValueError("seed and index must be non-negative")
    key = (int(seed) & (2 ** 64 - 1)) | (int(index) << 64)
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# elementary steps


def sme_step(state, params: PhysicalParams, dW1, dW2, omega=None, dt=None):
    """One Ito Euler step of the heterodyne SME.

    Works on a :class:`BlochState` or on an ``(..., 3)`` array with broadcastable
    noise increments.  States pushed outside the sphere are projected back to
    its surface; states inside are never rescaled.
    """
    dt = params.dt if dt is None else dt
    omega = params.omega if omega is None else omega
    scalar = isinstance(state, BlochState)
    v = state.normalized().as_array() if scalar else np.asarray(state, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    g = params.gamma_d
    k = math.sqrt(2.0 * params.eta * params.gamma_m)
    dx = -g * x * dt - k * z * x * dW1 - k * y * dW2
    dy = -g * y * dt + omega * z * dt - k * z * y * dW1 + k * x * dW2
    dz = -omega * y * dt + k * (1.0 - z * z) * dW1
    out = np.stack([x + dx, y + dy, z + dz], axis=-1)
    out = project_to_ball(out)
    return BlochState.from_array(out) if scalar else out


def project_to_ball(v: np.ndarray) -> np.ndarray:
    r2 = np.sum(v * v, axis=-1, keepdims=True)
    scale = np.where(r2 > 1.0, 1.0 / np.sqrt(np.maximum(r2, 1.0)), 1.0)
    return v * scale


def record_sample(z_meas, params: PhysicalParams, dW1, dW2, dt=None):
    """Record sample ``(I, Q)`` for one time bin.

    ``I dt = <z_meas> dt + sqrt(tau) dW1`` and ``Q dt = -sqrt(tau) dW2``; the Q sign
    makes the Bayesian phase factor reproduce the SME phase kick for ``dI < 0``.
    """
    dt = params.dt if dt is None else dt
    st = math.sqrt(params.tau)
    i = np.asarray(z_meas) + st * np.asarray(dW1) / dt
    q = -st * np.asarray(dW2) / dt
    if np.ndim(i) == 0:
        return float(i), float(q)
    return i, q


def memory_filter(z_series, kappa: float, dt: float, z_init=None):
    """Causal delay-average of ``z(t)`` with the resonator kernel ``(kappa/2) exp(-kappa t/2)``.

    The kernel is discretized as exact bin integrals ``w_j = (1 - e^-a) e^(-a j)``,
    ``a = kappa dt / 2``, which sum to one.  History before the first sample is
    taken constant at ``z_init`` (default: the first sample).  Works along the
    last axis.
    """
    z = np.asarray(z_series, dtype=float)
    if z.size == 0 or z.shape[-1] == 0:
        raise ValueError("empty series")
    decay = math.exp(-kappa * dt / 2.0)
    z0 = z[..., :1] if z_init is None else np.broadcast_to(np.asarray(z_init, dtype=float)[..., None], z[..., :1].shape)
    zi = decay * z0
    out, _ = lfilter([1.0 - decay], [1.0, -decay], z, axis=-1, zi=zi)
    return out


def memory_kernel_weights(kappa: float, dt: float, tol: float = 1e-16) -> np.ndarray:
    a = kappa * dt / 2.0
    n = int(math.ceil(-math.log(tol) / a)) + 1
    return (1.0 - math.exp(-a)) * np.exp(-a * np.arange(n))


def _boost_rotated(v: np.ndarray, rapidity, theta):
    """Boost of normalized Bloch arrays about the axis ``(sin t, cos t)`` in (y, z)."""
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    # rotate the measurement axis onto z
    yr = y * c - z * s
    zr = y * s + z * c
    ch, sh = np.cosh(rapidity), np.sinh(rapidity)
    p = ch + zr * sh
    zr2 = (zr * ch + sh) / p
    xr2 = x / p
    yr2 = yr / p
    return np.stack([xr2, yr2 * c + zr2 * s, -yr2 * s + zr2 * c], axis=-1)


def boost_update(state, r, dt: float, tau: float, theta: float = 0.0, eta2: float = 1.0):
    """Partial-collapse map for signal ``r`` about the axis tilted by ``theta``.

    ``theta`` tilts the measured observable to ``z cos(theta) + y sin(theta)``;
    the rapidity is ``eta2 * r * dt / tau``.  The unnormalized vector
    ``(x, y, z, p)`` is boosted and the normalized state returned.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    rapidity = eta2 * np.asarray(r, dtype=float) * dt / tau
    if isinstance(state, BlochState):
        out = _boost_rotated(state.normalized().as_array(), rapidity, theta)
        return BlochState.from_array(out)
    return _boost_rotated(np.asarray(state, dtype=float), rapidity, theta)


def measurement_update(v, r, q, params: PhysicalParams, dt: float, theta=0.0, eta2=1.0):
    """Full heterodyne backaction for one bin: boost, phase kick and residual dephasing.

    ``r`` is the informational signal on the unattenuated scale (mean
    ``<z(theta)>``, noise variance ``tau / (eta2 dt)``); ``q`` is the raw phase
    quadrature.  All measurement rates are scaled by ``eta2``.  With
    ``theta = 0, eta2 = 1`` this is identical to the Bayesian state update.
    """
    v = np.asarray(v, dtype=float)
    tau = params.tau
    theta = np.asarray(theta, dtype=float)
    eta2 = np.asarray(eta2, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    yr = y * c - z * s
    zr = y * s + z * c
    rap = eta2 * np.asarray(r) * dt / tau
    ch, sh = np.cosh(rap), np.sinh(rap)
    p = ch + zr * sh
    zr = (zr * ch + sh) / p
    x = x / p
    yr = yr / p
    phi = -np.sqrt(eta2) * np.asarray(q) * dt / tau
    cp, sp = np.cos(phi), np.sin(phi)
    x, yr = x * cp - yr * sp, x * sp + yr * cp
    damp = np.exp(-eta2 * (1.0 - params.eta) / (params.eta * tau) * dt)
    x = x * damp
    yr = yr * damp
    return np.stack([x, yr * c + zr * s, -yr * s + zr * c], axis=-1)


# ---------------------------------------------------------------------------
# ensemble simulation


@dataclass
class EnsembleResult:
    """Vectorized simulation output for trajectories ``start_index + k``."""

    states: Optional[np.ndarray]  # (n, T + 1, 3), or None when only finals kept
    final: np.ndarray  # (n, 3)
    i: np.ndarray  # (n, T)
    q: np.ndarray  # (n, T)
    tomo_uniform: np.ndarray  # (n,) uniform draw reserved for the final measurement
    dt: float
    start_index: int = 0


def _draw_noise(seed, indices, n_steps, substeps):
    normals = np.empty((len(indices), n_steps, 2 * substeps))
    uniforms = np.empty((len(indices), n_steps))
    tomo = np.empty(len(indices))
    for k, idx in enumerate(indices):
        rng = trajectory_rng(seed, idx)
        normals[k] = rng.standard_normal((n_steps, 2 * substeps))
        uniforms[k] = rng.random(n_steps)
        tomo[k] = rng.random()
    return normals, uniforms, tomo


def _step_count(t_m: float, dt: float) -> int:
    n = t_m / dt
    if t_m < 0 or abs(n - round(n)) > 1e-6:
        raise ValueError(f"t_m={t_m} is not a non-negative multiple of dt={dt}")
    return int(round(n))


def simulate_ensemble(
    params: PhysicalParams,
    regime: SimRegime,
    t_m: float,
    init_state: BlochState = CARDINAL_STATES["+Z"],
    start_index: int = 0,
    n_traj: Optional[int] = None,
    keep_states: bool = True,
) -> EnsembleResult:
    n_traj = regime.n_traj if n_traj is None else n_traj
    if isinstance(init_state, str):
        init_state = CARDINAL_STATES[init_state]
    n_steps = _step_count(t_m, params.dt)
    parts = []
    for lo in range(0, n_traj, _CHUNK):
        idx = np.arange(start_index + lo, start_index + min(n_traj, lo + _CHUNK))
        parts.append(_simulate_chunk(params, regime, n_steps, init_state, idx, keep_states))
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
    return EnsembleResult(
        states=cat("states") if keep_states else None,
        final=cat("final"),
        i=cat("i"),
        q=cat("q"),
        tomo_uniform=cat("tomo_uniform"),
        dt=params.dt,
        start_index=start_index,
    )


def _simulate_chunk(params, regime, n_steps, init_state, indices, keep_states):
    n = len(indices)
    k_sub = regime.substeps
    normals, uniforms, tomo = _draw_noise(regime.rng_seed, indices, n_steps, k_sub)
    dt = params.dt
    v = np.tile(init_state.normalized().as_array(), (n, 1))
    states = np.empty((n, n_steps + 1, 3)) if keep_states else None
    if keep_states:
        states[:, 0] = v
    I = np.empty((n, n_steps))
    Q = np.empty((n, n_steps))
    times = np.arange(n_steps) * dt
    omegas = params.omega_rabi(times + 0.0)
    tau = params.tau
    kind = regime.kind

    if kind == "kernel":
        # resonator averages the drive as well; tilt and attenuation follow the filtered drive
        omega_eff = memory_filter(omegas, params.kappa, dt) if n_steps else omegas
        thetas = -tilt_angle(omega_eff, params.kappa)
        eta_avgs = averaging_efficiency(omega_eff, params.kappa)
        decay = math.exp(-params.kappa * dt / 2.0)
        z_eff = v[:, 2].copy()

    for step in range(n_steps):
        om = omegas[step]
        if kind == "memoryless":
            h = dt / k_sub
            z_acc = np.zeros(n)
            w1 = np.zeros(n)
            w2 = np.zeros(n)
            for j in range(k_sub):
                d1 = normals[:, step, 2 * j] * math.sqrt(h)
                d2 = normals[:, step, 2 * j + 1] * math.sqrt(h)
                z_acc += v[:, 2] * h
                w1 += d1
                w2 += d2
                v = sme_step(v, params, d1, d2, omega=om, dt=h)
            I[:, step], Q[:, step] = record_sample(z_acc / dt, params, w1, w2, dt=dt)
        elif kind == "kernel":
            v = propagate_bloch(v, params, dt, om)
            # z_eff integrates the z history over this bin
            z_eff = decay * z_eff + (1.0 - decay) * v[:, 2]
            dW1 = normals[:, step, 0] * math.sqrt(dt)
            dW2 = normals[:, step, 1] * math.sqrt(dt)
            I[:, step], Q[:, step] = record_sample(z_eff, params, dW1, dW2, dt=dt)
            ea = eta_avgs[step]
            r = I[:, step] / math.sqrt(ea)
            v = measurement_update(v, r, Q[:, step], params, dt, theta=thetas[step], eta2=ea)
        else:
            v = propagate_bloch(v, params, dt, om)
            th, e2 = regime.theta, regime.eta2
            zt = v[:, 2] * math.cos(th) + v[:, 1] * math.sin(th)
            sign = np.where(uniforms[:, step] < 0.5 * (1.0 + zt), 1.0, -1.0)
            r = sign + math.sqrt(tau / (e2 * dt)) * normals[:, step, 0]
            q = -math.sqrt(tau / dt) * normals[:, step, 1]
            I[:, step] = math.sqrt(e2) * r
            Q[:, step] = q
            v = measurement_update(v, r, q, params, dt, theta=th, eta2=e2)
        if keep_states:
            states[:, step + 1] = v
    return EnsembleResult(states, v.copy(), I, Q, tomo, dt, int(indices[0]) if n else 0)


def propagate_bloch(v, params, dt, omega):
    """Exact Lindblad (drive, detuning, T1) propagation of ``(..., 3)`` Bloch arrays."""
    A = bloch_propagator(params, dt, omega)
    return v @ A[1:, 1:].T + A[1:, 0]


def simulate_trajectory(
    params: PhysicalParams,
    regime: SimRegime,
    t_m: float,
    init_state: BlochState = CARDINAL_STATES["+Z"],
    index: int = 0,
):
    """Single ground-truth trajectory and its record."""
    res = simulate_ensemble(params, regime, t_m, init_state, start_index=index, n_traj=1)
    traj = Trajectory(res.states[0], params.dt, id=f"r{index:08d}")
    rec = VoltageRecord(
        i=res.i[0], q=res.q[0], dt=params.dt, t_m=t_m, init_state=init_state,
        drive=params.omega_rabi, id=traj.id, regime=regime.kind,
    )
    return traj, rec


def sample_outcomes(final: np.ndarray, axes: Sequence[str], uniforms: np.ndarray) -> np.ndarray:
    """Projective outcome ``1`` (eigenvalue +1) with probability ``(1 + <sigma_axis>)/2``."""
    col = np.array(["XYZ".index(a) for a in axes])
    expval = final[np.arange(len(final)), col]
    return (uniforms < 0.5 * (1.0 + expval)).astype(int)


@dataclass
class Dataset:
    """Labeled records plus ground-truth trajectories keyed by record id."""

    records: List[VoltageRecord]
    truth: Dict[str, Trajectory] = field(default_factory=dict)
    params: Optional[PhysicalParams] = None
    regime: Optional[SimRegime] = None

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def subset(self, idx) -> "Dataset":
        recs = [self.records[k] for k in idx]
        truth = {r.id: self.truth[r.id] for r in recs if r.id in self.truth}
        return Dataset(recs, truth, self.params, self.regime)

    def split(self, frac: float, seed: int = 0):
        perm = np.random.default_rng(seed).permutation(len(self.records))
        n_train = int(round(frac * len(perm)))
        return self.subset(np.sort(perm[:n_train])), self.subset(np.sort(perm[n_train:]))

    @property
    def max_length(self) -> int:
        return max(len(r) for r in self.records)


def generate_dataset(
    params: PhysicalParams,
    regime: SimRegime,
    n_per_length: int,
    t_m_grid: Sequence[float],
    axes: Sequence[str] = AXES,
    init_state: BlochState = CARDINAL_STATES["+Z"],
    keep_truth: bool = True,
) -> Dataset:
    """Simulate ``n_per_length`` records for each ``(t_m, axis)``, zero-padded to the longest."""
    t_m_grid = list(t_m_grid)
    if not t_m_grid or not axes:
        raise ValueError("t_m grid and axes must be non-empty")
    if any(b < a for a, b in zip(t_m_grid, t_m_grid[1:])):
        raise ValueError("t_m grid must be ascending")
    for a in axes:
        if a not in AXES:
            raise ValueError(f"bad axis {a!r}")
    T = _step_count(t_m_grid[-1], params.dt)
    records: List[VoltageRecord] = []
    truth: Dict[str, Trajectory] = {}
    index = 0
    for t_m in t_m_grid:
        n_group = n_per_length * len(axes)
        res = simulate_ensemble(params, regime, t_m, init_state, start_index=index, n_traj=n_group,
                                keep_states=keep_truth)
        group_axes = [axes[k % len(axes)] for k in range(n_group)]
        outcomes = sample_outcomes(res.final, group_axes, res.tomo_uniform)
        n = res.i.shape[1]
        for k in range(n_group):
            rid = f"r{index + k:08d}"
            i = np.zeros(T)
            q = np.zeros(T)
            i[:n] = res.i[k]
            q[:n] = res.q[k]
            records.append(VoltageRecord(
                i=i, q=q, dt=params.dt, t_m=t_m, init_state=init_state,
                tomo_axis=group_axes[k], tomo_outcome=int(outcomes[k]),
                drive=params.omega_rabi, id=rid, regime=regime.kind,
            ))
            if keep_truth:
                truth[rid] = Trajectory(res.states[k], params.dt, id=rid)
        index += n_group
    return Dataset(records, truth, params, regime)
