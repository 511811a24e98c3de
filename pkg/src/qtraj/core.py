"""Domain types, physical parameters and elementary Bloch-vector operations.

All rates are angular frequencies in rad/s and all times are in seconds.
Conversion to MHz (``/2pi``) happens only in the CLI and report layer.

Bloch convention used throughout the package::

    z = rho00 - rho11     (|0> = ground = +Z)
    x = 2 Re rho01
    y = 2 Im rho01
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
PURITY_TOL = 1e-6


def mhz(rate: float) -> float:
    """Angular rate (rad/s) to MHz."""
    return rate / TWO_PI / 1e6


def from_mhz(f: float) -> float:
    return f * TWO_PI * 1e6


@dataclass(frozen=True)
class BlochState:
    x: float = 0.0
    y: float = 0.0
    z: float = 1.0
    p: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.p <= 1.0 + 1e-12):
            raise ValueError(f"probability weight p={self.p} outside (0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @classmethod
    def from_array(cls, v) -> "BlochState":
        v = np.asarray(v, dtype=float)
        return cls(float(v[0]), float(v[1]), float(v[2]))

    def normalized(self) -> "BlochState":
        return BlochState(self.x / self.p, self.y / self.p, self.z / self.p, 1.0)

    def is_physical(self, tol: float = 1e-9) -> bool:
        s = self.normalized()
        return purity(s) <= 1.0 + tol


CARDINAL_STATES = {
    "+X": BlochState(1.0, 0.0, 0.0),
    "-X": BlochState(-1.0, 0.0, 0.0),
    "+Y": BlochState(0.0, 1.0, 0.0),
    "-Y": BlochState(0.0, -1.0, 0.0),
    "+Z": BlochState(0.0, 0.0, 1.0),
    "-Z": BlochState(0.0, 0.0, -1.0),
}


def purity(state) -> float:
    """Squared Bloch radius ``x**2 + y**2 + z**2``."""
    if isinstance(state, BlochState):
        return state.x ** 2 + state.y ** 2 + state.z ** 2
    v = np.asarray(state, dtype=float)
    return np.sum(v ** 2, axis=-1)


def rotate_yz(state, theta: float):
    """Rotate a Bloch vector (or an ``(..., 3)`` array) by ``theta`` in the yz-plane.

    ``(y, z) -> (y cos t - z sin t, y sin t + z cos t)``; x is untouched.
    """
    c, s = math.cos(theta), math.sin(theta)
    if isinstance(state, BlochState):
        return BlochState(state.x, state.y * c - state.z * s, state.y * s + state.z * c, state.p)
    v = np.array(state, dtype=float, copy=True)
    y, z = v[..., 1].copy(), v[..., 2].copy()
    v[..., 1] = y * c - z * s
    v[..., 2] = y * s + z * c
    return v


@dataclass(frozen=True)
class Drive:
    """Rabi drive ``omega(t) = omega0 + omega1 * sin(2 pi t / period + phase)``.

    A tabulated drive is given by ``times``/``values`` and linearly interpolated.
    """

    omega0: float = 0.0
    omega1: float = 0.0
    period: Optional[float] = None
    phase: float = 0.0
    times: Optional[tuple] = None
    values: Optional[tuple] = None

    @property
    def is_constant(self) -> bool:
        return self.times is None and (self.omega1 == 0.0 or self.period is None)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.times is not None:
            return np.interp(t, np.asarray(self.times), np.asarray(self.values))
        if self.is_constant:
            return np.full_like(t, self.omega0)
        return self.omega0 + self.omega1 * np.sin(TWO_PI * t / self.period + self.phase)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["times"] is not None:
            d["times"] = list(d["times"])
            d["values"] = list(d["values"])
        return d

    @classmethod
    def from_dict(cls, d) -> "Drive":
        if isinstance(d, (int, float)):
            return cls(omega0=float(d))
        d = dict(d)
        for key in ("times", "values"):
            if d.get(key) is not None:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)


def _as_drive(omega) -> Drive:
    if isinstance(omega, Drive):
        return omega
    if isinstance(omega, dict):
        return Drive.from_dict(omega)
    return Drive(omega0=float(omega))


@dataclass(frozen=True)
class PhysicalParams:
    """Qubit/resonator parameters. Defaults follow the calibrated device values.

    ``gamma_m`` is the single-quadrature measurement rate; the measurement-limited
    ensemble dephasing is ``2 * gamma_m`` (plus ``gamma_phi_env``).  The default
    ``gamma_m`` reproduces the measured ensemble decay ``Gamma_d/2pi = 0.175 MHz``.
    """

    chi: float = from_mhz(0.47)
    kappa: float = from_mhz(1.56)
    omega_rabi: Drive = field(default_factory=Drive)
    gamma1: float = 1.0 / 61e-6
    gamma_m: float = 0.5 * from_mhz(0.175)
    eta: float = 0.188
    delta: float = 0.0
    omega_y: float = 0.0
    nbar: Optional[float] = None
    eps_drive: float = from_mhz(0.43)
    dt: float = 40e-9
    gamma_phi_env: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "omega_rabi", _as_drive(self.omega_rabi))
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if self.nbar is None:
            object.__setattr__(self, "nbar", nbar_from_drive(self.eps_drive, self.chi, self.kappa))
        if not (0.0 < self.eta <= 1.0):
            raise ValueError("eta must lie in (0, 1]")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        for name in ("chi", "gamma1", "gamma_m", "nbar", "eps_drive", "gamma_phi_env"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def omega(self) -> float:
        """Constant part of the Rabi drive."""
        return self.omega_rabi.omega0

    @property
    def gamma_d(self) -> float:
        return 2.0 * self.gamma_m + self.gamma_phi_env

    @property
    def tau(self) -> float:
        """Record timescale ``1 / (2 eta gamma_m)``; noise variance per sample is ``tau/dt``."""
        return 1.0 / (2.0 * self.eta * self.gamma_m)

    @property
    def tau_c(self) -> float:
        return 2.0 / self.kappa

    def with_omega(self, omega) -> "PhysicalParams":
        return replace(self, omega_rabi=_as_drive(omega))

    def replace(self, **kw) -> "PhysicalParams":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["omega_rabi"] = self.omega_rabi.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhysicalParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"schema_version"}
        if unknown:
            raise ValueError(f"unknown PhysicalParams fields: {sorted(unknown)}")
        kw = {k: v for k, v in d.items() if k in known}
        if "omega_rabi" in kw:
            kw["omega_rabi"] = _as_drive(kw["omega_rabi"])
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PhysicalParams":
        return cls.from_dict(json.loads(text))


def nbar_from_drive(eps_drive: float, chi: float, kappa: float) -> float:
    """Steady-state photon number for a drive at the midpoint of the dressed resonances."""
    return (2.0 * eps_drive / kappa) ** 2 / (1.0 + (2.0 * chi / kappa) ** 2)


@dataclass(frozen=True)
class DerivedRates:
    tau_c: float
    gamma_d: float
    theta: float
    eta_avg: float
    gamma_m_pred: float


def derive_rates(params: PhysicalParams) -> DerivedRates:
    if params.kappa <= 0:
        raise ValueError("kappa must be positive")
    tau_c = 2.0 / params.kappa
    wt = params.omega * tau_c
    ratio = 2.0 * params.chi / params.kappa
    return DerivedRates(
        tau_c=tau_c,
        gamma_d=2.0 * params.gamma_m + params.gamma_phi_env,
        theta=math.atan(wt),
        eta_avg=1.0 / (1.0 + wt ** 2),
        gamma_m_pred=(8.0 * params.chi ** 2 * params.nbar / params.kappa) / (1.0 + ratio ** 2),
    )


def tilt_angle(omega, kappa: float):
    """Measurement-axis tilt ``arctan(2 omega / kappa)``; vectorized."""
    return np.arctan(2.0 * np.asarray(omega, dtype=float) / kappa)


def averaging_efficiency(omega, kappa: float):
    return 1.0 / (1.0 + (2.0 * np.asarray(omega, dtype=float) / kappa) ** 2)


@dataclass(frozen=True, eq=False)
class VoltageRecord:
    """One heterodyne record. ``i`` and ``q`` may be zero-padded past ``n_steps``."""

    i: np.ndarray
    q: np.ndarray
    dt: float
    t_m: float
    init_state: BlochState = field(default_factory=lambda: CARDINAL_STATES["+Z"])
    tomo_axis: Optional[str] = None
    tomo_outcome: Optional[int] = None
    drive: Drive = field(default_factory=Drive)
    id: Optional[str] = None
    regime: Optional[str] = None

    def __post_init__(self):
        i = np.asarray(self.i, dtype=float)
        q = np.asarray(self.q, dtype=float)
        if i.shape != q.shape or i.ndim != 1:
            raise ValueError("i and q must be 1-d arrays of equal length")
        object.__setattr__(self, "i", i)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "drive", _as_drive(self.drive))
        if self.tomo_axis is not None and self.tomo_axis not in ("X", "Y", "Z"):
            raise ValueError(f"bad tomography axis {self.tomo_axis!r}")
        if self.tomo_outcome is not None and self.tomo_outcome not in (0, 1):
            raise ValueError("tomography outcome must be 0 or 1")
        if len(i) < self.n_steps:
            raise ValueError("record shorter than t_m / dt")
        if np.any(i[self.n_steps:] != 0) or np.any(q[self.n_steps:] != 0):
            raise ValueError("non-zero samples after t_m (padding must be zeros)")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_m / self.dt))

    def __len__(self):
        return len(self.i)

    def unpadded(self) -> "VoltageRecord":
        n = self.n_steps
        return replace(self, i=self.i[:n], q=self.q[:n])

    def padded(self, length: int) -> "VoltageRecord":
        if length < len(self.i):
            raise ValueError("cannot pad to a shorter length")
        pad = length - len(self.i)
        return replace(self, i=np.pad(self.i, (0, pad)), q=np.pad(self.q, (0, pad)))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Bloch trajectory; ``states[k]`` is the estimate after ``k`` record samples."""

    states: np.ndarray
    dt: float
    id: Optional[str] = None

    def __post_init__(self):
        s = np.asarray(self.states, dtype=float)
        if s.ndim != 2 or s.shape[1] != 3:
            raise ValueError("states must have shape (n + 1, 3)")
        object.__setattr__(self, "states", s)

    def __len__(self):
        return len(self.states)

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.states)) * self.dt

    def __getitem__(self, k) -> BlochState:
        return BlochState.from_array(self.states[k])

    @property
    def final(self) -> BlochState:
        return self[-1]

    def max_purity(self) -> float:
        return float(np.max(purity(self.states)))


def stack_records(records: Sequence[VoltageRecord], length: Optional[int] = None):
    """Stack records into ``(n, T, 2)`` inputs and an integer length vector."""
    if not records:
        raise ValueError("no records")
    T = max(len(r) for r in records) if length is None else length
    X = np.zeros((len(records), T, 2))
    lengths = np.empty(len(records), dtype=int)
    for k, r in enumerate(records):
        n = r.n_steps
        if n > T:
            raise ValueError(f"record {r.id} longer than {T} samples")
        X[k, :n, 0] = r.i[:n]
        X[k, :n, 1] = r.q[:n]
        lengths[k] = n
    return X, lengths
