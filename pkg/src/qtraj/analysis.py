"""Drift/diffusion statistics of Bloch trajectories and the fits built on them.

Increments ``dr = r[k+1] - r[k]`` are binned by ``r[k]`` on a 2-d grid in one
Bloch plane.  Per bin we keep the sample mean and the ``1/m`` covariance of the
in-plane increments, its dominant eigenvector scaled by the eigenvalue
(``v = lambda_max * xi``), and a drift-corrected covariance with the linear
dependence of the increment on the position inside the bin regressed out.

Conventions (yz plane): for a positive drive the measured observable is
``z cos(theta) - y sin(theta)``, so the backaction axis is ``(-sin t, cos t)``
and :func:`extract_tilt` returns ``theta > 0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import curve_fit, minimize, minimize_scalar
from sklearn.base import BaseEstimator

from .core import PhysicalParams, Trajectory

PLANES = {"yz": (1, 2, 0), "xz": (0, 2, 1), "xy": (0, 1, 2)}


@dataclass(frozen=True)
class BinGrid:
    plane: str = "yz"
    n_bins: int = 20
    min_samples: int = 50

    def __post_init__(self):
        if self.plane not in PLANES:
            raise ValueError(f"plane must be one of {sorted(PLANES)}")
        if self.n_bins < 4:
            raise ValueError("n_bins must be >= 4")
        if self.min_samples < 10:
            raise ValueError("min_samples must be >= 10")

    @property
    def width(self) -> float:
        return 2.0 / self.n_bins

    def centers(self) -> np.ndarray:
        c = -1.0 + (np.arange(self.n_bins) + 0.5) * self.width
        a, b = np.meshgrid(c, c, indexing="ij")
        return np.stack([a.ravel(), b.ravel()], axis=1)


@dataclass
class BinStats:
    """Per-bin statistics for the bins that met ``min_samples``; arrays over bins."""

    grid: BinGrid
    index: np.ndarray  # flat bin index
    center: np.ndarray  # (n, 2)
    mean_pos: np.ndarray  # (n, 2) mean in-plane position of the samples
    mean_other_sq: np.ndarray  # (n,) mean square of the out-of-plane coordinate
    mean_drift: np.ndarray  # (n, 2)
    cov: np.ndarray  # (n, 2, 2), 1/m normalization
    cov_resid: np.ndarray  # (n, 2, 2), position dependence regressed out
    v: np.ndarray  # (n, 2) = lambda_max * xi
    count: np.ndarray  # (n,)

    def __len__(self):
        return len(self.count)

    def select(self, mask) -> "BinStats":
        m = np.asarray(mask)
        return BinStats(self.grid, self.index[m], self.center[m], self.mean_pos[m], self.mean_other_sq[m],
                        self.mean_drift[m], self.cov[m], self.cov_resid[m], self.v[m], self.count[m])

    def to_rows(self) -> List[dict]:
        a, b, _ = self.grid.plane[0], self.grid.plane[1], None
        rows = []
        for k in range(len(self)):
            rows.append({
                f"center_{a}": self.center[k, 0], f"center_{b}": self.center[k, 1],
                f"drift_{a}": self.mean_drift[k, 0], f"drift_{b}": self.mean_drift[k, 1],
                f"cov_{a}{a}": self.cov[k, 0, 0], f"cov_{a}{b}": self.cov[k, 0, 1], f"cov_{b}{b}": self.cov[k, 1, 1],
                f"v_{a}": self.v[k, 0], f"v_{b}": self.v[k, 1], "count": int(self.count[k]),
            })
        return rows


def dominant_vector(cov: np.ndarray) -> np.ndarray:
    """``lambda_max * xi`` for ``(..., 2, 2)`` covariances; ``xi`` has a positive second
    component (ties: positive first component)."""
    w, V = np.linalg.eigh(cov)
    xi = V[..., :, -1]
    flip = (xi[..., 1] < 0) | ((xi[..., 1] == 0) & (xi[..., 0] < 0))
    xi = np.where(flip[..., None], -xi, xi)
    return w[..., -1:] * xi


def as_state_array(trajectories) -> Tuple[np.ndarray, np.ndarray]:
    """``(n, T + 1, 3)`` states and the number of valid increments per trajectory."""
    if isinstance(trajectories, np.ndarray):
        s = np.asarray(trajectories, dtype=float)
        if s.ndim == 2:
            s = s[None]
        if s.ndim != 3 or s.shape[2] != 3:
            raise ValueError("state array must be (n, T + 1, 3)")
        return s, np.full(len(s), s.shape[1] - 1)
    trajs = list(trajectories)
    if not trajs:
        raise ValueError("no trajectories")
    T = max(len(t) for t in trajs)
    s = np.zeros((len(trajs), T, 3))
    lengths = np.empty(len(trajs), dtype=int)
    for k, t in enumerate(trajs):
        st = t.states if isinstance(t, Trajectory) else np.asarray(t, dtype=float)
        s[k, : len(st)] = st
        s[k, len(st):] = st[-1]
        lengths[k] = len(st) - 1
    return s, lengths


def bin_increments(trajectories, grid: BinGrid = BinGrid(), steps: Optional[Tuple[int, int]] = None,
                   lengths: Optional[np.ndarray] = None) -> BinStats:
    """Bin the increments starting at steps ``steps[0] <= k < steps[1]`` (default: all)."""
    S, L = as_state_array(trajectories)
    if lengths is not None:
        L = np.asarray(lengths, dtype=int)
    T = S.shape[1] - 1
    k0, k1 = (0, T) if steps is None else (max(0, steps[0]), min(T, steps[1]))
    if k1 <= k0 or L.max() < 1:
        raise ValueError("need at least one trajectory with two or more states in range")
    a, b, c = PLANES[grid.plane]
    pos = S[:, k0:k1]
    inc = S[:, k0 + 1:k1 + 1] - pos
    valid = (np.arange(k0, k1)[None, :] < L[:, None]).ravel()
    pos = pos.reshape(-1, 3)[valid]
    inc = inc.reshape(-1, 3)[valid]
    nb = grid.n_bins
    ia = np.clip(np.floor((pos[:, a] + 1.0) / grid.width).astype(int), 0, nb - 1)
    ib = np.clip(np.floor((pos[:, b] + 1.0) / grid.width).astype(int), 0, nb - 1)
    flat = ia * nb + ib
    n_flat = nb * nb
    count = np.bincount(flat, minlength=n_flat).astype(float)
    keep = np.flatnonzero(count >= grid.min_samples)
    if keep.size == 0:
        raise ValueError("no bin meets min_samples")

    def mean(vals):
        return np.bincount(flat, weights=vals, minlength=n_flat)[keep] / count[keep]

    p = [pos[:, a], pos[:, b]]
    d = [inc[:, a], inc[:, b]]
    mp = np.stack([mean(p[0]), mean(p[1])], axis=1)
    md = np.stack([mean(d[0]), mean(d[1])], axis=1)
    # centered second moments (samples centered with their bin means)
    lut = np.full(n_flat, -1)
    lut[keep] = np.arange(keep.size)
    row = lut[flat]
    ok = row >= 0
    pcen = [np.where(ok, p[j] - mp[row, j], 0.0) for j in range(2)]
    dcen = [np.where(ok, d[j] - md[row, j], 0.0) for j in range(2)]
    n = keep.size
    cdd = np.empty((n, 2, 2))
    cdp = np.empty((n, 2, 2))
    cpp = np.empty((n, 2, 2))
    for i in range(2):
        for j in range(2):
            cdd[:, i, j] = mean(dcen[i] * dcen[j])
            cdp[:, i, j] = mean(dcen[i] * pcen[j])
            cpp[:, i, j] = mean(pcen[i] * pcen[j])
    resid = cdd - cdp @ np.linalg.pinv(cpp, rcond=1e-10, hermitian=True) @ np.swapaxes(cdp, 1, 2)
    resid = 0.5 * (resid + np.swapaxes(resid, 1, 2))
    return BinStats(
        grid=grid,
        index=keep,
        center=grid.centers()[keep],
        mean_pos=mp,
        mean_other_sq=mean(pos[:, c] ** 2),
        mean_drift=md,
        cov=cdd,
        cov_resid=resid,
        v=dominant_vector(cdd),
        count=count[keep],
    )


# ---------------------------------------------------------------------------
# drift


@dataclass
class DriftFit:
    omega: float
    gamma_d: float
    omega_err: float
    gamma_d_err: float
    n_bins: int


def fit_drift(bins: BinStats, dt: float) -> DriftFit:
    """Count-weighted least squares of the yz drift against ``(-G y + W z, -W y) dt``."""
    if bins.grid.plane != "yz":
        raise ValueError("drift model is defined in the yz plane")
    if len(bins) < 6:
        raise ValueError(f"need >= 6 bins, got {len(bins)}")
    y, z = bins.mean_pos[:, 0], bins.mean_pos[:, 1]
    X = np.concatenate([np.stack([z, -y], 1), np.stack([-y, np.zeros_like(y)], 1)]) * dt
    obs = np.concatenate([bins.mean_drift[:, 0], bins.mean_drift[:, 1]])
    w = np.concatenate([bins.count, bins.count])
    est, err = _wls(X, obs, w)
    return DriftFit(float(est[0]), float(est[1]), float(err[0]), float(err[1]), len(bins))


def _wls(X, obs, w):
    sw = np.sqrt(w / w.mean())
    A = X * sw[:, None]
    rhs = obs * sw
    if np.linalg.matrix_rank(A) < X.shape[1]:
        raise ValueError("rank-deficient design (bins collinear)")
    est, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    dof = max(len(obs) - X.shape[1], 1)
    s2 = float(np.sum((A @ est - rhs) ** 2)) / dof
    cov = s2 * np.linalg.inv(A.T @ A)
    return est, np.sqrt(np.maximum(np.diag(cov), 0.0))


def drift_residuals(bins: BinStats, fit: DriftFit, dt: float) -> np.ndarray:
    y, z = bins.mean_pos[:, 0], bins.mean_pos[:, 1]
    pred = np.stack([-fit.gamma_d * y + fit.omega * z, -fit.omega * y], 1) * dt
    return bins.mean_drift - pred


# ---------------------------------------------------------------------------
# tilt and diffusion


@dataclass
class TiltEstimate:
    theta: float
    theta_err: float
    n_bins: int


def extract_tilt(bins: BinStats, origin_region: float = 0.25, corrected: bool = False) -> TiltEstimate:
    """Mean angle of ``v`` from the z axis over bins with ``|y|, |z| <= origin_region``.

    Error is the standard error over those bins.  ``corrected`` uses the
    drift-corrected covariance.
    """
    if bins.grid.plane != "yz":
        raise ValueError("tilt is defined in the yz plane")
    inside = np.all(np.abs(bins.center) <= origin_region + 1e-12, axis=1)
    if inside.sum() < 3:
        raise ValueError(f"need >= 3 bins in the origin region, got {int(inside.sum())}")
    v = dominant_vector(bins.cov_resid[inside]) if corrected else bins.v[inside]
    ang = np.arctan2(-v[:, 0], v[:, 1])
    n = len(ang)
    return TiltEstimate(float(ang.mean()), float(ang.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0, n)


@dataclass
class DiffusionFit:
    theta: float
    rate: float  # 2 eta Gamma_m
    theta_err: float
    rate_err: float
    n_bins: int


def diffusion_model(mean_pos, mean_x2, theta):
    """Unit-rate covariance ``C / (R dt)`` of the yz increments at the given positions."""
    c, s = math.cos(theta), math.sin(theta)
    y, z = mean_pos[:, 0], mean_pos[:, 1]
    yr = y * c + z * s
    zr = -y * s + z * c
    gy, gz = -zr * yr, 1.0 - zr * zr
    M = np.empty((len(y), 2, 2))
    M[:, 0, 0] = gy * gy + mean_x2
    M[:, 0, 1] = M[:, 1, 0] = gy * gz
    M[:, 1, 1] = gz * gz
    Q = np.array([[c, -s], [s, c]])
    return Q @ M @ Q.T


def fit_diffusion(bins: BinStats, theta: Optional[float], dt: float, corrected: bool = True,
                  evaluate_at: str = "end") -> DiffusionFit:
    """Fit the binned covariance to the tilted backaction model.

    In the frame rotated by ``-theta`` the informational kick is
    ``(-z'y', 1 - z'^2) sqrt(R) dW1`` and the phase kick adds ``R x^2`` to the
    ``y'y'`` entry.  ``R = 2 eta Gamma_m`` enters linearly and is solved in
    closed form; ``theta=None`` also fits the tilt.

    ``evaluate_at`` places the model at the bin's mean start position
    (``"start"``), or shifted by half (``"mid"``) or all (``"end"``) of the mean
    drift.  With large rotation per step the kick acts on the propagated state,
    so ``"end"`` is the default.
    """
    if bins.grid.plane != "yz":
        raise ValueError("diffusion model is defined in the yz plane")
    if len(bins) < 3:
        raise ValueError("need >= 3 bins")
    shift = {"start": 0.0, "mid": 0.5, "end": 1.0}[evaluate_at]
    at = bins.mean_pos + shift * bins.mean_drift
    C = bins.cov_resid if corrected else bins.cov
    obs = np.stack([C[:, 0, 0], C[:, 0, 1], C[:, 1, 1]], 1).ravel()
    w = np.repeat(bins.count, 3)

    def solve(th):
        M = diffusion_model(at, bins.mean_other_sq, th) * dt
        X = np.stack([M[:, 0, 0], M[:, 0, 1], M[:, 1, 1]], 1).ravel()
        den = float(np.sum(w * X * X))
        R = float(np.sum(w * X * obs)) / den
        sse = float(np.sum(w * (obs - R * X) ** 2))
        return R, sse, X, den

    if theta is None:
        res = minimize_scalar(lambda t: solve(t)[1], bounds=(-math.pi / 2 + 1e-3, math.pi / 2 - 1e-3),
                              method="bounded", options={"xatol": 1e-7})
        theta = float(res.x)
        # curvature of the profile SSE gives the tilt error
        h = 1e-3
        f0, fp, fm = solve(theta)[1], solve(theta + h)[1], solve(theta - h)[1]
        curv = (fp - 2 * f0 + fm) / h ** 2
        dof = max(len(obs) - 2, 1)
        s2 = f0 / dof
        theta_err = math.sqrt(2 * s2 / curv) if curv > 0 else float("nan")
    else:
        theta_err = 0.0
    R, sse, X, den = solve(theta)
    dof = max(len(obs) - (2 if theta_err else 1), 1)
    rate_err = math.sqrt(sse / dof / den)
    if not np.isfinite(R):
        raise ValueError("non-finite diffusion fit")
    return DiffusionFit(float(theta), R, float(theta_err), rate_err, len(bins))


# ---------------------------------------------------------------------------
# memory-time fits


def tilt_law(omega, tau_c):
    return np.arctan(np.asarray(omega) * tau_c)


def rate_law(omega, rate0, tau_c):
    return rate0 / (1.0 + (np.asarray(omega) * tau_c) ** 2)


@dataclass
class MemoryFit:
    tau_c: float
    rate0: float
    cost: float


def _scan_then_simplex(cost, grid_points: Sequence[np.ndarray]):
    """Coarse grid scan followed by Nelder-Mead refinement."""
    mesh = np.meshgrid(*grid_points, indexing="ij")
    cand = np.stack([m.ravel() for m in mesh], 1)
    vals = np.array([cost(p) for p in cand])
    x0 = cand[int(np.argmin(vals))]
    res = minimize(cost, x0, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000})
    return res.x, float(res.fun)


def fit_memory_time(omegas, thetas, rates, theta_err=None, rate_err=None) -> MemoryFit:
    """Joint fit of ``theta = arctan(W tau_c)`` and ``R = R0 / (1 + (W tau_c)^2)``.

    Residuals are weighted by the given errors (default: unit tilt error in
    radians, rates relative to their maximum).
    """
    om = np.asarray(omegas, dtype=float)
    th = np.asarray(thetas, dtype=float)
    rt = np.asarray(rates, dtype=float)
    te = np.ones_like(th) * 0.05 if theta_err is None else np.maximum(np.asarray(theta_err), 1e-6)
    re = np.ones_like(rt) * 0.05 * rt.max() if rate_err is None else np.maximum(np.asarray(rate_err), 1e-12)
    scale_t = 1.0 / max(np.abs(om).max(), 1e-30)
    r0_scale = rt.max()

    def cost(p):
        tau = p[0] * scale_t
        r0 = p[1] * r0_scale
        return float(np.sum(((th - tilt_law(om, tau)) / te) ** 2) + np.sum(((rt - rate_law(om, r0, tau)) / re) ** 2))

    x, f = _scan_then_simplex(cost, [np.linspace(0.05, 5.0, 60), np.linspace(0.5, 1.5, 21)])
    return MemoryFit(float(x[0] * scale_t), float(x[1] * r0_scale), f)


@dataclass
class SinusoidFit:
    offset: float
    amplitude: float  # >= 0
    period: float
    phase: float  # y = offset + amplitude * sin(2 pi t / period + phase)
    cost: float

    def __call__(self, t):
        return self.offset + self.amplitude * np.sin(2 * math.pi * np.asarray(t) / self.period + self.phase)


def fit_sinusoid(t, y, period: Optional[float] = None, period_bounds=None, weights=None) -> SinusoidFit:
    """Least-squares sinusoid; a free period is scanned on a grid and refined by Nelder-Mead."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    if len(t) < 4:
        raise ValueError("need >= 4 points")

    def linear(P):
        om = 2 * math.pi / P
        X = np.stack([np.ones_like(t), np.sin(om * t), np.cos(om * t)], 1)
        sw = np.sqrt(w)
        coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
        return coef, float(np.sum(w * (X @ coef - y) ** 2))

    if period is None:
        span = t.max() - t.min()
        lo, hi = period_bounds if period_bounds else (2 * np.min(np.diff(np.sort(t))), 2 * span)
        grid = np.geomspace(lo, hi, 400)
        costs = [linear(P)[1] for P in grid]
        P0 = grid[int(np.argmin(costs))]
        res = minimize(lambda p: linear(abs(p[0]))[1], [P0], method="Nelder-Mead",
                       options={"xatol": 1e-12 * P0, "fatol": 1e-14})
        period = abs(float(res.x[0]))
    coef, cost = linear(period)
    amp = math.hypot(coef[1], coef[2])
    phase = math.atan2(coef[2], coef[1])
    return SinusoidFit(float(coef[0]), amp, period, phase, cost)


def sinusoid_lag(reference: SinusoidFit, other: SinusoidFit, anti: bool = False) -> float:
    """Delay of ``other`` behind ``reference`` (same period assumed), wrapped to half a period.

    ``anti`` compares ``other`` with the inverted reference (anti-correlated signals).
    """
    P = reference.period
    dphi = reference.phase - other.phase + (math.pi if anti else 0.0)
    lag = dphi / (2 * math.pi) * P
    return float((lag + P / 2) % P - P / 2)


# ---------------------------------------------------------------------------
# windows


@dataclass
class WindowResult:
    t: float
    omega: float
    omega_err: float
    gamma_d: float
    rate: float
    rate_err: float
    theta: float
    n_bins: int
    valid: bool


def windowed_analysis(trajectories, dt: float, window: float, grid: BinGrid = BinGrid(n_bins=20, min_samples=20),
                      stride: Optional[float] = None, t_start: float = 0.0, min_bins: int = 6,
                      theta: Optional[float] = None) -> List[WindowResult]:
    """Drift and diffusion fits restricted to successive time windows.

    Windows with fewer than ``min_bins`` populated bins, or whose fits fail,
    are returned with ``valid=False``.
    """
    if window < dt:
        raise ValueError("window shorter than dt")
    if window < 5 * dt:
        raise ValueError("window must span at least 5 samples")
    S, L = as_state_array(trajectories)
    T = S.shape[1] - 1
    w = int(round(window / dt))
    st = w if stride is None else max(1, int(round(stride / dt)))
    out = []
    for k0 in range(int(round(t_start / dt)), T - w + 1, st):
        tc = (k0 + 0.5 * w) * dt
        try:
            bins = bin_increments(S, grid, (k0, k0 + w), L)
            if len(bins) < min_bins:
                raise ValueError("insufficient spread")
            d = fit_drift(bins, dt)
            f = fit_diffusion(bins, theta, dt)
            out.append(WindowResult(tc, d.omega, d.omega_err, d.gamma_d, f.rate, f.rate_err, f.theta, len(bins), True))
        except (ValueError, np.linalg.LinAlgError):
            out.append(WindowResult(tc, math.nan, math.nan, math.nan, math.nan, math.nan, math.nan, 0, False))
    return out


# ---------------------------------------------------------------------------
# validation against tomography


@dataclass
class ValidationReport:
    epsilon: dict  # axis -> weighted RMS error
    epsilon_proj: dict  # axis -> count-weighted Bernoulli sigma
    bins: dict  # axis -> list of (prediction, tomography mean, count, sigma)
    n_bins: int

    @property
    def delta(self) -> float:
        return 2.0 / self.n_bins

    @property
    def epsilon_avg(self) -> float:
        return float(np.mean(list(self.epsilon.values())))


def validate(predictions, axes: Sequence[str], outcomes, n_bins: int = 20,
             axes_required: Sequence[str] = ()) -> ValidationReport:
    """Weighted RMS error of final-step predictions against binned tomography.

    ``predictions`` is ``(n, 3)`` Bloch vectors; ``outcomes`` are 1 for the +1
    eigenvalue.  Each axis uses only the records measured along it.
    """
    P = np.asarray(predictions, dtype=float)
    ax = np.asarray(axes)
    y = np.asarray(outcomes, dtype=float)
    if len(P) != len(ax) or len(ax) != len(y):
        raise ValueError("predictions, axes and outcomes must align")
    eps, eps_p, table = {}, {}, {}
    for name in ("X", "Y", "Z"):
        sel = ax == name
        if not sel.any():
            if name in axes_required:
                raise ValueError(f"no records measured along {name}")
            continue
        p = P[sel, "XYZ".index(name)]
        m = 2.0 * y[sel] - 1.0
        k = np.clip(np.floor((p + 1.0) / (2.0 / n_bins)).astype(int), 0, n_bins - 1)
        cnt = np.bincount(k, minlength=n_bins)
        nz = cnt > 0
        pred = np.bincount(k, weights=p, minlength=n_bins)[nz] / cnt[nz]
        tomo = np.bincount(k, weights=m, minlength=n_bins)[nz] / cnt[nz]
        N = cnt[nz].astype(float)
        sig = np.sqrt(np.clip(1.0 - tomo ** 2, 0.0, None) / N)
        eps[name] = float(math.sqrt(np.sum(N * (pred - tomo) ** 2) / N.sum()))
        eps_p[name] = float(math.sqrt(np.sum(N * sig ** 2) / N.sum()))
        table[name] = list(zip(pred.tolist(), tomo.tolist(), N.astype(int).tolist(), sig.tolist()))
    if not eps:
        raise ValueError("no labelled records")
    return ValidationReport(eps, eps_p, table, n_bins)


# ---------------------------------------------------------------------------
# efficiency calibration and steady radius


@dataclass
class EfficiencyCalibration:
    tau_m: float
    gamma_d: float
    eta: float
    gamma_m: float
    slope: float
    intercept: float
    r2: float
    t_m: np.ndarray
    separation: np.ndarray
    y_mean: np.ndarray


def efficiency_calibration(records, min_per_group: int = 20) -> EfficiencyCalibration:
    """``tau_m`` from the growth of the outcome-conditioned record separation,
    ``Gamma_d`` from the decay of ``<Y>``, and ``eta = 1 / (tau_m Gamma_d)``.

    Records must be undriven, prepared on the equator (+Y), labelled along Z
    (separation) and Y (decay), for several ``t_m``.
    """
    recs = list(getattr(records, "records", records))
    tms = sorted({round(r.t_m, 15) for r in recs})
    t_sep, S, t_y, Y, Yerr = [], [], [], [], []
    for tm in tms:
        grp = [r for r in recs if round(r.t_m, 15) == tm]
        z = [r for r in grp if r.tomo_axis == "Z"]
        if len(z) >= min_per_group and tm > 0:
            V = np.array([r.i[: r.n_steps].mean() for r in z])
            o = np.array([r.tomo_outcome for r in z])
            if 0 < o.sum() < len(o) - 1 and o.sum() > 1:
                v1, v0 = V[o == 1], V[o == 0]
                dv = v1.mean() - v0.mean()
                var = (((v1 - v1.mean()) ** 2).sum() + ((v0 - v0.mean()) ** 2).sum()) / (len(V) - 2)
                t_sep.append(tm)
                S.append(dv * dv / var)
        yy = [r for r in grp if r.tomo_axis == "Y"]
        if len(yy) >= min_per_group:
            m = 2.0 * np.mean([r.tomo_outcome for r in yy]) - 1.0
            t_y.append(tm)
            Y.append(m)
            Yerr.append(max(math.sqrt(max(1.0 - m * m, 1e-4) / len(yy)), 1e-3))
    if len(t_sep) < 2 or len(t_y) < 2:
        raise ValueError("need at least two t_m groups labelled along Z and along Y")
    t_sep, S = np.array(t_sep), np.array(S)
    slope, intercept = np.polyfit(t_sep, S, 1)
    pred = slope * t_sep + intercept
    r2 = 1.0 - np.sum((S - pred) ** 2) / np.sum((S - S.mean()) ** 2)
    if not slope > 0:
        raise ValueError("non-positive separation slope")
    tau_m = 4.0 / slope
    t_y, Y, Yerr = np.array(t_y), np.array(Y), np.array(Yerr)
    k0 = 1.0 / max(t_y.mean(), 1e-12)
    (amp, gd), _ = curve_fit(lambda t, a, g: a * np.exp(-g * t), t_y, Y, p0=[1.0, k0], sigma=Yerr, maxfev=20000)
    eta = 1.0 / (tau_m * gd)
    return EfficiencyCalibration(tau_m, float(gd), float(eta), 1.0 / (2.0 * eta * tau_m), float(slope),
                                 float(intercept), float(r2), t_sep, S, Y)


def steady_radius(eta) -> float:
    """Fast-drive steady Bloch radius set by the detection efficiency."""
    e = np.asarray(eta, dtype=float)
    if np.any((e <= 0) | (e > 1)):
        raise ValueError("eta must lie in (0, 1]")
    a = (2.0 + e) / (2.0 * e)
    r = np.sqrt(a - np.sqrt(a * a - 2.0))
    return float(r) if r.ndim == 0 else r


def radial_mode(states, bins: int = 100, range_=(0.0, 1.0)) -> float:
    """Mode of the Bloch-radius histogram (bin center)."""
    r = np.linalg.norm(np.asarray(states).reshape(-1, 3), axis=1)
    h, edges = np.histogram(r, bins=bins, range=range_)
    k = int(np.argmax(h))
    return float(0.5 * (edges[k] + edges[k + 1]))


# ---------------------------------------------------------------------------
# theory maps and ensemble averages


@dataclass
class TheoryMap:
    plane: str
    center: np.ndarray  # (n, 2)
    drift: np.ndarray  # (n, 2), per dt
    v: np.ndarray  # (n, 2), lambda_max * xi of the predicted increment covariance
    std: np.ndarray  # (n, 2), sqrt(lambda_max) * xi


def backaction_theory_maps(plane: str, params: PhysicalParams, grid: BinGrid = None,
                           theta: float = 0.0, eta2: float = 1.0, omega: Optional[float] = None,
                           dt: Optional[float] = None) -> TheoryMap:
    """Predicted drift and backaction fields on the bin centres (remaining coordinate 0).

    ``theta`` is the tilt (positive for a positive drive) and ``eta2`` the rate
    reduction; both informational and phase kicks are included.
    """
    grid = BinGrid(plane=plane) if grid is None else grid
    a, b, c = PLANES[plane]
    dt = params.dt if dt is None else dt
    omega = params.omega if omega is None else omega
    cen = grid.centers()
    r = np.zeros((len(cen), 3))
    r[:, a], r[:, b] = cen[:, 0], cen[:, 1]
    x, y, z = r[:, 0], r[:, 1], r[:, 2]
    drift3 = np.stack([-params.gamma_d * x, -params.gamma_d * y + omega * z, -omega * y], 1) * dt
    cs, sn = math.cos(theta), math.sin(theta)
    yr = y * cs + z * sn
    zr = -y * sn + z * cs
    k = math.sqrt(eta2 * dt / params.tau)
    b1 = np.stack([-zr * x, -zr * yr, 1.0 - zr * zr], 1) * k
    b2 = np.stack([-yr, x, np.zeros_like(x)], 1) * k

    def back(v):  # rotated frame -> lab (y, z)
        return np.stack([v[:, 0], v[:, 1] * cs - v[:, 2] * sn, v[:, 1] * sn + v[:, 2] * cs], 1)

    b1, b2 = back(b1), back(b2)
    P = np.stack([b1[:, [a, b]], b2[:, [a, b]]], 2)  # (n, 2, 2) columns are kicks
    C = P @ np.swapaxes(P, 1, 2)
    v = dominant_vector(C)
    lam = np.linalg.norm(v, axis=1, keepdims=True)
    std = np.where(lam > 0, v / np.sqrt(np.maximum(lam, 1e-300)), 0.0)
    inside = np.sum(cen ** 2, axis=1) <= 1.0
    return TheoryMap(plane, cen[inside], drift3[inside][:, [a, b]], v[inside], std[inside])


def cosine_similarity(u, w) -> np.ndarray:
    """Per-row |cos| between direction fields (eigenvector sign is a convention)."""
    u, w = np.asarray(u, float), np.asarray(w, float)
    num = np.abs(np.sum(u * w, axis=-1))
    den = np.linalg.norm(u, axis=-1) * np.linalg.norm(w, axis=-1)
    return np.where(den > 0, num / np.maximum(den, 1e-300), 1.0)


def ensemble_average(series, lengths=None) -> np.ndarray:
    """Pointwise mean over series; samples past each series' length are ignored.

    Accepts a ``(n, T)`` array, a list of 1-d arrays (ragged), a list of
    :class:`VoltageRecord` (averages ``I``) or of :class:`Trajectory` (averages states).
    """
    items = list(series) if not isinstance(series, np.ndarray) else series
    if isinstance(items, list) and items and isinstance(items[0], Trajectory):
        S, L = as_state_array(items)
        return _masked_mean(S, L + 1)
    if isinstance(items, list) and items and hasattr(items[0], "i") and hasattr(items[0], "n_steps"):
        lengths = np.array([r.n_steps for r in items])
        T = lengths.max()
        items = np.stack([np.pad(r.i[:T], (0, max(0, T - len(r.i)))) for r in items])
    if isinstance(items, list):
        if len(items) < 2:
            raise ValueError("need >= 2 series")
        lens = np.array([len(s) for s in items])
        arr = np.zeros((len(items), lens.max()))
        for k, s in enumerate(items):
            arr[k, : len(s)] = s
        return _masked_mean(arr, lens if lengths is None else np.asarray(lengths))
    arr = np.asarray(items, dtype=float)
    if len(arr) < 2:
        raise ValueError("need >= 2 series")
    lens = np.full(len(arr), arr.shape[1]) if lengths is None else np.asarray(lengths)
    if np.any(lens > arr.shape[1]):
        raise ValueError("length exceeds series")
    return _masked_mean(arr, lens)


def _masked_mean(arr, lens):
    T = arr.shape[1]
    mask = np.arange(T)[None, :] < lens[:, None]
    m = mask.reshape(mask.shape + (1,) * (arr.ndim - 2))
    cnt = mask.sum(0)
    if np.any(cnt == 0):
        raise ValueError("some time points are covered by no series")
    return np.sum(np.where(m, arr, 0.0), axis=0) / cnt.reshape(cnt.shape + (1,) * (arr.ndim - 2))


def lag_by_xcorr(reference, other, dt: float, max_lag: Optional[int] = None) -> float:
    """Delay of ``other`` behind ``reference`` from the peak of their cross-correlation,
    refined by a parabola through the peak."""
    a = np.asarray(reference, float) - np.mean(reference)
    b = np.asarray(other, float) - np.mean(other)
    n = len(a)
    max_lag = n // 2 if max_lag is None else max_lag
    lags = np.arange(0, max_lag + 1)
    cc = np.array([np.dot(a[: n - L], b[L:]) / (n - L) for L in lags])
    k = int(np.argmax(cc))
    if 0 < k < len(cc) - 1:
        den = cc[k - 1] - 2 * cc[k] + cc[k + 1]
        k = k + (0.5 * (cc[k - 1] - cc[k + 1]) / den if den != 0 else 0.0)
    return float(k * dt)


# ---------------------------------------------------------------------------
# estimator wrapper


class TrajectoryAnalyzer(BaseEstimator):
    """``fit`` bins the trajectories and runs the drift, tilt and diffusion fits."""

    def __init__(self, dt: float = 40e-9, n_bins: int = 20, min_samples: int = 50,
                 origin_region: float = 0.25, fit_theta: bool = False):
        self.dt = dt
        self.n_bins = n_bins
        self.min_samples = min_samples
        self.origin_region = origin_region
        self.fit_theta = fit_theta

    def fit(self, X, y=None):
        grid = BinGrid("yz", self.n_bins, self.min_samples)
        self.bins_ = bin_increments(X, grid)
        self.drift_ = fit_drift(self.bins_, self.dt)
        try:
            self.tilt_ = extract_tilt(self.bins_, self.origin_region)
            theta = None if self.fit_theta else self.tilt_.theta
        except ValueError:
            self.tilt_ = None
            theta = None
        self.diffusion_ = fit_diffusion(self.bins_, theta, self.dt)
        return self

    def summary(self) -> dict:
        d = {"omega": self.drift_.omega, "omega_err": self.drift_.omega_err,
             "gamma_d": self.drift_.gamma_d, "gamma_d_err": self.drift_.gamma_d_err,
             "rate": self.diffusion_.rate, "rate_err": self.diffusion_.rate_err,
             "theta_diffusion": self.diffusion_.theta}
        if self.tilt_ is not None:
            d.update(theta=self.tilt_.theta, theta_err=self.tilt_.theta_err)
        return d
