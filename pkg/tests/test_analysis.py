import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qtraj.analysis import (
    BinGrid,
    TrajectoryAnalyzer,
    backaction_theory_maps,
    bin_increments,
    cosine_similarity,
    dominant_vector,
    drift_residuals,
    efficiency_calibration,
    ensemble_average,
    extract_tilt,
    fit_diffusion,
    fit_drift,
    fit_memory_time,
    fit_sinusoid,
    lag_by_xcorr,
    radial_mode,
    rate_law,
    sinusoid_lag,
    steady_radius,
    tilt_law,
    validate,
    windowed_analysis,
)
from qtraj.core import PhysicalParams, Trajectory
from qtraj.simulator import SimRegime, generate_dataset, simulate_ensemble

P0 = PhysicalParams()


def _pairs(start, inc):
    """Two-state trajectories ``start -> start + inc`` as an (n, 2, 3) array."""
    start = np.asarray(start, float)
    return np.stack([start, start + inc], axis=1)


def _disc_points(rng, n, radius=0.9):
    r = radius * np.sqrt(rng.random(n))
    a = 2 * math.pi * rng.random(n)
    pts = np.zeros((n, 3))
    pts[:, 1], pts[:, 2] = r * np.cos(a), r * np.sin(a)
    return pts


def test_two_point_bin():
    start = np.zeros((20, 3)) + [0, 0.01, 0.01]
    inc = np.zeros((20, 3))
    inc[:10, 2], inc[10:, 2] = 1.0, -1.0
    bins = bin_increments(_pairs(start, inc), BinGrid(n_bins=4, min_samples=10))
    assert len(bins) == 1
    assert np.allclose(bins.mean_drift, 0)
    assert np.allclose(bins.cov[0], [[0, 0], [0, 1]])
    assert np.allclose(bins.v[0], [0, 1])


def test_min_samples_and_errors():
    with pytest.raises(ValueError):
        BinGrid(n_bins=3)
    with pytest.raises(ValueError):
        BinGrid(min_samples=5)
    with pytest.raises(ValueError):
        bin_increments(_pairs(np.zeros((5, 3)), np.zeros((5, 3))), BinGrid(min_samples=10))


def test_noiseless_euler_drift_exact(rng):
    om, g, dt = 3.1e6, 0.8e6, 40e-9
    s = _disc_points(rng, 4000)
    s[:, 0] = 0.1 * rng.standard_normal(4000)
    x, y, z = s.T
    inc = np.stack([-g * x, -g * y + om * z, -om * y], 1) * dt
    bins = bin_increments(_pairs(s, inc), BinGrid(n_bins=10, min_samples=10))
    fit = fit_drift(bins, dt)
    assert fit.omega == pytest.approx(om, rel=1e-10)
    assert fit.gamma_d == pytest.approx(g, rel=1e-10)
    assert np.max(np.abs(drift_residuals(bins, fit, dt))) < 1e-15


def test_pure_rotation_has_no_diffusion(rng):
    om, dt = 5e6, 40e-9
    s = _disc_points(rng, 3000)
    y, z = s[:, 1], s[:, 2]
    inc = np.stack([0 * y, om * z, -om * y], 1) * dt
    bins = bin_increments(_pairs(s, inc), BinGrid(n_bins=8, min_samples=10))
    assert np.max(np.abs(bins.cov_resid)) < 1e-12 * np.max(np.abs(bins.cov))
    # drift tangent to circles about the x axis
    assert np.max(np.abs(np.sum(bins.mean_drift * bins.mean_pos, axis=1))) < 1e-12


@settings(max_examples=25)
@given(st.integers(0, 2 ** 31 - 1))
def test_covariance_psd_and_v_norm(seed):
    rng = np.random.default_rng(seed)
    s = _disc_points(rng, 600)
    inc = 0.05 * rng.standard_normal((600, 3)) * rng.random((1, 3))
    bins = bin_increments(_pairs(s, inc), BinGrid(n_bins=4, min_samples=10))
    w = np.linalg.eigvalsh(bins.cov)
    assert np.all(w >= -1e-15)
    assert np.allclose(bins.cov, np.swapaxes(bins.cov, 1, 2))
    assert np.allclose(np.sum(bins.v ** 2, axis=1), w[:, -1] ** 2)
    assert np.all(bins.v[:, 1] >= 0)


def test_dominant_vector_sign_convention():
    assert np.allclose(dominant_vector(np.array([[1.0, 0], [0, 0]])), [1, 0])
    v = dominant_vector(np.array([[0.5, -0.5], [-0.5, 0.5]]))
    assert v[1] > 0 and v[0] < 0


def _tilted_kicks(rng, theta, n=20000, rate=2e5, dt=40e-9, x_rms=0.0):
    s = _disc_points(rng, n)
    s[:, 0] = x_rms * rng.standard_normal(n)
    c, sn = math.cos(theta), math.sin(theta)
    y, z = s[:, 1], s[:, 2]
    yr, zr = y * c + z * sn, -y * sn + z * c
    dW = rng.standard_normal((2, n)) * math.sqrt(rate * dt)
    dyr = -zr * yr * dW[0] + s[:, 0] * dW[1]
    dzr = (1 - zr * zr) * dW[0]
    inc = np.zeros((n, 3))
    inc[:, 1] = dyr * c - dzr * sn
    inc[:, 2] = dyr * sn + dzr * c
    return _pairs(s, inc)


@pytest.mark.parametrize("theta", [0.2, 0.6])
def test_tilt_antisymmetric(theta, rng):
    grid = BinGrid(n_bins=10, min_samples=30)
    a = extract_tilt(bin_increments(_tilted_kicks(rng, theta), grid), origin_region=0.3)
    b = extract_tilt(bin_increments(_tilted_kicks(rng, -theta), grid), origin_region=0.3)
    assert a.theta == pytest.approx(theta, abs=4 * a.theta_err + 0.02)
    assert a.theta + b.theta == pytest.approx(0.0, abs=4 * math.hypot(a.theta_err, b.theta_err) + 0.02)


def test_diffusion_fit_recovers_rate_and_tilt(rng):
    rate, theta, dt = 2e5, 0.4, 40e-9
    data = _tilted_kicks(rng, theta, n=60000, rate=rate, x_rms=0.2)
    bins = bin_increments(data, BinGrid(n_bins=10, min_samples=50))
    fixed = fit_diffusion(bins, theta, dt)
    assert fixed.rate == pytest.approx(rate, rel=0.03)
    free = fit_diffusion(bins, None, dt)
    assert free.theta == pytest.approx(theta, abs=0.03)
    assert free.rate == pytest.approx(rate, rel=0.03)
    assert free.theta_err >= 0 and free.rate_err >= 0


def test_memory_fit_exact_synthetic():
    tau = 2.0 / P0.kappa
    om = np.array([0.1, 0.3, 0.5, 1.0]) * P0.kappa
    fit = fit_memory_time(om, tilt_law(om, tau), rate_law(om, 3e5, tau))
    assert fit.tau_c == pytest.approx(tau, rel=1e-6)
    assert fit.rate0 == pytest.approx(3e5, rel=1e-6)


def test_sinusoid_fit_and_lag():
    t = np.linspace(0, 5e-6, 200)
    ref = fit_sinusoid(t, 1 + 0.5 * np.sin(2 * math.pi * t / 1.8e-6 + 0.3))
    assert ref.period == pytest.approx(1.8e-6, rel=1e-6)
    lagged = fit_sinusoid(t, 2 - 0.2 * np.sin(2 * math.pi * (t - 0.2e-6) / 1.8e-6 + 0.3), period=ref.period)
    assert sinusoid_lag(ref, lagged, anti=True) == pytest.approx(0.2e-6, rel=1e-6)
    assert ref(t[:3]) == pytest.approx(1 + 0.5 * np.sin(2 * math.pi * t[:3] / 1.8e-6 + 0.3))


def test_lag_by_xcorr():
    dt = 1e-8
    t = np.arange(2000) * dt
    a = np.sin(2 * math.pi * t / 1e-6)
    b = np.sin(2 * math.pi * (t - 1.3e-7) / 1e-6)
    assert lag_by_xcorr(a, b, dt, max_lag=40) == pytest.approx(1.3e-7, abs=dt / 4)


def test_validate_perfect_predictor(rng):
    eps = []
    for n in (200, 20000):
        p = rng.uniform(-1, 1, n)
        y = (rng.random(n) < 0.5 * (1 + p)).astype(int)
        pred = np.zeros((n, 3))
        pred[:, 2] = p
        rep = validate(pred, ["Z"] * n, y, n_bins=10)
        assert rep.delta == pytest.approx(0.2)
        eps.append(rep.epsilon["Z"])
        assert rep.epsilon["Z"] <= 3 * rep.epsilon_proj["Z"]
    assert eps[1] < eps[0]


def test_validate_errors():
    with pytest.raises(ValueError):
        validate(np.zeros((2, 3)), ["Z"], [1, 0])
    with pytest.raises(ValueError):
        validate(np.zeros((2, 3)), ["Z", "Z"], [1, 0], axes_required=["X"])


def test_steady_radius():
    assert steady_radius(1.0) == pytest.approx(1.0)
    assert steady_radius(0.188) == pytest.approx(0.418, abs=5e-4)
    r = steady_radius(np.linspace(0.05, 1, 30))
    assert np.all(np.diff(r) > 0)
    for bad in (0.0, 1.2):
        with pytest.raises(ValueError):
            steady_radius(bad)


def test_radial_mode():
    v = np.zeros((100, 3))
    v[:, 2] = 0.405
    assert radial_mode(v) == pytest.approx(0.405)


def test_theory_maps_structure():
    p = P0.with_omega(0.6 * P0.kappa / 2)
    m = backaction_theory_maps("yz", p)
    r = np.linalg.norm(m.center, axis=1)
    mag = np.linalg.norm(m.v, axis=1)
    pole = np.argmin(np.linalg.norm(m.center - [0, 1], axis=1))
    assert mag[pole] < 0.2 * mag[np.argmin(r)]
    # untilted origin kick points along z
    assert cosine_similarity(m.v[np.argmin(r)], [0, 1]) == pytest.approx(1.0, abs=1e-3)
    # in the equatorial plane the in-plane kick is purely tangential (phase channel)
    mx = backaction_theory_maps("xy", p)
    radial = cosine_similarity(mx.v, mx.center)
    assert np.max(radial) < 1e-8
    # tilt rotates the origin kick by theta
    mt = backaction_theory_maps("yz", p, theta=0.3)
    k = np.argmin(np.linalg.norm(mt.center, axis=1))
    # same sign convention as extract_tilt
    assert math.atan2(-mt.v[k, 0], mt.v[k, 1]) == pytest.approx(0.3, abs=0.01)


def test_ensemble_average_forms():
    assert np.allclose(ensemble_average(np.array([[1.0, 2.0], [3.0, 4.0]])), [2, 3])
    ragged = ensemble_average([np.array([1.0, 1.0, 1.0]), np.array([3.0])])
    assert np.allclose(ragged, [2, 1, 1])
    trajs = [Trajectory(np.tile([0, 0, 1.0], (3, 1)), 1e-8), Trajectory(np.tile([0, 0, -1.0], (3, 1)), 1e-8)]
    assert np.allclose(ensemble_average(trajs), 0)
    with pytest.raises(ValueError):
        ensemble_average(np.ones((1, 3)))


def test_record_average_tracks_state_average():
    p = P0.with_omega(0.2 * P0.kappa / 2)
    ens = simulate_ensemble(p, SimRegime("memoryless", 1, substeps=5), 1e-6, "+Z", n_traj=2000)
    rec_mean = ensemble_average(ens.i)
    z_mean = ensemble_average(ens.states[:, :-1, 2])
    se = math.sqrt(p.tau / p.dt / 2000)
    assert np.mean(np.abs(rec_mean - z_mean) / se) < 1.2


def test_windowed_analysis_marks_gaps():
    s = np.tile([0.0, 0.0, 1.0], (5, 30, 1))
    res = windowed_analysis(s, 40e-9, 0.4e-6)
    assert res and not any(r.valid for r in res)
    assert all(math.isnan(r.omega) for r in res)
    with pytest.raises(ValueError):
        windowed_analysis(s, 40e-9, 0.1e-6)


def test_efficiency_calibration_exact_regime():
    p = PhysicalParams(eta=0.5, gamma1=0.0).with_omega(0.0)
    ds = generate_dataset(p, SimRegime("boost", 3, theta=0.0, eta2=1.0), 4000,
                          [0.2e-6, 0.4e-6, 0.8e-6, 1.2e-6, 1.6e-6], axes=("Y", "Z"), init_state="+Y")
    cal = efficiency_calibration(ds)
    # seed-to-seed scatter at this size is about 10%; the acceptance suite checks precision
    assert cal.eta == pytest.approx(0.5, rel=0.25)
    assert cal.gamma_d == pytest.approx(p.gamma_d, rel=0.15)
    assert cal.r2 > 0.95


def test_analyzer_slow_drive():
    p = P0.with_omega(0.2 * P0.kappa / 2)
    ens = simulate_ensemble(p, SimRegime("memoryless", 5), 2e-6, "+Y", n_traj=2000)
    an = TrajectoryAnalyzer(dt=p.dt, min_samples=50).fit(ens.states)
    s = an.summary()
    assert s["omega"] == pytest.approx(p.omega, rel=0.1)
    assert s["rate"] > 0
