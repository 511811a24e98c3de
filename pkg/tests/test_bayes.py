import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qtraj.bayes import (
    BayesCalibration,
    BayesianFilter,
    DensityMatrix2,
    FilterVariant,
    bayes_update,
    calibrate,
    filter_batch,
    lindblad_propagate,
    run_filter,
)
from qtraj.core import CARDINAL_STATES, BlochState, PhysicalParams, averaging_efficiency, tilt_angle
from qtraj.simulator import SimRegime, boost_update, generate_dataset, simulate_ensemble

P0 = PhysicalParams()


def _random_states(rng, n):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.random((n, 1)) ** 0.3


def test_bayes_update_equals_boost(rng):
    p = PhysicalParams(eta=1.0)
    cal = BayesCalibration.ideal(p)
    states = _random_states(rng, 10000)
    i = rng.normal(0, 3 * math.sqrt(p.tau / p.dt), 10000)
    worst = 0.0
    for v, ik in zip(states, i):
        a = bayes_update(DensityMatrix2.from_bloch(v), ik, 0.0, cal, p, p.dt).to_bloch().as_array()
        b = boost_update(v, ik, p.dt, p.tau)
        worst = max(worst, np.max(np.abs(a - b)))
    assert worst < 1e-10


def test_standard_filter_inverts_boost_regime():
    p = P0.with_omega(0.6 * P0.kappa / 2)
    ens = simulate_ensemble(p, SimRegime("boost", 4, theta=0.0, eta2=1.0), 2e-6, "+Y", n_traj=50)
    est = filter_batch(ens.i, ens.q, None, CARDINAL_STATES["+Y"], p, BayesCalibration.ideal(p), "Standard")
    assert np.max(np.abs(est - ens.states)) < 1e-8


def test_analytics_filter_inverts_tilted_boost_regime():
    p = P0.with_omega(2.0 * P0.kappa / 2)
    th = -float(tilt_angle(p.omega, p.kappa))
    e2 = float(averaging_efficiency(p.omega, p.kappa))
    ens = simulate_ensemble(p, SimRegime("boost", 5, theta=th, eta2=e2), 2e-6, "+Y", n_traj=50)
    est = filter_batch(ens.i, ens.q, None, CARDINAL_STATES["+Y"], p, BayesCalibration.ideal(p),
                       FilterVariant.analytics(p))
    assert np.max(np.abs(est - ens.states)) < 1e-8


def test_analytics_at_zero_drive_is_standard(rng):
    p = P0.with_omega(0.0)
    i = rng.normal(0, 10, (5, 30))
    q = rng.normal(0, 10, (5, 30))
    cal = BayesCalibration.ideal(p)
    a = filter_batch(i, q, None, CARDINAL_STATES["+X"], p, cal, "Standard")
    b = filter_batch(i, q, None, CARDINAL_STATES["+X"], p, cal, FilterVariant.analytics(p))
    assert np.array_equal(a, b)


@given(st.floats(0, 1), st.floats(0, 2 * math.pi), st.floats(0, 1), st.floats(1e-9, 1e-6), st.floats(0, 3e7))
def test_propagation_keeps_trace_and_positivity(p00, phase, frac, dt, omega):
    c = frac * math.sqrt(p00 * (1 - p00)) * complex(math.cos(phase), math.sin(phase))
    rho = lindblad_propagate(DensityMatrix2(p00, 1 - p00, c), P0, dt, omega)
    assert rho.rho00 + rho.rho11 == pytest.approx(1.0, abs=1e-9)
    assert min(rho.rho00, rho.rho11) >= -1e-12
    assert abs(rho.rho01) ** 2 <= rho.rho00 * rho.rho11 + 1e-12


def test_propagation_zero_drive_relaxes_to_ground():
    rho = lindblad_propagate(DensityMatrix2(0.0, 1.0, 0), P0.with_omega(0.0), 1e-6)
    assert rho.rho11 == pytest.approx(math.exp(-P0.gamma1 * 1e-6), rel=1e-9)


def test_density_matrix_validation():
    with pytest.raises(ValueError):
        DensityMatrix2(0.7, 0.7, 0)
    with pytest.raises(ValueError):
        DensityMatrix2(0.5, 0.5, 0.6)
    with pytest.raises(ValueError):
        lindblad_propagate(DensityMatrix2(1, 0, 0), P0, 0.0)


def test_zero_length_record_returns_initial_state():
    ds = generate_dataset(P0, SimRegime("kernel", 1), 1, [0.0])
    rec = ds.records[0]
    traj = run_filter(rec, P0, BayesCalibration.ideal(P0))
    assert traj.states.shape == (1, 3)
    assert np.allclose(traj.states[0], rec.init_state.as_array())


def test_calibration_recovers_levels():
    p = PhysicalParams(gamma1=0.0)
    cal = calibrate(p, n_traj=500, t_m=1e-6)
    n = 500 * 25
    se = math.sqrt(p.tau / p.dt / n)
    assert cal.i0 == pytest.approx(1.0, abs=4 * se)
    assert cal.i1 == pytest.approx(-1.0, abs=4 * se)
    assert cal.sigma2 == pytest.approx(p.tau / p.dt, rel=0.03)
    assert BayesCalibration.from_dict(cal.to_dict()) == cal


def test_estimator_matches_run_filter():
    p = P0.with_omega(0.2 * P0.kappa / 2)
    ds = generate_dataset(p, SimRegime("kernel", 2), 3, [0.4e-6, 1.2e-6])
    cal = BayesCalibration.ideal(p)
    est = BayesianFilter(params=p, calibration=cal).fit()
    trajs = est.transform(ds.records)
    for rec, tr in zip(ds.records, trajs):
        ref = run_filter(rec, p, cal)
        assert tr.id == rec.id
        assert np.allclose(tr.states, ref.states, atol=1e-12)
    assert est.predict(ds.records).shape == (len(ds), 3)
    with pytest.raises(RuntimeError):
        BayesianFilter().transform(ds.records)


def test_variant_errors():
    with pytest.raises(ValueError):
        FilterVariant("Magic")
    with pytest.raises(ValueError):
        FilterVariant("Numerics")
    with pytest.raises(ValueError):
        rec = generate_dataset(P0, SimRegime(), 1, [0.4e-6]).records[0]
        run_filter(rec, PhysicalParams(dt=20e-9), BayesCalibration.ideal(P0))


def test_filter_estimates_inside_ball(rng):
    p = P0.with_omega(P0.kappa)
    i = rng.normal(0, 30, (20, 60))
    q = rng.normal(0, 30, (20, 60))
    est = filter_batch(i, q, None, BlochState(0, 1, 0), p, BayesCalibration.ideal(p), "Analytics")
    assert np.all(np.linalg.norm(est, axis=-1) <= 1 + 1e-9)


def test_propagation_identity_and_pi_flop():
    p = PhysicalParams(gamma1=0.0).with_omega(0.0)
    rho = DensityMatrix2(0.3, 0.7, 0.2 + 0.1j)
    out = lindblad_propagate(rho, p, 1e-6)
    assert np.allclose(out.as_vector(), rho.as_vector(), atol=1e-12)
    om = 2e7
    p = PhysicalParams(gamma1=0.0).with_omega(om)
    out = lindblad_propagate(DensityMatrix2(1.0, 0.0, 0), p, math.pi / om)
    assert out.rho11 == pytest.approx(1.0, abs=1e-9)
