import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm

from qtraj.core import CARDINAL_STATES, BlochState, PhysicalParams, purity
from qtraj.simulator import (
    SimRegime,
    boost_update,
    generate_dataset,
    memory_filter,
    memory_kernel_weights,
    record_sample,
    sample_outcomes,
    simulate_ensemble,
    simulate_trajectory,
    sme_step,
    trajectory_rng,
)

P0 = PhysicalParams()
SLOW = P0.with_omega(0.2 * P0.kappa / 2)


def test_sme_no_dynamics():
    p = PhysicalParams(gamma_m=0.0, gamma1=0.0).with_omega(0.0)
    s = BlochState(0.1, 0.2, 0.3)
    out = sme_step(s, p, 0.7, -0.4)
    assert np.allclose(out.as_array(), s.as_array())


def test_sme_pole_is_fixed_point():
    out = sme_step(np.array([0.0, 0.0, 1.0]), P0.with_omega(0.0), np.array(0.3), np.array(-0.2))
    assert np.allclose(out, [0, 0, 1])


def test_sme_stays_in_ball(rng):
    v = np.tile([0.0, 0.0, 1.0], (1000, 1))
    for _ in range(50):
        dW = rng.standard_normal((2, 1000)) * math.sqrt(P0.dt) * 5
        v = sme_step(v, SLOW, dW[0], dW[1])
    assert np.all(purity(v) <= 1 + 1e-12)


def _lindblad_mean(params, t, v0):
    om, g = params.omega, params.gamma_d
    A = np.array([[-g, 0, 0], [0, -g, om], [0, -om, 0]])
    return expm(A * t) @ v0


def test_ensemble_mean_matches_lindblad():
    # fine Euler substeps so the discretisation bias is far below the statistical error
    p = SLOW
    t_m = 2e-6
    errs = []
    for n in (100, 1000, 10000):
        ens = simulate_ensemble(p, SimRegime("memoryless", 7, substeps=20), t_m, "+Z", n_traj=n, keep_states=False)
        ref = _lindblad_mean(p, t_m, np.array([0, 0, 1.0]))
        se = ens.final.std(axis=0, ddof=1) / math.sqrt(n)
        err = np.abs(ens.final.mean(axis=0) - ref)
        assert np.all(err[1:] <= 4 * se[1:] + 1e-3)
        errs.append(np.linalg.norm(err))
    # convergence with N (loose: one decade in N should not make it worse by much)
    assert errs[2] < errs[0]


def test_record_levels():
    assert record_sample(1.0, P0, 0.0, 0.0) == (1.0, -0.0)
    assert record_sample(-1.0, P0, 0.0, 0.0)[0] == -1.0


def test_record_time_average_undriven():
    p = P0.with_omega(0.0)
    t_m = 2e-6
    ens = simulate_ensemble(p, SimRegime("memoryless", 3), t_m, "+Z", n_traj=1000, keep_states=False)
    avg = ens.i.mean(axis=1)
    se = math.sqrt(p.tau / t_m)
    assert abs(avg.mean() - 1.0) < 3 * se / math.sqrt(1000)
    assert avg.std(ddof=1) == pytest.approx(se, rel=0.1)


def test_memory_filter_constant():
    z = np.full(200, 0.3)
    assert np.allclose(memory_filter(z, P0.kappa, P0.dt), 0.3)


def test_memory_filter_sinusoid_phase_and_attenuation():
    kappa = P0.kappa
    tau_c = 2 / kappa
    dt = tau_c / 400
    om = 1 / tau_c
    t = np.arange(40000) * dt
    out = memory_filter(np.cos(om * t), kappa, dt)
    ref = np.cos(om * t - math.pi / 4) / math.sqrt(2)
    tail = t > 20 * tau_c
    # the bin-integrated kernel adds a half-sample delay
    assert np.max(np.abs(out[tail] - ref[tail])) < 2e-3


def test_memory_kernel_weights_and_delay():
    w = memory_kernel_weights(P0.kappa, P0.dt)
    assert w.sum() == pytest.approx(1.0, abs=1e-10)
    delay = np.sum(np.arange(len(w)) * w) * P0.dt
    assert abs(delay - P0.tau_c) <= P0.dt


def test_memory_filter_slow_sinusoid_delay():
    kappa, dt = P0.kappa, P0.dt
    t = np.arange(20000) * dt
    om = 0.05 / P0.tau_c
    out = memory_filter(np.sin(om * t), kappa, dt)[2000:]
    tt = t[2000:]
    a, b = np.linalg.lstsq(np.c_[np.sin(om * tt), np.cos(om * tt)], out, rcond=None)[0]
    delay = -math.atan2(b, a) / om
    assert abs(delay - P0.tau_c) <= dt


def test_boost_identity_and_mixed_state():
    s = BlochState(0.1, 0.2, 0.3)
    assert np.allclose(boost_update(s, 0.0, P0.dt, P0.tau).as_array(), s.as_array())
    tau, dt = 1.0, 0.01
    for sval in (0.3, -1.2):
        out = boost_update(np.zeros(3), sval * tau / dt, dt, tau)
        assert out[2] == pytest.approx(math.tanh(sval))


@given(st.floats(-0.6, 0.6), st.floats(-0.6, 0.6), st.floats(-1.2, 1.2), st.floats(0.2, 1.0))
def test_boost_linearisation(y, z, theta, eta2):
    tau, dt = 1.0, 1.0
    eps = 1e-4
    r = eps
    out = boost_update(np.array([0.0, y, z]), r, dt, tau, theta=theta, eta2=eta2)
    c, s = math.cos(theta), math.sin(theta)
    pred = eta2 * eps * np.array([-y * z * c + (1 - y * y) * s, -z * y * s + (1 - z * z) * c])
    assert np.allclose(out[1:] - [y, z], pred, atol=5 * eps ** 2)


@pytest.mark.parametrize("regime, nsig", [
    (SimRegime("boost", 11, theta=0.0, eta2=1.0), 3),
    (SimRegime("memoryless", 11, substeps=20), 4),
])
def test_collapse_born_rule(regime, nsig):
    # no relaxation so z is a martingale and collapse follows the Born rule
    p = PhysicalParams(eta=1.0, gamma1=0.0).with_omega(0.0)
    z0 = 0.5
    init = BlochState(math.sqrt(1 - z0 ** 2), 0.0, z0)
    ens = simulate_ensemble(p, regime, 20e-6, init, n_traj=10000, keep_states=False)
    z = ens.final[:, 2]
    assert np.mean(np.abs(z) > 0.99) > 0.99
    frac = np.mean(z > 0)
    sigma = math.sqrt(0.75 * 0.25 / 10000)
    assert abs(frac - 0.75) < nsig * sigma


def test_unmeasured_trajectory_constant():
    p = PhysicalParams(gamma_m=1e-3, gamma1=0.0).with_omega(0.0)
    traj, rec = simulate_trajectory(p, SimRegime("memoryless", 0), 4e-6, CARDINAL_STATES["+X"])
    assert np.allclose(traj.states, traj.states[0], atol=1e-3)
    assert rec.i.var() == pytest.approx(p.tau / p.dt, rel=0.25)


def test_sample_outcomes_cases(rng):
    assert sample_outcomes(np.array([[0, 0, 1.0]] * 100), ["Z"] * 100, rng.random(100)).min() == 1
    out = sample_outcomes(np.zeros((10000, 3)), ["X"] * 10000, rng.random(10000))
    assert abs(out.mean() - 0.5) < 3 * 0.5 / 100


def test_dataset_replay_and_layout():
    grid = [0.4e-6, 0.8e-6]
    a = generate_dataset(SLOW, SimRegime("kernel", 5), 4, grid)
    b = generate_dataset(SLOW, SimRegime("kernel", 5), 4, grid)
    assert len(a) == 4 * 3 * 2
    for ra, rb in zip(a.records, b.records):
        assert ra.id == rb.id and np.array_equal(ra.i, rb.i) and np.array_equal(ra.q, rb.q)
        assert ra.tomo_outcome == rb.tomo_outcome
        assert len(ra) == 20 and np.all(ra.i[ra.n_steps:] == 0)
    for rid, t in a.truth.items():
        assert np.array_equal(t.states, b.truth[rid].states)
    c = generate_dataset(SLOW, SimRegime("kernel", 6), 4, grid)
    assert not np.array_equal(a.records[0].i, c.records[0].i)


def test_rng_streams_independent_of_chunking():
    a = simulate_ensemble(SLOW, SimRegime("boost", 9), 0.4e-6, "+Z", start_index=0, n_traj=6)
    b = simulate_ensemble(SLOW, SimRegime("boost", 9), 0.4e-6, "+Z", start_index=3, n_traj=3)
    assert np.array_equal(a.i[3:], b.i)
    with pytest.raises(ValueError):
        trajectory_rng(-1, 0)


@pytest.mark.parametrize("kind", ["memoryless", "kernel", "boost"])
def test_purity_bound_all_regimes(kind):
    ens = simulate_ensemble(P0.with_omega(2 * P0.kappa / 2), SimRegime(kind, 2), 2e-6, "+Y", n_traj=200)
    assert np.all(purity(ens.states) <= 1 + 1e-6)


def test_bad_regime_and_tm():
    with pytest.raises(ValueError):
        SimRegime("quantum")
    with pytest.raises(ValueError):
        simulate_ensemble(SLOW, SimRegime(), 1.01e-7, "+Z", n_traj=1)
