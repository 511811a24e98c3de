"""Deterministic Lindblad evolution of the joint qubit + readout-resonator system.

Frame: rotating at the probe frequency (midpoint between the dressed resonances)
and at the Stark-shifted qubit frequency, so that

    H = chi (a^dag a - nbar) sigma_z + (Omega / 2) sigma_x + eps (a + a^dag)

with resonator loss ``kappa`` and qubit relaxation ``gamma1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import PhysicalParams


class TruncationError(RuntimeError):
    """Raised when the Fock truncation visibly changes the result."""


@dataclass(frozen=True)
class JointSimResult:
    times: np.ndarray
    alpha_g: np.ndarray
    alpha_e: np.ndarray
    alpha_g_ss: complex
    alpha_e_ss: complex
    gamma_d_eff: float
    n_max: int
    top_population: float


def _ops(n_max: int):
    a = np.diag(np.sqrt(np.arange(1, n_max)), 1)
    iq = np.eye(2)
    ic = np.eye(n_max)
    sz = np.diag([1.0, -1.0])
    sx = np.array([[0.0, 1.0], [1.0, 0.0]])
    sm = np.array([[0.0, 1.0], [0.0, 0.0]])  # |0><1|, decay to ground
    return {
        "a": np.kron(iq, a),
        "n": np.kron(iq, a.T @ a),
        "sz": np.kron(sz, ic),
        "sx": np.kron(sx, ic),
        "sy": np.kron(np.array([[0.0, -1j], [1j, 0.0]]), ic),
        "sm": np.kron(sm, ic),
        "pg": np.kron(np.diag([1.0, 0.0]), ic),
        "pe": np.kron(np.diag([0.0, 1.0]), ic),
    }


def _liouvillian(H, c_ops):
    """Column-stacking superoperator: vec(A rho B) = (B^T kron A) vec(rho)."""
    d = H.shape[0]
    I = np.eye(d)
    L = -1j * (np.kron(I, H) - np.kron(H.T, I))
    for c in c_ops:
        cdc = c.conj().T @ c
        L += np.kron(c.conj(), c) - 0.5 * np.kron(I, cdc) - 0.5 * np.kron(cdc.T, I)
    return L


def _steady_nbar(params):
    return params.eps_drive ** 2 / ((params.kappa / 2) ** 2 + params.chi ** 2)


def build_liouvillian(params: PhysicalParams, omega: float, n_max: int) -> np.ndarray:
    o = _ops(n_max)
    H = (params.chi * (o["n"] - _steady_nbar(params) * np.eye(2 * n_max)) @ o["sz"]
         + 0.5 * omega * o["sx"]
         + params.eps_drive * (o["a"] + o["a"].T))
    c_ops = [math.sqrt(params.kappa) * o["a"]]
    if params.gamma1 > 0:
        c_ops.append(math.sqrt(params.gamma1) * o["sm"])
    if params.gamma_phi_env > 0:
        c_ops.append(math.sqrt(params.gamma_phi_env / 2) * o["sz"])
    return _liouvillian(H, c_ops)


def _vec(rho):
    return rho.reshape(-1, order="F")


def _unvec(v, d):
    return v.reshape(d, d, order="F")


def _conditional_amplitudes(rho, o):
    pg = np.trace(o["pg"] @ rho).real
    pe = np.trace(o["pe"] @ rho).real
    ag = np.trace(rho @ o["a"] @ o["pg"]) / pg if pg > 1e-12 else np.nan
    ae = np.trace(rho @ o["a"] @ o["pe"]) / pe if pe > 1e-12 else np.nan
    # Tr(rho a |q><q|) with a and |q><q| commuting
    return complex(ag), complex(ae)


def _coherent_state(alpha, n_max):
    n = np.arange(n_max)
    logf = np.array([math.lgamma(k + 1) for k in n])
    c = np.exp(-abs(alpha) ** 2 / 2 - 0.5 * logf) * np.power(alpha + 0j, n)
    return c / np.linalg.norm(c)


def _steady_state(L, d):
    w, v = np.linalg.eig(L)
    k = np.argmin(np.abs(w))
    rho = _unvec(v[:, k], d)
    rho = rho / np.trace(rho)
    return 0.5 * (rho + rho.conj().T), w


def cavity_conditional_steady(params: PhysicalParams, n_max: int = 12):
    """Undriven steady amplitudes with the qubit frozen in |g> and |e>."""
    a = np.diag(np.sqrt(np.arange(1, n_max)), 1)
    out = []
    for s in (1.0, -1.0):
        H = s * params.chi * (a.T @ a) + params.eps_drive * (a + a.T)
        L = _liouvillian(H, [math.sqrt(params.kappa) * a])
        rho, _ = _steady_state(L, n_max)
        out.append(complex(np.trace(rho @ a)))
    return out[0], out[1]


def qubit_decay_rate(L: np.ndarray, n_max: int, n_modes: int = 3) -> float:
    """Ensemble decay of the qubit yz-coherence from the Liouvillian spectrum.

    The slowest ``n_modes`` non-stationary modes are the qubit Bloch modes
    (resonator modes decay at ~kappa/2).  The mode carrying mostly ``sigma_x``
    commutes with the drive and is dropped; the faster of the two remaining
    modes gives the coherence decay at zero drive and the Rabi-envelope decay
    under strong drive.
    """
    w, R = np.linalg.eig(L)
    order = np.argsort(-w.real)
    rates = -w.real[order]
    keep = order[rates > 1e-9 * max(1.0, rates.max())][:n_modes]
    o = _ops(n_max)
    d = 2 * n_max
    weights = []
    for k in keep:
        op = _unvec(R[:, k], d)
        comps = np.array([abs(np.trace(o[name] @ op)) for name in ("sx", "sy", "sz")])
        weights.append(comps[0] / max(comps.sum(), 1e-300))
    drop = int(np.argmax(weights))
    rest = [k for j, k in enumerate(keep) if j != drop]
    return float(max(-w[k].real for k in rest))


@lru_cache(maxsize=256)
def _joint_cached(params: PhysicalParams, omega: float, n_max: int, t_end: float):
    if n_max < 3:
        raise ValueError("n_max must be >= 3")
    d = 2 * n_max
    o = _ops(n_max)
    L = build_liouvillian(params, omega, n_max)
    rho_ss, _ = _steady_state(L, d)
    if omega == 0.0:
        ag_ss, ae_ss = cavity_conditional_steady(params, n_max)
    else:
        ag_ss, ae_ss = _conditional_amplitudes(rho_ss, o)
    gamma_d = qubit_decay_rate(L, n_max)

    # time series: qubit heralded in |g>, resonator in its |g>-conditioned steady state
    ag0, _ = cavity_conditional_steady(params, n_max)
    psi = np.kron([1.0, 0.0], _coherent_state(ag0, n_max))
    rho = np.outer(psi, psi.conj())
    h = min(1.0 / params.kappa, 1.0 / max(abs(omega), 1e-30)) / 20.0
    n_steps = max(1, int(math.ceil(t_end / h)))
    h = t_end / n_steps
    v = _vec(rho)
    times = np.linspace(0.0, t_end, n_steps + 1)
    ag = np.empty(n_steps + 1, complex)
    ae = np.empty(n_steps + 1, complex)
    ag[0], ae[0] = _conditional_amplitudes(rho, o)
    for k in range(n_steps):
        k1 = L @ v
        k2 = L @ (v + 0.5 * h * k1)
        k3 = L @ (v + 0.5 * h * k2)
        k4 = L @ (v + h * k3)
        v = v + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        ag[k + 1], ae[k + 1] = _conditional_amplitudes(_unvec(v, d), o)

    top = float(np.real(np.trace(rho_ss @ np.kron(np.eye(2), np.diag(np.eye(n_max)[-1])))))
    return JointSimResult(times, ag, ae, ag_ss, ae_ss, gamma_d, n_max, top)


def lindblad_joint(params: PhysicalParams, omega: float, n_max: int = 12,
                   t_end: float = 2e-6, check: bool = True, tol: float = 1e-6) -> JointSimResult:
    """Integrate the joint density operator and extract conditional amplitudes and ``Gamma_d``.

    With ``check`` the run is repeated at ``n_max + 2``; a change in the steady
    amplitudes (absolute) or in ``Gamma_d`` (relative) above ``tol`` raises
    :class:`TruncationError`.
    """
    res = _joint_cached(params, float(omega), int(n_max), float(t_end))
    if check:
        if res.top_population > tol:
            raise TruncationError(f"top Fock level population {res.top_population:.2e} > {tol}")
        ref = _joint_cached(params, float(omega), int(n_max) + 2, float(t_end))
        diffs = {
            "alpha_g": abs(ref.alpha_g_ss - res.alpha_g_ss),
            "alpha_e": abs(ref.alpha_e_ss - res.alpha_e_ss),
            "gamma_d (relative)": abs(ref.gamma_d_eff - res.gamma_d_eff) / ref.gamma_d_eff,
        }
        bad = {k: v for k, v in diffs.items() if not v < tol}
        if bad:
            raise TruncationError(f"n_max={n_max} not converged: {bad}")
    return res


def truncation_deltas(params: PhysicalParams, omega: float, n_max: int = 12) -> dict:
    a = _joint_cached(params, float(omega), n_max, 2e-6)
    b = _joint_cached(params, float(omega), n_max + 2, 2e-6)
    return {
        "alpha_g": abs(a.alpha_g_ss - b.alpha_g_ss),
        "alpha_e": abs(a.alpha_e_ss - b.alpha_e_ss),
        "gamma_d_rel": abs(a.gamma_d_eff - b.gamma_d_eff) / b.gamma_d_eff,
    }


def distinguishability_scale(params: PhysicalParams, omega: float, n_max: int = 12) -> float:
    """Steady ``(alpha_e - alpha_g)`` at drive ``omega`` relative to the undriven value.

    The complex ratio is projected on the informational quadrature, i.e. the
    direction of the undriven separation.
    """
    ref = lindblad_joint(params, 0.0, n_max, check=False)
    d0 = ref.alpha_e_ss - ref.alpha_g_ss
    if abs(d0) == 0:
        raise ZeroDivisionError("undriven conditional amplitudes coincide")
    if omega == 0:
        return 1.0
    res = lindblad_joint(params, omega, n_max, check=False)
    d = res.alpha_e_ss - res.alpha_g_ss
    return float((d * np.conj(d0)).real / abs(d0) ** 2)
