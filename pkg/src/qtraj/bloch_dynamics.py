"""Two-level Lindblad propagation shared by the simulator and the Bayesian filters."""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.linalg import expm

# rho vector ordering: (rho00, rho01, rho10, rho11)
# Bloch: z = rho00 - rho11, x = 2 Re rho01, y = 2 Im rho01
_B2R = np.array(
    [
        [0.5, 0.0, 0.0, 0.5],
        [0.0, 0.5, 0.5j, 0.0],
        [0.0, 0.5, -0.5j, 0.0],
        [0.5, 0.0, 0.0, -0.5],
    ],
    dtype=complex,
)  # rho = _B2R @ (1, x, y, z)
_R2B = np.linalg.inv(_B2R)


def lindblad_generator(omega_x: float, omega_y: float = 0.0, delta: float = 0.0,
                       gamma1: float = 0.0, gamma_phi: float = 0.0) -> np.ndarray:
    """The 4x4 matrix ``lam`` with ``d rho / dt = i lam rho``.

    Relaxation damps the coherences at ``gamma1 / 2`` (needed for complete
    positivity); ``gamma_phi`` adds pure dephasing on top.
    """
    op = omega_x + 1j * omega_y
    om = omega_x - 1j * omega_y
    lam = np.array(
        [
            [0.0, op / 2, -om / 2, -1j * gamma1],
            [om / 2, -delta, 0.0, -om / 2],
            [-op / 2, 0.0, delta, op / 2],
            [0.0, -op / 2, om / 2, 1j * gamma1],
        ],
        dtype=complex,
    )
    lam[1, 1] += 1j * (gamma1 / 2 + gamma_phi)
    lam[2, 2] += 1j * (gamma1 / 2 + gamma_phi)
    return lam


@lru_cache(maxsize=4096)
def _propagators(omega_x, omega_y, delta, gamma1, gamma_phi, dt):
    lam = lindblad_generator(omega_x, omega_y, delta, gamma1, gamma_phi)
    U = expm(1j * lam * dt)
    A = np.real_if_close(_R2B @ U @ _B2R, tol=1e6).real
    U.setflags(write=False)
    A.setflags(write=False)
    return U, A


def rho_propagator(params, dt: float, omega: float = None) -> np.ndarray:
    """``exp(i lam dt)`` acting on the flattened density matrix."""
    omega = params.omega if omega is None else omega
    return _propagators(float(omega), params.omega_y, params.delta, params.gamma1,
                        params.gamma_phi_env, float(dt))[0]


def bloch_propagator(params, dt: float, omega: float = None) -> np.ndarray:
    """Same map as a real 4x4 acting on ``(1, x, y, z)``."""
    omega = params.omega if omega is None else omega
    return _propagators(float(omega), params.omega_y, params.delta, params.gamma1,
                        params.gamma_phi_env, float(dt))[1]


def bloch_to_rho(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    h = np.concatenate([np.ones(v.shape[:-1] + (1,)), v], axis=-1)
    return h @ _B2R.T


def rho_to_bloch(rho) -> np.ndarray:
    h = np.asarray(rho) @ _R2B.T
    return h[..., 1:].real
