"""Deterministic reference for the ensemble-mean dynamics.

The mean of the diffusion equations obeys the master equation with the
factor-2 convention

    drho/dt = sum_m (2 L_m rho L_m^+ - L_m^+ L_m rho - rho L_m^+ L_m),

integrated here with fixed-step classical Runge-Kutta.  The usual
``L rho L^+ - {L^+ L, rho}/2`` convention corresponds to ``L -> L / sqrt(2)``
(see :func:`to_standard_convention`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .operators import DimensionError, LindbladSet, dagger, hermitize


@dataclass(frozen=True)
class MeanEvolutionResult:
    times: np.ndarray
    states: np.ndarray  # (len(times), dim, dim)

    def at(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.times - t)))
        return self.states[k]


def lindblad_generator(rho: np.ndarray, L: LindbladSet) -> np.ndarray:
    ops = L.operators
    K = L.K
    return 2.0 * np.sum(ops @ rho[..., None, :, :] @ dagger(ops), axis=-3) - K @ rho - rho @ K


def to_standard_convention(L: LindbladSet) -> LindbladSet:
    """Operators giving the same generator in the ``L rho L^+ - {L^+L, rho}/2`` form."""
    return LindbladSet(np.sqrt(2.0) * L.operators)


def evolve_mean(rho0, L: LindbladSet, t_final: float, steps: int,
                record_every: int = 1) -> MeanEvolutionResult:
    """RK4 solution of the mean dynamics on ``steps`` equal steps up to ``t_final``."""
    rho = np.asarray(rho0, dtype=np.complex128)
    if rho.shape != (L.dim, L.dim):
        raise DimensionError(f"state has shape {rho.shape}, operators act on dim {L.dim}")
    if not t_final > 0 or steps < 1:
        raise ValueError("need t_final > 0 and steps >= 1")
    h = t_final / steps
    times = [0.0]
    states = [rho.copy()]
    for k in range(1, steps + 1):
        k1 = lindblad_generator(rho, L)
        k2 = lindblad_generator(rho + 0.5 * h * k1, L)
        k3 = lindblad_generator(rho + 0.5 * h * k2, L)
        k4 = lindblad_generator(rho + h * k3, L)
        rho = hermitize(rho + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4))
        if not np.all(np.isfinite(rho)):
            raise ArithmeticError(f"non-finite state at step {k}")
        if k % record_every == 0 or k == steps:
            times.append(k * h)
            states.append(rho.copy())
    return MeanEvolutionResult(np.array(times), np.array(states))


def evolve_euler(rho0, L: LindbladSet, dt: float, steps: int) -> np.ndarray:
    """Forward-Euler iterate ``(1 + G dt)^steps rho0``.

    This is exactly the ensemble mean produced by the Euler-Maruyama
    integrators, so ``evolve_euler - evolve_mean`` is their first-order
    discretization bias.
    """
    rho = np.asarray(rho0, dtype=np.complex128)
    for _ in range(steps):
        rho = rho + dt * lindblad_generator(rho, L)
    return rho


def closed_form_offdiagonal(rho0_mn: complex, l_m: float, l_n: float, t: float) -> complex:
    """Mean off-diagonal element for a diagonal observable: ``rho_mn(0) exp(-(l_m - l_n)^2 t)``."""
    return rho0_mn * np.exp(-((l_m - l_n) ** 2) * t)
