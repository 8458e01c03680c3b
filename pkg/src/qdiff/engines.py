"""Euler-Maruyama steppers for the three trajectory representations.

* state vector:     |dpsi> = sum_m (2<L_m^+> L_m - L_m^+ L_m - <L_m^+><L_m>) |psi> dt
                             + sum_m (L_m - <L_m>) |psi> dxi_m
* density matrix:   drho = sum_m (2 L rho L^+ - L^+L rho - rho L^+L) dt
                           + sum_m ((L - Tr(L rho)) rho dxi_m + h.c.)
* linear/weighted:  dR = sum_m (L R dxi_m + R L^+ dxi_m^* + (2 L R L^+ - L^+L R - R L^+L) dt),
                    dw = Tr dR

All kernels accept a leading batch axis: ``psi`` is ``(..., d)``, matrices are
``(..., d, d)`` and increments ``(..., m_count)``.  When every coupling operator
is diagonal an elementwise fast path is used.

The ``_*_kernel`` functions never raise on bad rows; they return diagnostics
so a batch runner can flag individual trajectories.  The public ``step_*``
functions work on one state and raise.
"""

from __future__ import annotations

import enum
import json
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np

from .noise import NoiseIncrements, NoiseStream, sample_increments
from .operators import (
    TOL_PSD,
    DimensionError,
    LindbladSet,
    UnnormalizedState,
    dagger,
    hermitize,
    operator_to_json,
)

W_DEAD = 1e-12
STEP_WARN = 0.1
STEP_MAX = 0.5
# Euler-Maruyama on the density equation does not preserve positivity: from a
# pure state each step leaves an O(dt) eigenvalue of random sign.  Only
# excursions this deep are treated as a broken step.
PSD_REJECT = 0.25


class Engine(str, enum.Enum):
    STATE_VECTOR = "STATE_VECTOR"
    DENSITY_NONLINEAR = "DENSITY_NONLINEAR"
    LINEAR_WEIGHTED = "LINEAR_WEIGHTED"


class StepError(ArithmeticError):
    """A step produced an unusable state (non-finite, strongly non-positive)."""


class WeightUnderflowError(StepError):
    pass


class StepSizeWarning(UserWarning):
    pass


def check_step_size(L: LindbladSet, dt: float) -> float:
    """Crude stability guard on ``dt * max_m ||L_m||^2``; returns that product."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    s = dt * L.max_norm_sq()
    if s > STEP_MAX:
        raise ValueError(f"dt * max||L||^2 = {s:.3g} exceeds {STEP_MAX}; reduce dt")
    if s > STEP_WARN:
        warnings.warn(f"dt * max||L||^2 = {s:.3g} exceeds {STEP_WARN}", StepSizeWarning, stacklevel=2)
    return s


def _increments(dxi) -> np.ndarray:
    if isinstance(dxi, NoiseIncrements):
        return dxi.values
    return np.asarray(dxi, dtype=np.complex128)


# numpy reductions over very short trailing axes are slow; for the small
# dimensions typical here, explicit slice loops are several times faster.
_SMALL = 16


def _rowsum(a):
    """Sum over the last axis."""
    n = a.shape[-1]
    if n > _SMALL:
        return np.sum(a, axis=-1)
    out = a[..., 0].copy()
    for j in range(1, n):
        out += a[..., j]
    return out


def _rowmax(a):
    n = a.shape[-1]
    if n > _SMALL:
        return np.max(a, axis=-1)
    out = a[..., 0].copy()
    for j in range(1, n):
        np.maximum(out, a[..., j], out=out)
    return out


def _small_dot(a, b):
    """``a @ b`` for ``a`` of shape (..., k) and a small constant ``b`` of shape (k, n)."""
    k = b.shape[0]
    if k > _SMALL:
        return a @ b
    out = a[..., 0, None] * b[0]
    for j in range(1, k):
        out = out + a[..., j, None] * b[j]
    return out


def _trace(a):
    return _rowsum(np.diagonal(a, axis1=-2, axis2=-1))


@lru_cache(maxsize=64)
def _drift_coefficients(L: LindbladSet) -> np.ndarray:
    # C_ij = sum_m (2 l_mi conj(l_mj) - |l_mi|^2 - |l_mj|^2), diagonal operators only
    diag = L.diagonals
    a2 = np.abs(diag) ** 2
    return np.sum(2.0 * diag[:, :, None] * diag[:, None, :].conj()
                  - a2[:, :, None] - a2[:, None, :], axis=0)


# -- state vector ----------------------------------------------------------------

def _sv_parts(psi, L: LindbladSet, dxi, dt):
    """Drift (already times dt) and noise parts of the state-vector increment."""
    diag = L.diagonals
    if diag is not None:
        # every term is the state times a diagonal factor
        ell = _small_dot(psi.real ** 2 + psi.imag ** 2, diag.T)
        k = np.sum(np.abs(diag) ** 2, axis=0)
        drift = psi * (2.0 * _small_dot(ell.conj(), diag) - _rowsum(np.abs(ell) ** 2)[..., None] - k)
        noise = psi * (_small_dot(dxi, diag) - _rowsum(ell * dxi)[..., None])
        return drift * dt, noise
    else:
        Lpsi = (L.operators @ psi[..., None, :, None])[..., 0]
        Kpsi = (L.K @ psi[..., :, None])[..., 0]
    ell = np.einsum("...i,...mi->...m", psi.conj(), Lpsi)
    psi_ = psi[..., None, :]
    drift = np.sum(2.0 * ell.conj()[..., None] * Lpsi - (np.abs(ell) ** 2)[..., None] * psi_, axis=-2) - Kpsi
    noise = np.sum((Lpsi - ell[..., None] * psi_) * dxi[..., None], axis=-2)
    return drift * dt, noise


def _sv_increment(psi, L, dxi, dt):
    drift, noise = _sv_parts(psi, L, dxi, dt)
    return drift + noise


def _sv_kernel(psi, L, dxi, dt, renormalize=True):
    """Return ``(psi', |psi'|^2 before renormalization)``."""
    new = psi + _sv_increment(psi, L, dxi, dt)
    n2 = np.sum(new.real ** 2 + new.imag ** 2, axis=-1)
    if renormalize:
        new = new / np.sqrt(n2)[..., None]
    return new, n2


def step_state_vector(psi, L: LindbladSet, dxi, dt: float, renormalize: bool = True) -> np.ndarray:
    """One Euler-Maruyama step of the nonlinear state-vector equation.

    Expectations are taken in the input state; the result is renormalized to
    unit norm unless ``renormalize`` is false.
    """
    psi = np.asarray(psi, dtype=np.complex128)
    dxi = _increments(dxi)
    if psi.shape != (L.dim,):
        raise DimensionError(f"state has shape {psi.shape}, operators act on dim {L.dim}")
    if dxi.shape != (len(L),):
        raise DimensionError(f"{dxi.shape[0]} increments for {len(L)} operators")
    check_step_size(L, dt)
    new, n2 = _sv_kernel(psi, L, dxi, dt, renormalize)
    if not (np.isfinite(n2) and n2 > 0 and np.all(np.isfinite(new))):
        raise StepError("non-finite state after step; dt is too large for these operators")
    return new


# -- density matrix (nonlinear) --------------------------------------------------

def _dm_increment(rho, L: LindbladSet, dxi, dt):
    diag = L.diagonals
    if diag is not None:
        ell = _small_dot(np.diagonal(rho, axis1=-2, axis2=-1), diag.T)  # <L_m>
        # g_i = sum_m (l_mi - <L_m>) dxi_m
        g = _small_dot(dxi, diag) - _rowsum(ell * dxi)[..., None]
        return rho * (_drift_coefficients(L) * dt + g[..., :, None] + g[..., None, :].conj())
    ops = L.operators
    Lrho = ops @ rho[..., None, :, :]
    ell = np.trace(Lrho, axis1=-2, axis2=-1)
    X = np.sum((Lrho - ell[..., None, None] * rho[..., None, :, :]) * dxi[..., None, None], axis=-3)
    K = L.K
    drift = 2.0 * np.sum(Lrho @ dagger(ops), axis=-3) - K @ rho - rho @ K
    return drift * dt + X + dagger(X)


def _min_eig(rho):
    d = rho.shape[-1]
    if d == 2:
        a = rho[..., 0, 0].real
        c = rho[..., 1, 1].real
        b = rho[..., 0, 1]
        return 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + np.abs(b) ** 2)
    off = rho * (1.0 - np.eye(d))
    if not np.any(off):
        return np.min(np.diagonal(rho, axis1=-2, axis2=-1).real, axis=-1)
    finite = np.isfinite(_rowsum(_rowsum(rho)))
    if np.all(finite):
        return np.linalg.eigvalsh(rho)[..., 0]
    safe = np.where(finite[..., None, None], rho, np.eye(d))
    return np.where(finite, np.linalg.eigvalsh(safe)[..., 0], np.nan)


def _clip_psd(rho):
    w, v = np.linalg.eigh(rho)
    w = np.clip(w, 0.0, None)
    out = (v * w[..., None, :]) @ dagger(v)
    return out / np.trace(out, axis1=-2, axis2=-1).real[..., None, None]


def _dm_kernel(rho, L, dxi, dt, psd_reject=PSD_REJECT):
    """Step, re-symmetrize, renormalize, repair tiny negative eigenvalues.

    Returns ``(rho', trace deviation before repair, min eigenvalue, ok mask)``.
    """
    new = rho + _dm_increment(rho, L, dxi, dt)
    if L.diagonals is None:
        # the diagonal path maps Hermitian to exactly Hermitian already
        new = hermitize(new)
    tr = _trace(new).real
    new = new / tr[..., None, None]
    lam = _min_eig(new)
    clip = (lam < 0) & (lam >= -TOL_PSD)
    if np.any(clip):
        if new.ndim == 2:
            new = _clip_psd(new)
        else:
            new[clip] = _clip_psd(new[clip])
    ok = np.isfinite(tr) & np.isfinite(_rowsum(_rowsum(new))) & ~(lam < -psd_reject)
    return new, tr - 1.0, lam, ok


def step_density_nonlinear(rho, L: LindbladSet, dxi, dt: float, psd_reject: float = PSD_REJECT) -> np.ndarray:
    """One Euler-Maruyama step of the nonlinear density-matrix equation.

    The result is re-symmetrized and renormalized to unit trace.  Eigenvalues
    in ``[-TOL_PSD, 0)`` are clipped; below ``-psd_reject`` the step is
    rejected with :class:`StepError`.
    """
    rho = np.asarray(rho, dtype=np.complex128)
    dxi = _increments(dxi)
    if rho.shape != (L.dim, L.dim):
        raise DimensionError(f"state has shape {rho.shape}, operators act on dim {L.dim}")
    if dxi.shape != (len(L),):
        raise DimensionError(f"{dxi.shape[0]} increments for {len(L)} operators")
    check_step_size(L, dt)
    new, _, lam, ok = _dm_kernel(rho, L, dxi, dt, psd_reject)
    if not ok:
        if not np.all(np.isfinite(new)):
            raise StepError("non-finite state after step; dt is too large for these operators")
        raise StepError(f"eigenvalue {float(lam):.3g} after step; dt is too large")
    return new


def density_increment(rho, L: LindbladSet, dxi, dt: float) -> np.ndarray:
    """The raw increment ``drho`` of the nonlinear equation, before any repair."""
    return _dm_increment(np.asarray(rho, dtype=np.complex128), L, _increments(dxi), dt)


# -- linear propagator with weight -----------------------------------------------

def _lin_increment(R, L: LindbladSet, dxi, dt):
    diag = L.diagonals
    if diag is not None:
        h = _small_dot(dxi, diag)
        return R * (_drift_coefficients(L) * dt + h[..., :, None] + h[..., None, :].conj())
    ops = L.operators
    LR = ops @ R[..., None, :, :]
    Y = np.sum(LR * dxi[..., None, None], axis=-3)
    K = L.K
    drift = 2.0 * np.sum(LR @ dagger(ops), axis=-3) - K @ R - R @ K
    return drift * dt + Y + dagger(Y)


def _lin_kernel(R, w, L, dxi, dt):
    dR = _lin_increment(R, L, dxi, dt)
    new_w = w + _trace(dR).real
    new = R + dR
    return (new if L.diagonals is not None else hermitize(new)), new_w


def step_linear(state: UnnormalizedState, L: LindbladSet, dxi, dt: float) -> UnnormalizedState:
    """One step of the linear equation for ``R`` and its weight ``w = Tr R``.

    The weight increment is ``Tr dR``, which equals
    ``w sum_m (Tr(L_m rho) dxi_m + Tr(rho L_m^+) dxi_m^*)`` because the drift
    is traceless.
    """
    R = np.asarray(state.R, dtype=np.complex128)
    dxi = _increments(dxi)
    if R.shape != (L.dim, L.dim):
        raise DimensionError(f"state has shape {R.shape}, operators act on dim {L.dim}")
    if dxi.shape != (len(L),):
        raise DimensionError(f"{dxi.shape[0]} increments for {len(L)} operators")
    check_step_size(L, dt)
    newR, w = _lin_kernel(R, float(state.w), L, dxi, dt)
    if not (np.isfinite(w) and np.all(np.isfinite(newR))):
        raise StepError("non-finite state after step")
    if w < W_DEAD:
        raise WeightUnderflowError(f"weight fell to {w!r}; trajectory is dead")
    return UnnormalizedState(newR, float(w))


def step_propagator(M, L: LindbladSet, dxi, dt: float) -> np.ndarray:
    """``M + dM`` with ``dM = (sum_m L_m dxi_m - K dt) M`` and ``K = sum_m L_m^+ L_m``."""
    M = np.asarray(M, dtype=np.complex128)
    dxi = _increments(dxi)
    G = np.tensordot(dxi, L.operators, axes=(-1, 0)) - L.K * dt
    return M + G @ M


def normalize(state: UnnormalizedState) -> np.ndarray:
    """``R / w``."""
    if not state.w > 0:
        raise ValueError(f"weight must be positive, got {state.w!r}")
    return np.asarray(state.R) / state.w


def weighted_step_differential(state: UnnormalizedState, next_state: UnnormalizedState) -> np.ndarray:
    """``dR / w - (dw / w) rho`` between two consecutive linear-engine states.

    This reweighted differential of the normalized state coincides with the
    nonlinear density-matrix increment driven by the same noise.
    """
    if not state.w > 0:
        raise ValueError(f"weight must be positive, got {state.w!r}")
    dR = np.asarray(next_state.R) - np.asarray(state.R)
    dw = next_state.w - state.w
    rho = np.asarray(state.R) / state.w
    return dR / state.w - (dw / state.w) * rho


# -- tracing ---------------------------------------------------------------------

@dataclass(frozen=True)
class StepRecord:
    time: float
    state: np.ndarray
    weight: float
    increments: NoiseIncrements | None

    def to_json(self) -> str:
        inc = None
        if self.increments is not None:
            v = np.asarray(self.increments.values)
            inc = {"re": v.real.tolist(), "im": v.imag.tolist(), "dt": self.increments.dt}
        return json.dumps({"time": self.time, "state": operator_to_json(self.state),
                           "weight": self.weight, "increments": inc})


def iterate_trajectory(engine: Engine, state, L: LindbladSet, stream: NoiseStream,
                       dt: float, n_steps: int, renormalize: bool = True) -> Iterator[StepRecord]:
    """Yield a :class:`StepRecord` for the initial state and after every step.

    ``state`` is a state vector, a density matrix or an
    :class:`UnnormalizedState` according to ``engine``.
    """
    engine = Engine(engine)
    w = state.w if engine is Engine.LINEAR_WEIGHTED else 1.0
    snap = state.R if engine is Engine.LINEAR_WEIGHTED else state
    yield StepRecord(0.0, np.asarray(snap), float(w), None)
    for k in range(1, n_steps + 1):
        dxi = sample_increments(stream, len(L), dt)
        if engine is Engine.STATE_VECTOR:
            state = step_state_vector(state, L, dxi, dt, renormalize)
            snap, w = state, 1.0
        elif engine is Engine.DENSITY_NONLINEAR:
            state = step_density_nonlinear(state, L, dxi, dt)
            snap, w = state, 1.0
        else:
            state = step_linear(state, L, dxi, dt)
            snap, w = state.R, state.w
        yield StepRecord(k * dt, np.asarray(snap), float(w), dxi)


def trace_to_jsonl(records, path) -> int:
    """Write records one JSON object per line; returns the number written."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json())
            fh.write("\n")
            n += 1
    return n
