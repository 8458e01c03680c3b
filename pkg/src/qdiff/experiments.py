"""Measurement scenarios: collapse to eigenstates, Born frequencies, decoherence.

An :class:`ExperimentSpec` fixes the engine, the coupling (one diagonal
observable or the full projector family), the initial state, the time grid
and the random seed.  :func:`simulate_batch` integrates any subset of its
trajectories with vectorized kernels; every trajectory draws its noise from
its own counter-based stream, so results do not depend on how trajectories
are grouped.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import engines as eng
from .engines import Engine
from .noise import NoiseStream, auxiliary_uniform, increment_block, sample_increments
from .operators import (
    LindbladSet,
    build_observable,
    build_projector_set,
    check_density_matrix,
    hermitize,
    operator_from_json,
    operator_to_json,
    pure_from_density,
)

EPS_ENDPOINT = 1e-4
EPS_OFFDIAG = 1e-3
NOISE_CHUNK = 512


class LindbladMode(str, enum.Enum):
    SINGLE_OBSERVABLE = "SINGLE_OBSERVABLE"
    PROJECTORS = "PROJECTORS"


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ExperimentSpec:
    """Everything needed to reproduce an ensemble of measurement trajectories.

    Parameters
    ----------
    engine : Engine
        Which integrator advances the trajectories.
    lindblad_mode : LindbladMode
        ``SINGLE_OBSERVABLE`` uses ``L = diag(eigenvalues)``; ``PROJECTORS``
        uses the ``dim`` basis projectors.
    initial_state : array_like
        Initial density matrix in the eigenbasis of the observable.
    eigenvalues : sequence of float, optional
        Spectrum of the observable (``SINGLE_OBSERVABLE`` only).
    stop_at_endpoint : bool
        Freeze a trajectory once its largest diagonal reaches
        ``1 - epsilon_endpoint``.  Time-series studies usually switch this off.
    renormalize : bool
        Renormalize the state vector after each step (``STATE_VECTOR`` only).
    linear_gauge : {"center", "raw"}
        ``"center"`` runs the linear engine with each Hermitian operator shifted
        to zero trace.  The normalized dynamics are identical; the weights are
        far less dispersed.
    noise_substeps : int
        Each increment is the sum of this many finer increments of the
        stream, so runs at ``dt`` and ``dt / r`` can share one Brownian path.
    """

    engine: Engine
    lindblad_mode: LindbladMode
    initial_state: np.ndarray
    eigenvalues: tuple | None = None
    dt: float = 1e-3
    t_max: float = 1.0
    trajectories: int = 1000
    seed: int = 0
    epsilon_endpoint: float = EPS_ENDPOINT
    stop_at_endpoint: bool = True
    n_record: int = 20
    renormalize: bool = True
    linear_gauge: str = "center"
    noise_substeps: int = 1
    psd_reject: float = eng.PSD_REJECT

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("engine", Engine(self.engine))
        set_("lindblad_mode", LindbladMode(self.lindblad_mode))
        set_("initial_state", check_density_matrix(self.initial_state))
        dim = self.initial_state.shape[0]
        if self.lindblad_mode is LindbladMode.SINGLE_OBSERVABLE:
            if self.eigenvalues is None:
                raise ValueError("SINGLE_OBSERVABLE needs eigenvalues")
            set_("eigenvalues", tuple(float(x) for x in self.eigenvalues))
            if len(self.eigenvalues) != dim:
                raise ValueError(f"{len(self.eigenvalues)} eigenvalues for a dim-{dim} state")
        else:
            set_("eigenvalues", None)
            if dim < 2:
                raise ValueError("PROJECTORS mode needs dim >= 2")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")
        ratio = self.t_max / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
            raise ValueError(f"t_max / dt = {ratio!r} is not a positive integer")
        if int(self.trajectories) < 1:
            raise ValueError("trajectories must be >= 1")
        set_("trajectories", int(self.trajectories))
        set_("seed", int(self.seed))
        if not 0 < self.epsilon_endpoint < 0.5:
            raise ValueError("epsilon_endpoint must lie in (0, 0.5)")
        if not 1 <= int(self.n_record) <= self.n_steps:
            raise ValueError("n_record must lie in [1, t_max/dt]")
        set_("n_record", int(self.n_record))
        if self.linear_gauge not in ("center", "raw"):
            raise ValueError("linear_gauge must be 'center' or 'raw'")
        if int(self.noise_substeps) < 1:
            raise ValueError("noise_substeps must be >= 1")
        set_("noise_substeps", int(self.noise_substeps))

    # -- derived quantities ------------------------------------------------------

    @property
    def dim(self) -> int:
        return self.initial_state.shape[0]

    @property
    def n_steps(self) -> int:
        return int(round(self.t_max / self.dt))

    @property
    def lindblad(self) -> LindbladSet:
        if self.lindblad_mode is LindbladMode.SINGLE_OBSERVABLE:
            return build_observable(self.eigenvalues)
        return build_projector_set(self.dim)

    @property
    def engine_lindblad(self) -> LindbladSet:
        L = self.lindblad
        if self.engine is Engine.LINEAR_WEIGHTED and self.linear_gauge == "center":
            return L.centered()
        return L

    @property
    def record_steps(self) -> np.ndarray:
        return np.unique(np.round(np.linspace(0, self.n_steps, self.n_record + 1)).astype(int))

    @property
    def times(self) -> np.ndarray:
        return self.record_steps * self.dt

    def replace(self, **changes) -> "ExperimentSpec":
        return dataclasses.replace(self, **changes)

    # -- serialization -------------------------------------------------------------

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["engine"] = self.engine.value
        d["lindblad_mode"] = self.lindblad_mode.value
        d["initial_state"] = operator_to_json(self.initial_state)
        d["eigenvalues"] = list(self.eigenvalues) if self.eigenvalues is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        d["initial_state"] = operator_from_json(d["initial_state"])
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown experiment fields: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class MeasurementOutcome:
    trajectory_index: int
    endpoint_index: int | None
    hitting_time: float | None
    final_diagonals: np.ndarray
    weight_final: float = 1.0
    status: str = "ok"  # ok | dead | failed
    message: str = ""
    spec_fingerprint: str = ""
    # lowest value the hit diagonal took after the hit (runs without stopping)
    min_after_hit: float | None = None
    max_final_offdiag: float = 0.0

    def to_dict(self) -> dict:
        return {
            "trajectory_index": self.trajectory_index,
            "endpoint_index": self.endpoint_index,
            "hitting_time": self.hitting_time,
            "final_diagonals": [float(x) for x in self.final_diagonals],
            "weight_final": self.weight_final,
            "status": self.status,
            "message": self.message,
        }


@dataclass
class BatchResult:
    indices: np.ndarray
    outcomes: list
    rho: np.ndarray         # (B, G, d, d) normalized states on the record grid
    weight: np.ndarray      # (B, G) linear-engine weight, 1 otherwise
    norm2: np.ndarray       # (B, G) |psi|^2, Tr R, or 1
    repair_mean: np.ndarray  # (B,) mean signed pre-repair norm/trace deviation per step
    repair_max: np.ndarray   # (B,) largest absolute deviation
    min_eig: np.ndarray      # (B,) lowest eigenvalue seen (density engine)
    compensator: np.ndarray  # (B,) sum of E[d|psi|^2 | psi] (STATE_VECTOR, no renormalization)


# -- the batched runner ------------------------------------------------------------

def _initial_vectors(spec: ExperimentSpec, indices) -> np.ndarray:
    rho0 = spec.initial_state
    try:
        psi = pure_from_density(rho0)
        return np.broadcast_to(psi, (len(indices), spec.dim)).copy()
    except ValueError:
        pass
    # mixed start: draw an eigenvector with probability equal to its eigenvalue
    w, v = np.linalg.eigh(hermitize(rho0))
    w = np.clip(w, 0.0, None)
    cdf = np.cumsum(w) / np.sum(w)
    out = np.empty((len(indices), spec.dim), dtype=np.complex128)
    for row, i in enumerate(indices):
        k = int(np.searchsorted(cdf, auxiliary_uniform(spec.seed, int(i)), side="right"))
        out[row] = v[:, min(k, spec.dim - 1)]
    return out


def _noise_chunk(spec, indices, first_step, n):
    m = len(spec.lindblad)
    r = spec.noise_substeps
    raw = increment_block(spec.seed, indices, first_step * m * r, n * m * r, spec.dt / r)
    raw = raw.reshape(len(indices), n, r, m)
    return raw[:, :, 0, :] if r == 1 else raw.sum(axis=2)


def simulate_batch(spec: ExperimentSpec, indices: Sequence[int]) -> BatchResult:
    """Integrate the trajectories ``indices`` of ``spec`` and record them on its grid."""
    L = spec.engine_lindblad
    eng.check_step_size(spec.lindblad, spec.dt)
    indices = np.asarray(indices, dtype=np.int64)
    B, d, dt = len(indices), spec.dim, spec.dt
    eps = spec.epsilon_endpoint
    engine = spec.engine
    rec_steps = spec.record_steps
    G = len(rec_steps)
    grid_of = {int(s): g for g, s in enumerate(rec_steps)}

    out_rho = np.zeros((B, G, d, d), dtype=np.complex128)
    out_w = np.ones((B, G))
    out_n2 = np.ones((B, G))
    repair_sum = np.zeros(B)
    repair_max = np.zeros(B)
    min_eig = np.full(B, np.inf)
    comp = np.zeros(B)
    steps_taken = np.zeros(B, dtype=np.int64)
    hit_step = np.full(B, -1)
    endpoint = np.full(B, -1)
    after_hit = np.full(B, np.nan)
    status = ["ok"] * B
    message = [""] * B

    if engine is Engine.STATE_VECTOR:
        X = _initial_vectors(spec, indices)
        w = np.ones(B)
    else:
        X = np.broadcast_to(spec.initial_state, (B, d, d)).copy()
        w = np.ones(B)

    def to_rho(X, w):
        if engine is Engine.STATE_VECTOR:
            n2 = eng._rowsum(X.real ** 2 + X.imag ** 2)
            return X[:, :, None] * X[:, None, :].conj() / n2[:, None, None], n2
        if engine is Engine.LINEAR_WEIGHTED:
            return X / w[:, None, None], w
        return X, np.ones(len(X))

    def diag_of(rho):
        return np.diagonal(rho, axis1=-2, axis2=-1).real

    active = np.arange(B)
    rho, n2 = to_rho(X, w)
    out_rho[:, 0] = rho
    out_w[:, 0] = w
    out_n2[:, 0] = n2
    p = diag_of(rho)
    hit0 = np.max(p, axis=1) >= 1.0 - eps
    hit_step[hit0] = 0
    endpoint[hit0] = np.argmax(p[hit0], axis=1)
    after_hit[hit0] = np.max(p[hit0], axis=1)

    def freeze(rows_local, k, rho_rows, w_rows, n2_rows):
        # rows_local index the active arrays; fill the remaining grid with the frozen state
        gpos = np.searchsorted(rec_steps, k)  # first grid point at or after step k
        b = active[rows_local]
        out_rho[b, gpos:] = rho_rows[:, None]
        out_w[b, gpos:] = w_rows[:, None]
        out_n2[b, gpos:] = n2_rows[:, None]

    if spec.stop_at_endpoint and np.any(hit0):
        freeze(np.nonzero(hit0)[0], 0, rho[hit0], w[hit0], n2[hit0])
        keep = ~hit0
        active, X, w = active[keep], X[keep], w[keep]

    noise = None
    chunk_start = 0
    for k in range(1, spec.n_steps + 1):
        if len(active) == 0:
            break
        j = (k - 1) % NOISE_CHUNK
        if j == 0:
            chunk_start = k - 1
            n = min(NOISE_CHUNK, spec.n_steps - chunk_start)
            noise = _noise_chunk(spec, indices[active], chunk_start, n)
        dxi = noise[:, j]

        bad = np.zeros(len(active), dtype=bool)
        if engine is Engine.STATE_VECTOR:
            if spec.renormalize:
                newX, pre = eng._sv_kernel(X, L, dxi, dt, True)
                dev = pre - 1.0
            else:
                n_old = eng._rowsum(X.real ** 2 + X.imag ** 2)
                drift, noise_term = eng._sv_parts(X, L, dxi, dt)
                newX = X + drift + noise_term
                comp[active] += eng._rowsum(drift.real ** 2 + drift.imag ** 2)
                dev = eng._rowsum(newX.real ** 2 + newX.imag ** 2) - n_old
            bad |= ~np.isfinite(eng._rowsum(newX))
            new_w = w
        elif engine is Engine.DENSITY_NONLINEAR:
            newX, dev, lam, ok = eng._dm_kernel(X, L, dxi, dt, spec.psd_reject)
            min_eig[active] = np.minimum(min_eig[active], np.where(np.isfinite(lam), lam, -np.inf))
            bad |= ~ok
            new_w = w
        else:
            newX, new_w = eng._lin_kernel(X, w, L, dxi, dt)
            dev = new_w - eng._trace(newX).real
            bad |= ~(np.isfinite(eng._rowsum(eng._rowsum(newX))) & np.isfinite(new_w))
        dead = np.zeros(len(active), dtype=bool)
        if engine is Engine.LINEAR_WEIGHTED:
            dead = ~bad & ~(new_w >= eng.W_DEAD)

        dev = np.where(np.isfinite(dev), dev, np.inf)
        repair_sum[active] += dev
        repair_max[active] = np.maximum(repair_max[active], np.abs(dev))
        steps_taken[active] += 1

        stop = bad | dead
        if np.any(stop):
            rows = np.nonzero(stop)[0]
            rho_old, n2_old = to_rho(X[rows], w[rows])
            freeze(rows, k, rho_old, w[rows], n2_old)
            for r_ in rows:
                b = active[r_]
                if bad[r_]:
                    status[b] = "failed"
                    message[b] = f"step {k}: " + ("negative eigenvalue" if engine is Engine.DENSITY_NONLINEAR
                                                  else "non-finite state")
                else:
                    status[b] = "dead"
                    message[b] = f"step {k}: weight below {eng.W_DEAD}"
            newX = np.where(stop[:, None, None] if newX.ndim == 3 else stop[:, None], X, newX)
            new_w = np.where(stop, w, new_w)
        X, w = newX, new_w

        rho, n2 = to_rho(X, w)
        p = diag_of(rho)
        pmax = eng._rowmax(p)
        fresh = (pmax >= 1.0 - eps) & (hit_step[active] < 0) & ~stop
        if np.any(fresh):
            b = active[fresh]
            hit_step[b] = k
            endpoint[b] = np.argmax(p[fresh], axis=1)
            after_hit[b] = pmax[fresh]
        if not spec.stop_at_endpoint:
            hb = hit_step[active] >= 0
            if np.any(hb):
                b = active[hb]
                vals = p[hb, endpoint[b]]
                after_hit[b] = np.minimum(after_hit[b], vals)

        g = grid_of.get(k)
        if g is not None:
            live = ~stop
            out_rho[active[live], g] = rho[live]
            out_w[active[live], g] = w[live]
            out_n2[active[live], g] = n2[live]

        done = stop.copy()
        if spec.stop_at_endpoint and np.any(fresh):
            freeze(np.nonzero(fresh)[0], k + 1, rho[fresh], w[fresh], n2[fresh])
            done |= fresh
        if np.any(done):
            keep = ~done
            active, X, w, noise = active[keep], X[keep], w[keep], noise[keep]

    final_rho = out_rho[:, -1]
    final_w = out_w[:, -1]
    fp = spec.fingerprint()
    outcomes = []
    off_mask = 1.0 - np.eye(d)
    for b in range(B):
        pd = diag_of(final_rho[b])
        hs = int(hit_step[b])
        outcomes.append(MeasurementOutcome(
            trajectory_index=int(indices[b]),
            endpoint_index=int(endpoint[b]) if hs >= 0 else None,
            hitting_time=hs * dt if hs >= 0 else None,
            final_diagonals=pd,
            weight_final=float(final_w[b]),
            status=status[b],
            message=message[b],
            spec_fingerprint=fp,
            min_after_hit=None if hs < 0 or spec.stop_at_endpoint else float(after_hit[b]),
            max_final_offdiag=float(np.max(np.abs(final_rho[b] * off_mask), initial=0.0)),
        ))
    with np.errstate(invalid="ignore", divide="ignore"):
        repair_mean = np.where(steps_taken > 0, repair_sum / np.maximum(steps_taken, 1), 0.0)
    return BatchResult(indices, outcomes, out_rho, out_w, out_n2, repair_mean, repair_max,
                       np.where(np.isfinite(min_eig), min_eig, np.nan), comp)


def run_measurement_trajectory(spec: ExperimentSpec, trajectory_index: int) -> MeasurementOutcome:
    """Run one trajectory to ``t_max`` or, if enabled, to its first endpoint."""
    res = simulate_batch(spec, [trajectory_index])
    out = res.outcomes[0]
    if out.status == "failed":
        raise ExperimentError(f"trajectory {trajectory_index}: {out.message}")
    return out


# -- analysis ---------------------------------------------------------------------

def weighted_mean_se(values: np.ndarray, weights: np.ndarray | None = None, axis: int = 0):
    """Self-normalized weighted mean and its standard error along ``axis``.

    With unit weights this is the sample mean with SE ``sqrt(sum (x - mean)^2) / N``.
    Complex values get independent SEs for the real and imaginary parts,
    returned as ``se_re + 1j * se_im``.
    """
    x = np.moveaxis(np.asarray(values), axis, 0)
    if weights is None:
        wt = np.ones(x.shape[0])
    else:
        wt = np.moveaxis(np.asarray(weights, dtype=float), axis, 0)
    wt = wt.reshape(wt.shape + (1,) * (x.ndim - wt.ndim))
    sw = np.sum(wt, axis=0)
    mean = np.sum(wt * x, axis=0) / sw
    dev = x - mean
    sw2 = sw ** 2
    if np.iscomplexobj(x):
        se = (np.sqrt(np.sum(wt ** 2 * dev.real ** 2, axis=0) / sw2)
              + 1j * np.sqrt(np.sum(wt ** 2 * dev.imag ** 2, axis=0) / sw2))
    else:
        se = np.sqrt(np.sum(wt ** 2 * dev ** 2, axis=0) / sw2)
    return mean, se


@dataclass
class BornReport:
    expected: np.ndarray
    frequencies: np.ndarray          # resolved trajectories only
    stderr: np.ndarray
    frequencies_all: np.ndarray      # unresolved assigned their current diagonals
    stderr_all: np.ndarray
    counts: np.ndarray
    n_resolved: int
    n_unresolved: int
    n_failed: int
    weighted: bool
    effective_sample_size: float

    @property
    def z(self) -> np.ndarray:
        return _z(self.frequencies - self.expected, self.stderr)

    @property
    def z_all(self) -> np.ndarray:
        return _z(self.frequencies_all - self.expected, self.stderr_all)

    @property
    def variants_agree(self) -> bool:
        se = np.sqrt(self.stderr ** 2 + self.stderr_all ** 2)
        return bool(np.all(np.abs(_z(self.frequencies - self.frequencies_all, se)) < 4))

    def to_dict(self) -> dict:
        f = lambda a: [float(x) for x in a]  # noqa: E731
        return {
            "expected": f(self.expected), "frequencies": f(self.frequencies), "stderr": f(self.stderr),
            "z": f(self.z), "frequencies_with_unresolved": f(self.frequencies_all),
            "stderr_with_unresolved": f(self.stderr_all), "z_with_unresolved": f(self.z_all),
            "counts": [int(c) for c in self.counts], "n_resolved": self.n_resolved,
            "n_unresolved": self.n_unresolved, "n_failed": self.n_failed,
            "weighted": self.weighted, "effective_sample_size": float(self.effective_sample_size),
            "variants_agree": self.variants_agree,
        }


_Z_FLOOR = 1e-12


def _z(diff, se):
    diff = np.asarray(diff, dtype=float)
    se = np.asarray(se, dtype=float)
    # an SE at round-off level means every sample is equal: compare the diff
    # against the same floor instead of dividing noise by noise
    with np.errstate(divide="ignore", invalid="ignore"):
        z = diff / se
    return np.where(se > _Z_FLOOR, z, np.where(np.abs(diff) <= _Z_FLOOR, 0.0, np.inf))


def estimate_born_frequencies(outcomes: Sequence[MeasurementOutcome], initial=None,
                              weighted: bool | None = None) -> BornReport:
    """Endpoint frequencies with standard errors, compared with the initial diagonals.

    Linear-engine outcomes carry their final weight; the frequency of endpoint
    ``m`` is then ``sum_i w_i 1[e_i = m] / sum_i w_i``.  Trajectories that did
    not reach an endpoint are counted separately and, in the second variant,
    contribute their final diagonals.  Failed trajectories are excluded and
    counted.
    """
    if not outcomes:
        raise ValueError("no outcomes")
    fps = {o.spec_fingerprint for o in outcomes}
    if len(fps) > 1:
        raise ValueError("outcomes come from different experiment specs")
    good = [o for o in outcomes if o.status != "failed"]
    n_failed = len(outcomes) - len(good)
    if not good:
        raise ValueError("every trajectory failed")
    dim = len(good[0].final_diagonals)
    if weighted is None:
        weighted = any(o.weight_final != 1.0 for o in good)
    w = np.array([o.weight_final if weighted else 1.0 for o in good])
    resolved = np.array([o.endpoint_index is not None for o in good])
    onehot = np.zeros((len(good), dim))
    for i, o in enumerate(good):
        if o.endpoint_index is not None:
            onehot[i, o.endpoint_index] = 1.0
    if np.any(resolved):
        f, se = weighted_mean_se(onehot[resolved], w[resolved])
    else:
        f, se = np.full(dim, np.nan), np.full(dim, np.nan)
    current = np.array([o.final_diagonals for o in good])
    y = np.where(resolved[:, None], onehot, current)
    f_all, se_all = weighted_mean_se(y, w)
    if initial is None:
        expected = np.full(dim, np.nan)
    else:
        initial = np.asarray(initial)
        expected = np.diagonal(initial).real if initial.ndim == 2 else initial.astype(float)
    return BornReport(expected, f, se, f_all, se_all, onehot.sum(axis=0).astype(int),
                      int(resolved.sum()), int((~resolved).sum()), n_failed, bool(weighted),
                      float(np.sum(w) ** 2 / np.sum(w ** 2)))


def compare_frequencies(a: BornReport, b: BornReport, with_unresolved: bool = False) -> np.ndarray:
    """Per-eigenstate z-scores of the difference between two frequency reports."""
    if with_unresolved:
        return _z(a.frequencies_all - b.frequencies_all, np.hypot(a.stderr_all, b.stderr_all))
    return _z(a.frequencies - b.frequencies, np.hypot(a.stderr, b.stderr))


@dataclass
class DecoherenceFit:
    rate: float
    stderr: float
    t_window: float
    n_points: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _log_slope(t, y, rel_err=None):
    # weighted least squares on log y; var(log y) ~ (se / y)^2
    w = np.ones_like(t) if rel_err is None else 1.0 / np.maximum(rel_err, 1e-300)
    A = np.vstack([t, np.ones_like(t)]).T * w[:, None]
    coef, *_ = np.linalg.lstsq(A, np.log(y) * w, rcond=None)
    return coef[0]


def fit_decoherence_rate(times, samples, weights=None, n_batches: int = 20,
                         min_trajectories: int = 100) -> DecoherenceFit:
    """Exponential decay rate of the ensemble-mean off-diagonal element.

    ``samples`` is ``(N, G)``: one complex series per trajectory on the grid
    ``times``.  The fit uses the leading stretch of the grid on which
    ``|mean| > 10 SE``, weighting each point of ``log |mean|`` by its inverse
    relative error; its standard error is a delete-one-group jackknife
    over ``n_batches`` contiguous groups of trajectories.
    """
    samples = np.asarray(samples)
    times = np.asarray(times, dtype=float)
    N = samples.shape[0]
    if N < min_trajectories:
        raise ValueError(f"need at least {min_trajectories} trajectories, got {N}")
    wts = None if weights is None else np.asarray(weights, dtype=float)
    mean, se = weighted_mean_se(samples, wts)
    mag = np.abs(mean)
    se_mag = np.abs(se)
    above = mag > 10.0 * se_mag
    if not above[0] or mag[0] == 0:
        raise ValueError("off-diagonal signal is below the noise floor from the start")
    n_win = int(np.argmin(above)) if not np.all(above) else len(above)
    if n_win < 2:
        raise ValueError("fit window is empty")
    t = times[:n_win]
    # weights fixed from the full sample so the jackknife sees one estimator
    rel = np.maximum(se_mag[:n_win], 1e-12 * mag[:n_win]) / mag[:n_win]
    rate = -_log_slope(t, mag[:n_win], rel)
    groups = np.array_split(np.arange(N), n_batches)
    jack = []
    for g in groups:
        keep = np.ones(N, dtype=bool)
        keep[g] = False
        m_j, _ = weighted_mean_se(samples[keep][:, :n_win], None if wts is None else wts[keep][:, :n_win])
        jack.append(-_log_slope(t, np.abs(m_j), rel))
    jack = np.array(jack)
    B = len(jack)
    stderr = float(np.sqrt((B - 1) / B * np.sum((jack - jack.mean()) ** 2)))
    return DecoherenceFit(float(rate), stderr, float(t[-1]), n_win)


@dataclass
class MartingaleReport:
    times: np.ndarray
    z: np.ndarray            # (G, dim)
    worst_z: float
    worst_index: tuple       # (time index, m)

    @property
    def passed(self) -> bool:
        return self.worst_z < 4.0

    def to_dict(self) -> dict:
        return {"worst_z": float(self.worst_z), "worst_time": float(self.times[self.worst_index[0]]),
                "worst_m": int(self.worst_index[1]), "passed": self.passed}


def check_martingale(times, diagonals, initial=None, weights=None,
                     min_trajectories: int = 100) -> MartingaleReport:
    """z-scores of ``mean p_m(t) - p_m(0)`` over the grid.

    ``diagonals`` is ``(N, G, dim)``.  ``weights`` (``(N, G)``) gives the
    importance-weighted version used for linear-engine ensembles.
    """
    diagonals = np.asarray(diagonals, dtype=float)
    if diagonals.shape[0] < min_trajectories:
        raise ValueError(f"need at least {min_trajectories} trajectories")
    mean, se = weighted_mean_se(diagonals, weights)
    p0 = mean[0] if initial is None else np.diagonal(np.asarray(initial)).real
    z = np.abs(_z(mean - p0, se))
    k = np.unravel_index(int(np.argmax(z)), z.shape)
    return MartingaleReport(np.asarray(times), z, float(z[k]), (int(k[0]), int(k[1])))


def ratio_drift(diagonals, m: int, r: int) -> np.ndarray:
    """Per-trajectory ``max_t |(p_m/p_r)(t) / (p_m/p_r)(0) - 1|`` from ``(N, G, dim)`` series."""
    d = np.asarray(diagonals, dtype=float)
    ratio = d[:, :, m] / d[:, :, r]
    return np.max(np.abs(ratio / ratio[:, :1] - 1.0), axis=1)


def diagonal_sde_residual(spec: ExperimentSpec, trajectory_index: int = 0, n_steps: int | None = None) -> np.ndarray:
    """Per-step max deviation of the simulated diagonals from their scalar SDE.

    Single observable: ``dp_m = (l_m - sum_n l_n p_n) p_m dchi``;
    projectors: ``dp_m = (dchi_m - sum_r p_r dchi_r) p_m``; ``dchi = dxi + dxi^*``.
    The trajectory is advanced by the density-matrix engine (or the state-vector
    engine when ``spec.engine`` says so) with the stream's own increments.
    """
    L = spec.engine_lindblad if spec.engine is not Engine.LINEAR_WEIGHTED else spec.lindblad
    n_steps = spec.n_steps if n_steps is None else n_steps
    stream = NoiseStream(spec.seed, trajectory_index)
    if spec.engine is Engine.STATE_VECTOR:
        state = _initial_vectors(spec, [trajectory_index])[0]
        rho = np.outer(state, state.conj())
    else:
        state = rho = np.array(spec.initial_state)
    res = np.empty(n_steps)
    for k in range(n_steps):
        p = np.diagonal(rho).real
        dxi = sample_increments(stream, len(L), spec.dt)
        chi = dxi.chi
        if spec.lindblad_mode is LindbladMode.SINGLE_OBSERVABLE:
            lv = np.asarray(spec.eigenvalues)
            pred = (lv - np.dot(lv, p)) * p * chi[0]
        else:
            pred = (chi - np.dot(p, chi)) * p
        if spec.engine is Engine.STATE_VECTOR:
            state = eng.step_state_vector(state, L, dxi, spec.dt)
            new = np.outer(state, state.conj())
        else:
            new = eng.step_density_nonlinear(rho, L, dxi, spec.dt, spec.psd_reject)
            state = new
        res[k] = np.max(np.abs(np.diagonal(new).real - p - pred))
        rho = new
    return res


def endpoint_absorption_fraction(outcomes: Sequence[MeasurementOutcome], epsilon: float, factor: float = 2.0) -> float:
    """Fraction of hit trajectories whose hit diagonal later fell below ``1 - factor * epsilon``.

    Needs outcomes from a run with ``stop_at_endpoint=False``.
    """
    vals = [o.min_after_hit for o in outcomes if o.min_after_hit is not None]
    if not vals:
        raise ValueError("no trajectories hit an endpoint (or the run stopped at endpoints)")
    return float(np.mean(np.asarray(vals) < 1.0 - factor * epsilon))


def default_initial_pure(probabilities: Sequence[float]) -> np.ndarray:
    """Pure state with real amplitudes ``sqrt(p_m)``, as a density matrix."""
    a = np.sqrt(np.asarray(probabilities, dtype=float))
    return np.outer(a, a).astype(np.complex128)

