"""Monte Carlo orchestration: scheduling, weighted statistics, oracle checks.

Trajectories are cut into fixed batches by index and each batch is
integrated independently (optionally in worker processes).  Because each
trajectory owns its noise stream and the kernels act row by row, the
concatenated samples do not depend on the batching; all reductions are then
done once over the full, index-ordered sample array, so the summation order
never depends on scheduling either.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .engines import Engine
from .experiments import (
    BornReport,
    ExperimentSpec,
    MeasurementOutcome,
    compare_frequencies,
    estimate_born_frequencies,
    simulate_batch,
    weighted_mean_se,
)
from .lindblad import evolve_euler, evolve_mean
from .operators import hermitize

BATCH_SIZE = 2048
NEFF_WARN_FRACTION = 0.01


class EnsembleWarning(UserWarning):
    pass


class LowEffectiveSampleWarning(EnsembleWarning):
    """The linear-engine weights have degenerated (Neff < 1% of N)."""


@dataclass
class WeightStats:
    mean: np.ndarray
    variance: np.ndarray
    stderr: np.ndarray
    neff: np.ndarray

    def to_dict(self) -> dict:
        f = lambda a: [float(x) for x in a]  # noqa: E731
        return {"mean": f(self.mean), "variance": f(self.variance), "stderr": f(self.stderr),
                "neff": f(self.neff), "neff_final": float(self.neff[-1]),
                "neff_non_increasing": bool(np.all(np.diff(self.neff) <= 1e-9 * self.neff[:-1]))}


@dataclass
class EnsembleResult:
    """Samples and summaries of one ensemble run.

    ``rho``, ``weight`` and ``norm2`` hold every trajectory on the record
    grid, ordered by trajectory index.  ``mean_state`` is the weighted mean of
    the normalized states for the linear engine and the plain mean otherwise.
    """

    spec: ExperimentSpec
    outcomes: list
    times: np.ndarray
    rho: np.ndarray
    weight: np.ndarray
    norm2: np.ndarray
    mean_state: np.ndarray
    mean_state_se: np.ndarray
    weight_stats: WeightStats | None
    repair_mean: np.ndarray
    repair_max: np.ndarray
    min_eig: np.ndarray
    compensator: np.ndarray
    failures: list = field(default_factory=list)

    @property
    def weighted(self) -> bool:
        return self.spec.engine is Engine.LINEAR_WEIGHTED

    @property
    def diagonals(self) -> np.ndarray:
        return np.diagonal(self.rho, axis1=-2, axis2=-1).real

    def sample_weights(self) -> np.ndarray | None:
        return self.weight if self.weighted else None

    def born(self) -> BornReport:
        return estimate_born_frequencies(self.outcomes, self.spec.initial_state, weighted=self.weighted)

    def mean_unnormalized(self):
        """Unweighted mean of ``R = w rho`` (linear engine) with its SE."""
        R = self.rho * self.weight[..., None, None]
        return weighted_mean_se(R)


def _batches(n: int, size: int) -> list[range]:
    return [range(a, min(a + size, n)) for a in range(0, n, size)]


def _run_batch(args):
    spec, idx = args
    return simulate_batch(spec, idx)


def resolve_workers(workers) -> int:
    if workers in (None, "AUTO", "auto"):
        return max(1, os.cpu_count() or 1)
    w = int(workers)
    if w < 1:
        raise ValueError("workers must be >= 1")
    return w


def run_ensemble(spec: ExperimentSpec, workers=1, bit_exact: bool = True,
                 batch_size: int = BATCH_SIZE) -> EnsembleResult:
    """Integrate trajectories ``0 .. N-1`` of ``spec`` and aggregate them.

    Parameters
    ----------
    workers : int or "AUTO"
        Number of worker processes; 1 runs in-process.
    bit_exact : bool
        Use the fixed ``batch_size`` partition.  Otherwise the trajectories are
        split evenly over the workers.  Either way the statistics are reduced
        over the index-ordered samples.

    Failed or dead trajectories do not abort the run; they are listed in
    ``failures`` and excluded from frequency estimates.
    """
    workers = resolve_workers(workers)
    N = spec.trajectories
    size = batch_size if bit_exact else max(1, -(-N // workers))
    jobs = [(spec, list(r)) for r in _batches(N, size)]
    if workers == 1 or len(jobs) == 1:
        parts = [_run_batch(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            parts = list(pool.map(_run_batch, jobs))
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
    outcomes = [o for p in parts for o in p.outcomes]
    rho, weight = cat("rho"), cat("weight")
    failures = [(o.trajectory_index, o.status, o.message) for o in outcomes if o.status != "ok"]

    wstats = None
    if spec.engine is Engine.LINEAR_WEIGHTED:
        wstats = weight_statistics(weight)
        if wstats.neff[-1] < NEFF_WARN_FRACTION * N:
            warnings.warn(f"effective sample size {wstats.neff[-1]:.1f} is below "
                          f"{NEFF_WARN_FRACTION:.0%} of {N} trajectories", LowEffectiveSampleWarning,
                          stacklevel=2)
        mean, se = weighted_mean_se(rho, weight)
    else:
        mean, se = weighted_mean_se(rho)
    return EnsembleResult(spec, outcomes, spec.times, rho, weight, cat("norm2"), hermitize(mean), se,
                          wstats, cat("repair_mean"), cat("repair_max"), cat("min_eig"),
                          cat("compensator"), failures)


# -- estimators --------------------------------------------------------------------

def weighted_mean_state(states, weights=None) -> np.ndarray:
    """``sum_i w_i rho_i / sum_i w_i``, re-symmetrized.

    Raises
    ------
    ValueError
        On length mismatch, negative weights or an all-zero weight vector.
    """
    states = np.asarray(states, dtype=np.complex128)
    if weights is None:
        weights = np.ones(len(states))
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(states),):
        raise ValueError(f"{len(weights)} weights for {len(states)} states")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite and non-negative")
    sw = weights.sum()
    if sw <= 0:
        raise ValueError("all weights are zero")
    return hermitize(np.tensordot(weights, states, axes=(0, 0)) / sw)


def effective_sample_size(weights, axis: int = 0):
    """``(sum w)^2 / sum w^2``."""
    w = np.asarray(weights, dtype=float)
    return np.sum(w, axis=axis) ** 2 / np.sum(w ** 2, axis=axis)


def weight_statistics(weight: np.ndarray) -> WeightStats:
    """Per-time mean, variance, SE of the mean and Neff of ``(N, G)`` weights."""
    N = weight.shape[0]
    mean = weight.mean(axis=0)
    var = weight.var(axis=0, ddof=1) if N > 1 else np.zeros(weight.shape[1])
    return WeightStats(mean, var, np.sqrt(var / N), effective_sample_size(weight))


def batch_means_se(values, weights=None, n_batches: int = 100):
    """Standard error of the (weighted) mean from ``n_batches`` contiguous batch means."""
    x = np.asarray(values)
    N = x.shape[0]
    if N < 2 * n_batches:
        raise ValueError(f"need at least {2 * n_batches} samples for {n_batches} batches")
    w = np.ones(N) if weights is None else np.asarray(weights, dtype=float)
    means = []
    for g in np.array_split(np.arange(N), n_batches):
        m, _ = weighted_mean_se(x[g], w[g])
        means.append(m)
    means = np.array(means)
    if np.iscomplexobj(means):
        return (np.std(means.real, axis=0, ddof=1) + 1j * np.std(means.imag, axis=0, ddof=1)) / np.sqrt(n_batches)
    return np.std(means, axis=0, ddof=1) / np.sqrt(n_batches)


# -- oracle comparisons -------------------------------------------------------------

@dataclass
class OracleComparison:
    """Mean-state deviation from the master-equation solution on the record grid.

    ``allowance = 4 SE + |Euler - RK4| + stop_slack``: the Euler-Maruyama mean
    equals the forward-Euler iterate, so its deterministic bias is known
    exactly; ``stop_slack`` covers trajectories frozen at an endpoint.
    """

    times: np.ndarray
    deviation: np.ndarray   # (G, d, d) |mean - reference|, real and imaginary parts combined
    allowance: np.ndarray
    bias: np.ndarray
    max_ratio: float

    @property
    def passed(self) -> bool:
        return self.max_ratio < 1.0

    def to_dict(self) -> dict:
        return {"max_deviation": float(self.deviation.max()), "max_bias": float(self.bias.max()),
                "max_ratio": self.max_ratio, "passed": self.passed}


def _stop_slack(res: EnsembleResult) -> float:
    if not res.spec.stop_at_endpoint:
        return 0.0
    stopped = np.mean([o.endpoint_index is not None for o in res.outcomes])
    return float(np.sqrt(res.spec.epsilon_endpoint) * stopped)


def compare_with_reference(res: EnsembleResult, unnormalized: bool = False) -> OracleComparison:
    """Check the ensemble mean against RK4 with the first-order allowance.

    ``unnormalized=True`` uses the plain mean of ``R`` (linear engine).
    """
    spec = res.spec
    L = spec.lindblad
    steps = spec.record_steps
    ref = evolve_mean(spec.initial_state, L, spec.t_max, spec.n_steps)
    ref_g = ref.states[steps]
    euler = [spec.initial_state]
    cur = np.array(spec.initial_state)
    for a, b in zip(steps[:-1], steps[1:]):
        cur = evolve_euler(cur, L, spec.dt, int(b - a))
        euler.append(cur)
    bias = np.abs(np.array(euler) - ref_g)
    if unnormalized:
        mean, se = res.mean_unnormalized()
    else:
        mean, se = res.mean_state, res.mean_state_se
    dev = np.abs(mean.real - ref_g.real) + np.abs(mean.imag - ref_g.imag)
    allowance = 4.0 * (se.real + se.imag) + bias + _stop_slack(res) + 1e-12
    return OracleComparison(spec.times, dev, allowance, bias, float(np.max(dev / allowance)))


def pathwise_distance(a: EnsembleResult, b: EnsembleResult) -> np.ndarray:
    """Per-trajectory max over the grid of the max-abs entry of ``rho_a - rho_b``."""
    if a.rho.shape != b.rho.shape:
        raise ValueError("ensembles differ in shape")
    return np.max(np.abs(a.rho - b.rho), axis=(1, 2, 3))


@dataclass
class EngineComparison:
    results: dict
    born: dict
    pairwise_z: dict          # "A|B" -> per-eigenstate z
    pairwise_z_all: dict
    mean_distance: dict       # engine -> OracleComparison
    pathwise: dict            # "A|B" -> summary of per-trajectory distances

    @property
    def max_abs_z(self) -> float:
        vals = [np.max(np.abs(z)) for z in self.pairwise_z.values()]
        return float(max(vals)) if vals else 0.0

    def to_dict(self) -> dict:
        return {
            "born": {k: v.to_dict() for k, v in self.born.items()},
            "pairwise_z": {k: [float(x) for x in v] for k, v in self.pairwise_z.items()},
            "pairwise_z_with_unresolved": {k: [float(x) for x in v] for k, v in self.pairwise_z_all.items()},
            "max_abs_z": self.max_abs_z,
            "mean_state_vs_reference": {k: v.to_dict() for k, v in self.mean_distance.items()},
            "pathwise": self.pathwise,
            "weights": {k: r.weight_stats.to_dict() for k, r in self.results.items() if r.weight_stats},
        }


def compare_engines(spec: ExperimentSpec, engines: Sequence, workers=1, bit_exact: bool = True,
                    batch_size: int = BATCH_SIZE) -> EngineComparison:
    """Run ``spec`` under each engine with the same seed and compare them.

    Nonlinear engines driven by the same streams are also compared path by
    path (this needs a pure initial state so both start from the same ray).
    """
    engines = [Engine(e) for e in engines]
    if len(engines) < 2:
        raise ValueError("need at least two engines to compare")
    results = {e.value: run_ensemble(spec.replace(engine=e), workers, bit_exact, batch_size) for e in engines}
    return compare_results(results)


def compare_results(results: dict) -> EngineComparison:
    """Pairwise comparison of ensembles that share a spec apart from the engine."""
    born = {k: r.born() for k, r in results.items()}
    keys = list(results)
    pz, pz_all, path = {}, {}, {}
    nonlinear_names = {Engine.STATE_VECTOR.value, Engine.DENSITY_NONLINEAR.value}
    for i, a in enumerate(keys):
        for b in keys[i + 1:]:
            pz[f"{a}|{b}"] = compare_frequencies(born[a], born[b])
            pz_all[f"{a}|{b}"] = compare_frequencies(born[a], born[b], with_unresolved=True)
            ea, eb = results[a].spec.engine.value, results[b].spec.engine.value
            if {ea, eb} <= nonlinear_names or ea == eb:
                d = pathwise_distance(results[a], results[b])
                path[f"{a}|{b}"] = {"max": float(d.max()), "mean": float(d.mean()),
                                    "median": float(np.median(d))}
    dist = {k: compare_with_reference(r) for k, r in results.items()}
    return EngineComparison(results, born, pz, pz_all, dist, path)


# -- discretization study -----------------------------------------------------------

@dataclass
class ConvergenceReport:
    dts: np.ndarray
    element: tuple
    bias: np.ndarray        # |mean - reference| of the tracked element at t_max, per dt
    stderr: np.ndarray
    richardson: np.ndarray  # |mean(dt_k) - mean(dt_k+1)| on shared paths
    richardson_se: np.ndarray
    slope: float | None
    status: str             # OK | FAIL | INCONCLUSIVE | EXACT

    def to_dict(self) -> dict:
        f = lambda a: [float(x) for x in a]  # noqa: E731
        return {"dt": f(self.dts), "element": list(self.element), "bias": f(self.bias),
                "stderr": f(self.stderr), "richardson": f(self.richardson),
                "richardson_stderr": f(self.richardson_se), "slope": self.slope, "status": self.status}


def _default_element(rho0) -> tuple:
    d = rho0.shape[0]
    off = np.abs(rho0 * (1.0 - np.eye(d)))
    if off.max() > 0:
        i, j = np.unravel_index(int(np.argmax(off)), off.shape)
        return int(i), int(j)
    return 0, 0


def convergence_report(spec: ExperimentSpec, dt_list: Sequence[float], element=None, workers=1,
                       slope_range=(0.7, 1.3), z_min: float = 3.0) -> ConvergenceReport:
    """Weak-order check of one mean-state element at ``t_max`` against RK4.

    All runs share one Brownian path per trajectory: the coarse step ``dt``
    sums ``dt / dt_min`` increments of the finest stream.  With three or more
    step sizes the order is fitted to the differences between successive
    estimates, whose paired standard errors are far smaller than those of the
    bias itself; otherwise to the bias against RK4.  Either fit needs every
    point above ``z_min`` standard errors, else the report is INCONCLUSIVE.  When the reference and every
    estimate agree to round-off (no drift at all) the status is EXACT.
    ``element`` defaults to the largest initial coherence, else ``(0, 0)``.
    """
    dts = np.asarray(sorted(dt_list, reverse=True), dtype=float)
    if len(dts) < 2 or len(set(dts)) != len(dts):
        raise ValueError("need at least two distinct step sizes")
    fine = dts[-1]
    ratios = dts / fine
    if np.any(np.abs(ratios - np.round(ratios)) > 1e-9):
        raise ValueError("every dt must be an integer multiple of the smallest")
    i, j = _default_element(spec.initial_state) if element is None else element
    ref = evolve_mean(spec.initial_state, spec.lindblad, spec.t_max, max(1000, int(round(spec.t_max / fine))))
    target = ref.states[-1][i, j]
    finals = []
    for dt, r in zip(dts, np.round(ratios).astype(int)):
        s = spec.replace(dt=float(dt), noise_substeps=int(r), n_record=1, stop_at_endpoint=False)
        res = run_ensemble(s, workers)
        x = res.rho[:, -1, i, j]
        if res.weighted:
            x = x * res.weight[:, -1]  # plain mean of R is the unbiased estimator
        finals.append(x)
    N = len(finals[0])
    bias, se = [], []
    for x in finals:
        m = x.mean()
        bias.append(abs(m - target))
        se.append(np.hypot(x.real.std(), x.imag.std()) / np.sqrt(N))
    rich, rich_se = [], []
    for a, b in zip(finals[:-1], finals[1:]):
        d = a - b
        rich.append(abs(d.mean()))
        rich_se.append(np.hypot(d.real.std(), d.imag.std()) / np.sqrt(N))
    bias, se = np.array(bias), np.array(se)
    rich, rich_se = np.array(rich), np.array(rich_se)
    if np.all(bias < 1e-12) and np.all(rich < 1e-12):
        return ConvergenceReport(dts, (i, j), bias, se, rich, rich_se, None, "EXACT")
    if len(dts) >= 3 and np.all(rich > z_min * rich_se):
        # differences of successive estimates on shared paths: the common
        # sampling error cancels, and for a first-order scheme they scale like dt
        slope = float(np.polyfit(np.log(dts[:-1]), np.log(rich), 1)[0])
    elif np.all(bias > z_min * se):
        slope = float(np.polyfit(np.log(dts), np.log(bias), 1)[0])
    else:
        return ConvergenceReport(dts, (i, j), bias, se, rich, rich_se, None, "INCONCLUSIVE")
    ok = slope_range[0] <= slope <= slope_range[1]
    return ConvergenceReport(dts, (i, j), bias, se, rich, rich_se, slope, "OK" if ok else "FAIL")


def summarize_outcomes(outcomes: Sequence[MeasurementOutcome]) -> dict:
    status = [o.status for o in outcomes]
    return {"n": len(outcomes), "ok": status.count("ok"), "dead": status.count("dead"),
            "failed": status.count("failed")}


__all__ = [
    "EnsembleResult", "WeightStats", "run_ensemble", "weighted_mean_state", "effective_sample_size",
    "weight_statistics", "batch_means_se", "compare_with_reference", "pathwise_distance",
    "compare_engines", "compare_results", "EngineComparison", "convergence_report", "ConvergenceReport",
    "LowEffectiveSampleWarning", "resolve_workers",
]
