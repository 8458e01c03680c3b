import warnings

import numpy as np
import pytest

from qdiff.engines import Engine
from qdiff.ensemble import (
    LowEffectiveSampleWarning,
    batch_means_se,
    compare_engines,
    compare_with_reference,
    convergence_report,
    effective_sample_size,
    run_ensemble,
    weighted_mean_state,
)
from qdiff.experiments import ExperimentSpec, default_initial_pure, run_measurement_trajectory, weighted_mean_se

from conftest import random_density


def spec(engine="DENSITY_NONLINEAR", **kw):
    args = dict(initial_state=default_initial_pure([0.3, 0.7]), eigenvalues=(0, 1), dt=1e-3, t_max=0.5,
                trajectories=300, seed=17, stop_at_endpoint=False)
    args.update(kw)
    return ExperimentSpec(engine, "SINGLE_OBSERVABLE", **args)


def test_single_trajectory_ensemble_matches_direct_run():
    s = spec(trajectories=1, t_max=5.0, stop_at_endpoint=True)
    res = run_ensemble(s)
    direct = run_measurement_trajectory(s, 0)
    o = res.outcomes[0]
    assert o.endpoint_index == direct.endpoint_index and o.hitting_time == direct.hitting_time
    assert np.array_equal(o.final_diagonals, direct.final_diagonals)


@pytest.mark.parametrize("engine", list(Engine))
def test_bit_exact_across_worker_counts(engine):
    s = spec(engine, trajectories=50)
    a = run_ensemble(s, workers=1, batch_size=16)
    b = run_ensemble(s, workers=3, batch_size=16)
    c = run_ensemble(s, workers=1, batch_size=16)
    for x in (b, c):
        assert np.array_equal(a.rho, x.rho) and np.array_equal(a.weight, x.weight)
        assert np.array_equal(a.mean_state, x.mean_state)
    # a different partition still gives the same samples
    d = run_ensemble(s, workers=2, bit_exact=False)
    assert np.array_equal(a.rho, d.rho)


def test_mean_state_is_a_density_matrix_within_se():
    res = run_ensemble(spec(trajectories=400))
    for m, se in zip(res.mean_state, res.mean_state_se):
        assert np.allclose(m, m.conj().T)
        assert np.isclose(np.trace(m).real, 1.0)
        assert np.linalg.eigvalsh(m)[0] > -4 * np.max(np.abs(se))
    assert len(res.outcomes) == 400


def test_weighted_mean_state_rules(rng):
    states = np.array([random_density(rng, 3) for _ in range(5)])
    assert np.allclose(weighted_mean_state(states), states.mean(axis=0))
    w = np.zeros(5)
    w[2] = 4.0
    assert np.allclose(weighted_mean_state(states, w), states[2], atol=1e-15)
    with pytest.raises(ValueError):
        weighted_mean_state(states, np.zeros(5))
    with pytest.raises(ValueError):
        weighted_mean_state(states, np.ones(4))
    m = weighted_mean_state(states, rng.uniform(size=5))
    assert np.isclose(np.trace(m).real, 1.0)


def test_effective_sample_size():
    assert effective_sample_size(np.ones(10)) == 10
    assert effective_sample_size([1.0, 0.0, 0.0]) == 1
    assert np.allclose(effective_sample_size(np.ones((4, 3))), [4, 4, 4])


def test_batch_means_agree_with_direct_se():
    res = run_ensemble(spec(trajectories=2000))
    x = res.diagonals[:, -1, 0]
    _, direct = weighted_mean_se(x)
    assert abs(batch_means_se(x) / direct - 1) < 0.2
    lin = run_ensemble(spec("LINEAR_WEIGHTED", trajectories=2000))
    x = lin.diagonals[:, -1, 0]
    w = lin.weight[:, -1]
    _, direct = weighted_mean_se(x, w)
    assert abs(batch_means_se(x, w) / direct - 1) < 0.2


def test_linear_weights_martingale_and_neff():
    res = run_ensemble(spec("LINEAR_WEIGHTED", trajectories=2000, t_max=1.0))
    ws = res.weight_stats
    assert np.all(np.abs(ws.mean - 1) < 4 * ws.stderr + 1e-12)
    assert np.all(np.diff(ws.neff) <= 0)
    assert ws.neff[0] == 2000


def test_neff_collapse_warns():
    # without stopping, collapsed trajectories keep diffusing their weights
    s = spec("LINEAR_WEIGHTED", eigenvalues=(0, 3), dt=1e-3, t_max=10.0, trajectories=200, n_record=5,
             initial_state=np.diag([0.5, 0.5]))
    with pytest.warns(LowEffectiveSampleWarning):
        run_ensemble(s)


def test_mean_state_tracks_reference():
    res = run_ensemble(spec(trajectories=1000))
    cmp = compare_with_reference(res)
    assert cmp.passed, cmp.to_dict()
    lin = run_ensemble(spec("LINEAR_WEIGHTED", trajectories=1000))
    assert compare_with_reference(lin, unnormalized=True).passed


def test_compare_engines_report():
    cmp = compare_engines(spec(trajectories=200, t_max=0.2), ["STATE_VECTOR", "DENSITY_NONLINEAR"])
    d = cmp.to_dict()
    assert "STATE_VECTOR|DENSITY_NONLINEAR" in d["pathwise"]
    assert d["pathwise"]["STATE_VECTOR|DENSITY_NONLINEAR"]["max"] < 0.2
    with pytest.raises(ValueError):
        compare_engines(spec(), ["STATE_VECTOR"])


def test_convergence_drift_free_is_exact():
    s = spec(eigenvalues=(0, 0), trajectories=50, t_max=0.2)
    rep = convergence_report(s, [0.02, 0.01])
    assert rep.status == "EXACT"


def test_convergence_trace_has_no_bias():
    s = spec(trajectories=200, t_max=0.2)
    rep = convergence_report(s, [0.02, 0.01], element=(0, 0))
    # diagonals are martingales: only sampling noise, never a resolved bias
    assert rep.status in ("INCONCLUSIVE", "EXACT")


def test_convergence_first_order():
    s = spec("STATE_VECTOR", initial_state=default_initial_pure([0.5, 0.5]), eigenvalues=(0, 1.5),
             trajectories=40000, t_max=0.48, seed=2)
    rep = convergence_report(s, [0.04, 0.02, 0.01])
    assert rep.status == "OK", rep.to_dict()
    assert 0.7 <= rep.slope <= 1.3


def test_convergence_input_checks():
    with pytest.raises(ValueError):
        convergence_report(spec(), [0.01])
    with pytest.raises(ValueError):
        convergence_report(spec(), [0.03, 0.02])
