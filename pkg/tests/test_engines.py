import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qdiff.engines import (
    Engine,
    StepError,
    StepSizeWarning,
    WeightUnderflowError,
    _sv_parts,
    check_step_size,
    density_increment,
    iterate_trajectory,
    normalize,
    step_density_nonlinear,
    step_linear,
    step_propagator,
    step_state_vector,
    trace_to_jsonl,
    weighted_step_differential,
)
from qdiff.noise import NoiseStream
from qdiff.operators import LindbladSet, UnnormalizedState, build_observable, build_projector_set

from conftest import random_density, random_operator


def _random_setup(seed, d, m, diagonal):
    rng = np.random.default_rng(seed)
    if diagonal:
        ops = [np.diag(rng.normal(size=d)) + 0j for _ in range(m)]
    else:
        ops = [0.5 * random_operator(rng, d) for _ in range(m)]
    L = LindbladSet.from_list(ops)
    psi = rng.normal(size=d) + 1j * rng.normal(size=d)
    psi /= np.linalg.norm(psi)
    dxi = 0.03 * (rng.normal(size=m) + 1j * rng.normal(size=m))
    return L, psi, dxi, rng


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 4), st.integers(1, 3), st.booleans())
def test_density_increment_is_ito_product_of_state_increment(seed, d, m, diagonal):
    # d(psi psi^+) = dpsi psi^+ + psi dpsi^+ + E[dpsi dpsi^+] reproduces the density equation
    L, psi, dxi, _ = _random_setup(seed, d, m, diagonal)
    dt = 1e-3
    drift, noise = _sv_parts(psi, L, dxi, dt)
    dpsi = drift + noise
    rho = np.outer(psi, psi.conj())
    ito = np.zeros((d, d), complex)
    for o in L:
        ell = psi.conj() @ o @ psi
        v = (o - ell * np.eye(d)) @ psi
        ito += 2 * dt * np.outer(v, v.conj())
    expected = np.outer(dpsi, psi.conj()) + np.outer(psi, dpsi.conj()) + ito
    assert np.allclose(density_increment(rho, L, dxi, dt), expected, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 4), st.integers(1, 3), st.booleans())
def test_weighted_differential_equals_nonlinear_increment(seed, d, m, diagonal):
    L, _, dxi, rng = _random_setup(seed, d, m, diagonal)
    rho = random_density(rng, d)
    w = float(rng.uniform(0.2, 3.0))
    s0 = UnnormalizedState.from_density(rho, w)
    s1 = step_linear(s0, L, dxi, 1e-3)
    diff = weighted_step_differential(s0, s1)
    assert np.allclose(diff, density_increment(rho, L, dxi, 1e-3), atol=1e-13)


def test_diagonal_fast_path_matches_general_path(rng):
    L = build_observable([0.2, -0.7, 1.1])
    # same operator with a zero off-diagonal perturbation flag: force the matrix path
    Lg = LindbladSet(L.operators + np.array([[0, 1e-300, 0], [0, 0, 0], [0, 0, 0]]))
    assert Lg.diagonals is None
    rho = random_density(rng, 3)
    dxi = np.array([0.02 - 0.01j])
    assert np.allclose(density_increment(rho, L, dxi, 1e-3), density_increment(rho, Lg, dxi, 1e-3), atol=1e-15)
    s = UnnormalizedState.from_density(rho, 1.3)
    a = step_linear(s, L, dxi, 1e-3)
    b = step_linear(s, Lg, dxi, 1e-3)
    assert np.allclose(a.R, b.R, atol=1e-15) and np.isclose(a.w, b.w)
    psi = np.array([0.6, 0.0, 0.8j])
    assert np.allclose(step_state_vector(psi, L, dxi, 1e-3), step_state_vector(psi, Lg, dxi, 1e-3))


def test_state_vector_norm_gain_is_squared_drift():
    # average over a four-point cubature with E dxi = E dxi^2 = 0, E|dxi|^2 = 2 dt
    L = LindbladSet(np.array([[0.3, 0.5], [0.1j, -0.4]]))
    psi = np.array([0.6, 0.8j])
    dt = 1e-2
    c = np.sqrt(2 * dt)
    norms = [np.linalg.norm(step_state_vector(psi, L, [c * u], dt, renormalize=False)) ** 2
             for u in (1, 1j, -1, -1j)]
    drift, _ = _sv_parts(psi, L, np.zeros(1), dt)
    assert np.isclose(np.mean(norms), 1 + np.linalg.norm(drift) ** 2, rtol=0, atol=1e-14)


def test_density_step_keeps_invariants(rng):
    L = build_projector_set(3)
    rho = random_density(rng, 3)
    new = step_density_nonlinear(rho, L, 0.01 * (rng.normal(size=3) + 1j * rng.normal(size=3)), 1e-3)
    assert np.isclose(np.trace(new).real, 1, atol=1e-14)
    assert np.allclose(new, new.conj().T)
    assert np.linalg.eigvalsh(new)[0] > -1e-8


def test_density_step_rejects_broken_state():
    L = build_observable([0.0, 1.0])
    rho = np.diag([0.5, 0.5]).astype(complex)
    with pytest.raises(StepError):
        step_density_nonlinear(rho, L, [5.0], 1e-3)


def test_linear_weight_is_trace_and_drift_is_traceless(rng):
    L = LindbladSet.from_list([random_operator(rng, 3) * 0.3 for _ in range(2)])
    rho = random_density(rng, 3)
    s = UnnormalizedState.from_density(rho, 2.0)
    new = step_linear(s, L, [0.0, 0.0], 1e-3)
    assert np.isclose(new.w, 2.0, rtol=0, atol=1e-14)
    new = step_linear(s, L, [0.01, -0.02j], 1e-3)
    assert np.isclose(new.w, np.trace(new.R).real)
    assert np.allclose(normalize(new) * new.w, new.R)


def test_weight_underflow_raises():
    L = build_observable([0.0, 1.0])
    s = UnnormalizedState.from_density(np.diag([0.0, 1.0]), 1e-12)
    with pytest.raises(WeightUnderflowError):
        step_linear(s, L, [-0.2], 1e-3)


def test_propagator_reproduces_linear_step_up_to_ito_term(rng):
    L = LindbladSet.from_list([random_operator(rng, 2) * 0.4 for _ in range(2)])
    rho = random_density(rng, 2)
    dxi = np.array([0.03 + 0.01j, -0.02j])
    dt = 1e-3
    M1 = step_propagator(np.eye(2), L, dxi, dt)
    G = M1 - np.eye(2)
    lin = step_linear(UnnormalizedState.from_density(rho), L, dxi, dt)
    ito = sum(2 * dt * o @ rho @ o.conj().T for o in L)
    assert np.allclose(M1 @ rho @ M1.conj().T, lin.R + G @ rho @ G.conj().T - ito, atol=1e-15)


def test_step_size_guard():
    L = build_observable([0.0, 10.0])
    with pytest.raises(ValueError):
        check_step_size(L, 0.01)
    with pytest.warns(StepSizeWarning):
        check_step_size(L, 0.002)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        check_step_size(L, 1e-4)


def test_shape_errors():
    L = build_observable([0.0, 1.0])
    with pytest.raises(ValueError):
        step_state_vector(np.ones(3) / np.sqrt(3), L, [0.0], 1e-3)
    with pytest.raises(ValueError):
        step_density_nonlinear(np.eye(2) / 2, L, [0.0, 0.0], 1e-3)


def test_iterate_trajectory_and_jsonl(tmp_path):
    L = build_observable([0.0, 1.0])
    psi = np.array([0.6, 0.8])
    recs = list(iterate_trajectory(Engine.STATE_VECTOR, psi, L, NoiseStream(3), 1e-3, 5))
    assert len(recs) == 6 and recs[0].increments is None
    assert recs[-1].time == pytest.approx(5e-3)
    # the density engine fed the same stream tracks the state vector closely
    drecs = list(iterate_trajectory(Engine.DENSITY_NONLINEAR, np.outer(psi, psi), L, NoiseStream(3), 1e-3, 5))
    sv = recs[-1].state
    assert np.allclose(drecs[-1].state, np.outer(sv, sv.conj()), atol=1e-2)
    lrecs = list(iterate_trajectory(Engine.LINEAR_WEIGHTED, UnnormalizedState.from_density(np.outer(psi, psi)),
                                    L, NoiseStream(3), 1e-3, 5))
    assert lrecs[-1].weight == pytest.approx(np.trace(lrecs[-1].state).real)
    n = trace_to_jsonl(lrecs, tmp_path / "t.jsonl")
    lines = (tmp_path / "t.jsonl").read_text().splitlines()
    assert n == 6 and json.loads(lines[2])["increments"]["dt"] == 1e-3
