import numpy as np
import pytest

from qdiff.lindblad import (
    closed_form_offdiagonal,
    evolve_euler,
    evolve_mean,
    lindblad_generator,
    to_standard_convention,
)
from qdiff.operators import DimensionError, LindbladSet, build_observable, build_projector_set

from conftest import random_density, random_operator


def test_generator_is_traceless_and_hermiticity_preserving(rng):
    L = LindbladSet.from_list([random_operator(rng, 3) for _ in range(2)])
    rho = random_density(rng, 3)
    g = lindblad_generator(rho, L)
    assert abs(np.trace(g)) < 1e-12
    assert np.allclose(g, g.conj().T)


def test_standard_convention_equivalence(rng):
    L = LindbladSet.from_list([random_operator(rng, 2)])
    rho = random_density(rng, 2)
    S = to_standard_convention(L)[0]
    std = S @ rho @ S.conj().T - 0.5 * (S.conj().T @ S @ rho + rho @ S.conj().T @ S)
    assert np.allclose(lindblad_generator(rho, L), std)


def test_observable_dephasing_matches_closed_form():
    lv = (0.0, 1.0, 2.5)
    L = build_observable(lv)
    psi = np.ones(3) / np.sqrt(3)
    rho0 = np.outer(psi, psi).astype(complex)
    res = evolve_mean(rho0, L, 2.0, 400)
    final = res.states[-1]
    for m in range(3):
        assert np.isclose(final[m, m].real, 1 / 3)
        for n in range(3):
            if m != n:
                assert np.isclose(final[m, n], closed_form_offdiagonal(rho0[m, n], lv[m], lv[n], 2.0), atol=1e-9)


def test_projector_dephasing_rate_is_two():
    L = build_projector_set(2)
    rho0 = np.full((2, 2), 0.5, dtype=complex)
    res = evolve_mean(rho0, L, 1.0, 200)
    assert np.isclose(res.at(1.0)[0, 1].real, 0.5 * np.exp(-2.0), atol=1e-9)


def test_amplitude_damping():
    sm = np.array([[0, 1], [0, 0]], dtype=complex)  # |0><1|
    L = LindbladSet(sm)
    res = evolve_mean(np.diag([0.0, 1.0]).astype(complex), L, 1.5, 300)
    assert np.isclose(res.states[-1][1, 1].real, np.exp(-2 * 1.5), atol=1e-9)


def test_euler_bias_is_first_order():
    L = build_observable([0.0, 1.0])
    rho0 = np.full((2, 2), 0.5, dtype=complex)
    exact = 0.5 * np.exp(-1.0)
    e1 = abs(evolve_euler(rho0, L, 1e-2, 100)[0, 1] - exact)
    e2 = abs(evolve_euler(rho0, L, 5e-3, 200)[0, 1] - exact)
    assert 1.9 < e1 / e2 < 2.1
    # forward Euler has the closed form (1 - dt)^n for this element
    assert np.isclose(evolve_euler(rho0, L, 1e-2, 100)[0, 1], 0.5 * 0.99 ** 100)


def test_record_every_and_errors():
    L = build_observable([0.0, 1.0])
    res = evolve_mean(np.eye(2) / 2, L, 1.0, 100, record_every=10)
    assert len(res.times) == 11 and np.isclose(res.times[-1], 1.0)
    with pytest.raises(DimensionError):
        evolve_mean(np.eye(3) / 3, L, 1.0, 10)
    with pytest.raises(ValueError):
        evolve_mean(np.eye(2) / 2, L, 0.0, 10)
