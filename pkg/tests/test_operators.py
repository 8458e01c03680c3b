import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qdiff.operators import (
    DimensionError,
    LindbladSet,
    StateError,
    UnnormalizedState,
    as_state_vector,
    basis_state,
    build_observable,
    build_projector_set,
    check_density_matrix,
    expectation,
    hermitize,
    is_hermitian,
    operator_from_json,
    operator_to_json,
    pure_density,
    pure_from_density,
)

from conftest import random_density, random_operator


def test_pure_density_is_rank_one_projector():
    rho = pure_density([1, 1j])
    assert np.allclose(rho, [[0.5, -0.5j], [0.5j, 0.5]])
    assert np.allclose(rho @ rho, rho)
    assert not rho.flags.writeable


def test_check_density_matrix_rejects_bad_states():
    with pytest.raises(StateError, match="Hermitian"):
        check_density_matrix([[0.5, 0.1], [0.2, 0.5]])
    with pytest.raises(StateError, match="trace"):
        check_density_matrix(np.diag([0.5, 0.6]))
    with pytest.raises(StateError, match="negative"):
        check_density_matrix(np.diag([1.2, -0.2]))
    with pytest.raises(DimensionError):
        check_density_matrix(np.ones((2, 3)))


def test_state_vector_normalization():
    with pytest.raises(StateError):
        as_state_vector([1.0, 1.0])
    psi = as_state_vector([3.0, 4.0], normalize=True)
    assert np.isclose(np.vdot(psi, psi).real, 1.0)
    with pytest.raises(StateError):
        as_state_vector([0.0, 0.0], normalize=True)


def test_pure_from_density_roundtrip(rng):
    psi = rng.normal(size=3) + 1j * rng.normal(size=3)
    psi /= np.linalg.norm(psi)
    back = pure_from_density(np.outer(psi, psi.conj()))
    assert np.allclose(np.outer(back, back.conj()), np.outer(psi, psi.conj()))
    with pytest.raises(StateError):
        pure_from_density(np.eye(2) / 2)


def test_expectation_matches_trace(rng):
    rho = random_density(rng, 4)
    A = random_operator(rng, 4)
    assert np.isclose(expectation(A, rho), np.trace(A @ rho))
    with pytest.raises(DimensionError):
        expectation(np.eye(2), rho)


def test_lindblad_set_properties(rng):
    ops = [random_operator(rng, 3) for _ in range(2)]
    L = LindbladSet.from_list(ops)
    assert len(L) == 2 and L.dim == 3
    K = sum(o.conj().T @ o for o in ops)
    assert np.allclose(L.K, K)
    assert L.diagonals is None
    with pytest.raises(DimensionError):
        LindbladSet.from_list([np.eye(2), np.eye(3)])
    with pytest.raises(DimensionError):
        LindbladSet.from_list([])


def test_observable_and_projectors():
    L = build_observable([0, 1, 3])
    assert np.allclose(L.diagonals, [[0, 1, 3]])
    assert L.is_hermitian
    P = build_projector_set(3)
    assert np.allclose(sum(P), np.eye(3))
    assert np.allclose(P.K, np.eye(3))
    with pytest.raises(ValueError):
        build_projector_set(1)
    with pytest.raises(ValueError):
        build_observable([])


def test_centered_shifts_trace_only():
    L = build_observable([1.0, 2.0])
    C = L.centered()
    assert np.allclose(C.diagonals, [[-0.5, 0.5]])
    # non-Hermitian operators are left alone
    a = np.array([[0, 1], [0, 0]], dtype=complex)
    assert np.allclose(LindbladSet(a).centered()[0], a)


def test_unnormalized_state_check():
    s = UnnormalizedState.from_density(np.diag([0.3, 0.7]), 2.0)
    s.check()
    assert np.isclose(np.trace(s.R).real, 2.0)
    with pytest.raises(StateError):
        UnnormalizedState(np.diag([0.3, 0.7]), 2.0).check()
    with pytest.raises(StateError):
        UnnormalizedState(np.zeros((2, 2)), 0.0).check()


def test_json_roundtrip(rng):
    A = random_operator(rng, 3)
    assert np.array_equal(operator_from_json(operator_to_json(A)), A)
    v = basis_state(3, 1)
    assert np.array_equal(operator_from_json(operator_to_json(v)), v)
    with pytest.raises(DimensionError):
        operator_from_json({"dim": 3, "re": [[1, 0], [0, 1]]})
    with pytest.raises(StateError):
        operator_from_json({"re": [[1]]})


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_hermitize_is_idempotent_projection(d, seed):
    A = random_operator(np.random.default_rng(seed), d)
    H = hermitize(A)
    assert is_hermitian(H)
    assert np.allclose(hermitize(H), H)
    assert np.allclose(H + hermitize(1j * A) * -1j, A)
