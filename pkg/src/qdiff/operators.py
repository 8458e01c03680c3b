"""Dense operators, state vectors and density matrices.

Everything here is a plain complex128 ``numpy`` array; the helpers only
construct, validate and serialize them.  Arrays handed out by the
constructors are marked read-only so they can be shared between workers.

The computational basis is the eigenbasis of the measured observable.
Operators given in any other basis must be diagonalized by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

TOL_HERM = 1e-10
TOL_TRACE = 1e-10
TOL_NORM = 1e-10
TOL_PSD = 1e-8


class DimensionError(ValueError):
    """Operands have incompatible Hilbert-space dimensions."""


class StateError(ValueError):
    """A state or operator violates one of its invariants."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.complex128, copy=True)
    a.flags.writeable = False
    return a


def as_operator(a) -> np.ndarray:
    """Validate a square, finite complex matrix and return a read-only copy."""
    a = np.asarray(a, dtype=np.complex128)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise DimensionError(f"operator must be a non-empty square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise StateError("operator has non-finite entries")
    return _frozen(a)


def dagger(a: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(a, -1, -2))


def is_hermitian(a: np.ndarray, tol: float = TOL_HERM) -> bool:
    a = np.asarray(a)
    return bool(np.max(np.abs(a - dagger(a)), initial=0.0) <= tol)


def hermitize(a: np.ndarray) -> np.ndarray:
    """Return ``(a + a^dagger) / 2``; works on stacks of matrices."""
    return 0.5 * (a + dagger(a))


def as_state_vector(psi, normalize: bool = False) -> np.ndarray:
    psi = np.asarray(psi, dtype=np.complex128)
    if psi.ndim != 1 or psi.size < 1:
        raise DimensionError(f"state vector must be 1-D, got shape {psi.shape}")
    if not np.all(np.isfinite(psi)):
        raise StateError("state vector has non-finite entries")
    n2 = float(np.vdot(psi, psi).real)
    if normalize:
        if n2 == 0.0:
            raise StateError("cannot normalize the zero vector")
        psi = psi / np.sqrt(n2)
    elif abs(n2 - 1.0) > TOL_NORM:
        raise StateError(f"state vector is not normalized (|psi|^2 = {n2!r})")
    return _frozen(psi)


def pure_density(psi) -> np.ndarray:
    """``|psi><psi|`` for a (normalized) state vector."""
    psi = as_state_vector(psi, normalize=True)
    return _frozen(np.outer(psi, psi.conj()))


def basis_state(dim: int, index: int) -> np.ndarray:
    psi = np.zeros(dim, dtype=np.complex128)
    psi[index] = 1.0
    return _frozen(psi)


def min_eigenvalue(rho: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(hermitize(np.asarray(rho)))[0])


def check_density_matrix(rho, tol_herm: float = TOL_HERM, tol_trace: float = TOL_TRACE,
                         tol_psd: float = TOL_PSD) -> np.ndarray:
    """Validate ``rho`` as a density matrix and return a read-only copy.

    Raises
    ------
    StateError
        If ``rho`` is not Hermitian, not unit trace, or has an eigenvalue
        below ``-tol_psd``.
    """
    rho = as_operator(rho)
    if not is_hermitian(rho, tol_herm):
        raise StateError("density matrix is not Hermitian")
    tr = np.trace(rho)
    if abs(tr - 1.0) > tol_trace:
        raise StateError(f"density matrix trace is {tr!r}, expected 1")
    lam = min_eigenvalue(rho)
    if lam < -tol_psd:
        raise StateError(f"density matrix has negative eigenvalue {lam!r}")
    return rho


def diagonal_density(probabilities: Sequence[float]) -> np.ndarray:
    p = np.asarray(probabilities, dtype=float)
    return check_density_matrix(np.diag(p).astype(np.complex128))


def pure_from_density(rho: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Return a state vector ``psi`` with ``|psi><psi| = rho`` for a rank-1 ``rho``.

    The global phase is fixed so that the largest component is real positive.
    """
    w, v = np.linalg.eigh(hermitize(np.asarray(rho, dtype=np.complex128)))
    if w[-1] < 1.0 - tol:
        raise StateError("density matrix is not pure")
    psi = v[:, -1]
    k = int(np.argmax(np.abs(psi)))
    psi = psi * (abs(psi[k]) / psi[k])
    return as_state_vector(psi, normalize=True)


def expectation(op: np.ndarray, rho: np.ndarray) -> complex:
    """``Tr(op rho)``."""
    op = np.asarray(op)
    rho = np.asarray(rho)
    if op.shape != rho.shape:
        raise DimensionError(f"shape mismatch: operator {op.shape} vs state {rho.shape}")
    # Tr(AB) = sum_ij A_ij B_ji
    return complex(np.sum(op * rho.T))


class UnnormalizedState(NamedTuple):
    """Unnormalized density matrix ``R`` with its weight ``w = Tr R``."""

    R: np.ndarray
    w: float

    @classmethod
    def from_density(cls, rho: np.ndarray, w: float = 1.0) -> "UnnormalizedState":
        rho = np.asarray(rho, dtype=np.complex128)
        return cls(w * rho, float(w))

    def check(self, tol_herm: float = TOL_HERM, tol_trace: float = TOL_TRACE) -> None:
        if not self.w > 0:
            raise StateError(f"weight must be positive, got {self.w!r}")
        if not is_hermitian(self.R, tol_herm * max(1.0, self.w)):
            raise StateError("R is not Hermitian")
        tr = np.trace(self.R).real
        if abs(tr - self.w) > tol_trace * max(1.0, self.w):
            raise StateError(f"Tr R = {tr!r} differs from w = {self.w!r}")


@dataclass(frozen=True, eq=False)
class LindbladSet:
    """Ordered collection of coupling operators sharing one dimension."""

    operators: np.ndarray  # shape (m_count, dim, dim)

    def __post_init__(self):
        ops = np.asarray(self.operators, dtype=np.complex128)
        if ops.ndim == 2:
            ops = ops[None]
        if ops.ndim != 3 or ops.shape[0] < 1:
            raise DimensionError("a LindbladSet needs at least one square operator")
        if ops.shape[1] != ops.shape[2]:
            raise DimensionError(f"operators must be square, got {ops.shape[1:]}")
        if not np.all(np.isfinite(ops)):
            raise StateError("operators have non-finite entries")
        object.__setattr__(self, "operators", _frozen(ops))

    @classmethod
    def from_list(cls, ops: Sequence) -> "LindbladSet":
        ops = [np.asarray(o, dtype=np.complex128) for o in ops]
        if not ops:
            raise DimensionError("a LindbladSet needs at least one operator")
        dims = {o.shape for o in ops}
        if len(dims) != 1:
            raise DimensionError(f"operators have different shapes: {sorted(dims)}")
        return cls(np.stack(ops))

    def __len__(self) -> int:
        return self.operators.shape[0]

    def __iter__(self):
        return iter(self.operators)

    def __getitem__(self, i):
        return self.operators[i]

    @property
    def dim(self) -> int:
        return self.operators.shape[1]

    @cached_property
    def K(self) -> np.ndarray:
        """``sum_m L_m^dagger L_m``, the norm-preserving drift operator."""
        return _frozen(np.einsum("mji,mjk->ik", self.operators.conj(), self.operators))

    @cached_property
    def diagonals(self) -> np.ndarray | None:
        """Diagonals ``(m_count, dim)`` when every operator is diagonal, else None."""
        ops = self.operators
        off = ops * (1.0 - np.eye(self.dim))
        if np.any(off != 0):
            return None
        return _frozen(np.diagonal(ops, axis1=1, axis2=2))

    @property
    def is_hermitian(self) -> bool:
        return all(is_hermitian(o) for o in self.operators)

    @cached_property
    def _max_norm_sq(self) -> float:
        return float(max(np.linalg.norm(o, 2) ** 2 for o in self.operators))

    def max_norm_sq(self) -> float:
        """``max_m ||L_m||^2`` in the spectral norm."""
        return self._max_norm_sq

    def centered(self) -> "LindbladSet":
        """Shift each Hermitian operator by ``-Tr(L)/dim``.

        For Hermitian operators and real shifts the density-matrix dynamics
        (nonlinear and ensemble-mean) are unchanged; only the scalar factor
        carried by the unnormalized linear propagator changes.  Non-Hermitian
        operators are returned unshifted because a complex shift would add a
        Hamiltonian term.
        """
        eye = np.eye(self.dim)
        out = []
        for o in self.operators:
            if is_hermitian(o):
                o = o - (np.trace(o).real / self.dim) * eye
            out.append(o)
        return LindbladSet(np.stack(out))

    def __repr__(self) -> str:
        return f"LindbladSet(m_count={len(self)}, dim={self.dim})"


def build_observable(eigenvalues: Sequence[float]) -> LindbladSet:
    """Single Hermitian observable ``L = sum_m l_m |m><m|`` as a one-element set."""
    ev = np.asarray(eigenvalues, dtype=float).ravel()
    if ev.size == 0:
        raise ValueError("eigenvalue list is empty")
    if not np.all(np.isfinite(ev)):
        raise ValueError("eigenvalues must be finite")
    return LindbladSet(np.diag(ev).astype(np.complex128)[None])


def build_projector_set(dim: int) -> LindbladSet:
    """The ``dim`` rank-one projectors ``|m><m|`` of the computational basis."""
    if int(dim) != dim or dim < 2:
        raise ValueError(f"projector set needs dim >= 2, got {dim!r}")
    dim = int(dim)
    ops = np.zeros((dim, dim, dim), dtype=np.complex128)
    ops[np.arange(dim), np.arange(dim), np.arange(dim)] = 1.0
    return LindbladSet(ops)


# -- JSON encoding -----------------------------------------------------------

def operator_to_json(a) -> dict:
    """``{"dim": n, "re": [[...]], "im": [[...]]}``; vectors use flat lists."""
    a = np.asarray(a, dtype=np.complex128)
    if a.ndim not in (1, 2):
        raise DimensionError("only vectors and matrices serialize")
    return {"dim": int(a.shape[0]), "re": a.real.tolist(), "im": a.imag.tolist()}


def operator_from_json(obj: dict) -> np.ndarray:
    try:
        dim = int(obj["dim"])
        re = np.asarray(obj["re"], dtype=float)
        im = np.asarray(obj.get("im", np.zeros_like(re)), dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise StateError(f"malformed operator JSON: {exc}") from None
    if re.shape != im.shape:
        raise DimensionError("re and im parts have different shapes")
    if re.ndim == 2 and re.shape != (dim, dim) or re.ndim == 1 and re.shape != (dim,) or re.ndim > 2:
        raise DimensionError(f"entries of shape {re.shape} do not match dim={dim}")
    a = re + 1j * im
    return as_operator(a) if a.ndim == 2 else _frozen(a)
