# precoders/hermitian.py
"""
Small dense linear-algebra helpers.

Every matrix factorization in the package goes through this module so that
tests can observe the sizes being factored (see `factorization_counter`).
"""
import contextlib
from collections import Counter
from typing import Iterator, List, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from precoders.errors import NumericalDomainError

_active_counters: List[Counter] = []


@contextlib.contextmanager
def factorization_counter() -> Iterator[Counter]:
    """
    Count factorizations by (kind, order) while the block is active.

        with factorization_counter() as seen:
            solve(...)
        assert max(n for _, n in seen) <= 2
    """
    seen: Counter = Counter()
    _active_counters.append(seen)
    try:
        yield seen
    finally:
        _active_counters.remove(seen)


def _record(kind: str, order: int) -> None:
    for seen in _active_counters:
        seen[(kind, order)] += 1


def hpd_factor(a: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Cholesky factor of a Hermitian positive-definite matrix (scipy cho_factor form)."""
    _record("cholesky", a.shape[0])
    try:
        return cho_factor(a, lower=True, check_finite=True)
    except (LinAlgError, ValueError) as exc:
        raise NumericalDomainError(f"matrix of order {a.shape[0]} is not Hermitian positive definite: {exc}") from exc


def hpd_solve(factor: Tuple[np.ndarray, bool], b: np.ndarray) -> np.ndarray:
    return cho_solve(factor, b, check_finite=False)


def hpd_logdet(factor: Tuple[np.ndarray, bool]) -> float:
    diag = np.real(np.diag(factor[0]))
    value = 2.0 * float(np.sum(np.log(diag)))
    if not np.isfinite(value):
        raise NumericalDomainError(f"non-finite log-determinant ({value})")
    return value


def hermitian_eigh(a: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of a Hermitian matrix, eigenvalues in descending order."""
    _record("eigh", a.shape[0])
    vals, vecs = np.linalg.eigh(a)
    return vals[::-1], vecs[:, ::-1]


def svd(a: np.ndarray, full_matrices: bool = True) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    _record("svd", max(a.shape))
    return np.linalg.svd(a, full_matrices=full_matrices)


def hermitize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a.conj(), -1, -2))
