"""Small dense linear-algebra and stochastic-penalty primitives.

Everything here is a pure function of its arguments.  Matrices are tiny
(certificate blocks never exceed 13x13), so dense methods are used
throughout.  Random unit directions come from a counter-based Philox
stream so that any parallel schedule reproduces the same vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


class InvalidArgumentError(ValueError):
    """Raised when an argument violates an operation's precondition."""


class SingularMetricError(ValueError):
    """Raised when a matrix that must be positive definite is not."""


class EmptyAnnihilatorError(ValueError):
    """Raised when B has full row rank and no annihilator exists."""


@dataclass(frozen=True)
class SymMatrix:
    """A finite symmetric matrix; symmetrized exactly on construction."""

    dim: int
    entries: np.ndarray

    @staticmethod
    def from_array(a: np.ndarray) -> "SymMatrix":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise InvalidArgumentError(f"expected a square matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InvalidArgumentError("matrix entries must be finite")
        sym = 0.5 * (a + a.T)
        sym.flags.writeable = False
        return SymMatrix(dim=a.shape[0], entries=sym)


@dataclass(frozen=True)
class UnitVectorSet:
    """A deterministic set of unit-norm direction vectors."""

    dim: int
    count: int
    vectors: np.ndarray = field(repr=False)  # (count, dim), rows unit 2-norm


def derive_seed(*parts) -> int:
    """Mix integers and strings into one 64-bit stream key.

    Gives every (seed, purpose, index) combination its own Philox key so
    parallel schedules can never entangle RNG streams.
    """
    entropy = []
    for p in parts:
        if isinstance(p, str):
            entropy.extend(p.encode())
        else:
            entropy.append(int(p) & 0xFFFFFFFFFFFFFFFF)
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


def sample_unit_vectors(dim: int, count: int, seed: int) -> UnitVectorSet:
    """Draw ``count`` isotropic unit vectors in R^dim from a Philox stream.

    The same (dim, count, seed) always reproduces the identical set
    bit-for-bit, independent of any other sampling activity.
    """
    if dim < 1 or count < 1:
        raise InvalidArgumentError(f"dim and count must be >= 1, got {dim}, {count}")
    rng = np.random.Generator(np.random.Philox(key=seed))
    vecs = rng.standard_normal((count, dim))
    norms = np.linalg.norm(vecs, axis=1)
    # A zero draw has probability ~0 but would poison the normalization.
    bad = norms < 1e-12
    while np.any(bad):
        vecs[bad] = rng.standard_normal((int(bad.sum()), dim))
        norms = np.linalg.norm(vecs, axis=1)
        bad = norms < 1e-12
    vecs /= norms[:, None]
    vecs.flags.writeable = False
    return UnitVectorSet(dim=dim, count=count, vectors=vecs)


def penalty_pd(X: SymMatrix, etas: UnitVectorSet) -> float:
    """Sampled hinge penalty (1/xi) sum_j max(0, -eta_j^T X eta_j).

    Zero iff every sampled quadratic form is nonnegative; in particular
    zero whenever X is positive semidefinite.
    """
    if etas.dim != X.dim:
        raise InvalidArgumentError(
            f"direction dim {etas.dim} does not match matrix dim {X.dim}"
        )
    quad = np.einsum("ki,ij,kj->k", etas.vectors, X.entries, etas.vectors)
    return float(np.mean(np.maximum(0.0, -quad)))


def jacobi_eigvals(mats: np.ndarray, sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a batch of symmetric matrices by cyclic Jacobi sweeps.

    ``mats`` has shape (..., n, n); returns (..., n) sorted descending.
    Every matrix in the batch runs the same fixed rotation schedule, so
    the whole batch vectorizes.  Off-diagonal mass below
    1e-12 * (1 + max|A|) stops the iteration; 100 sweeps is far beyond
    what quadratic convergence needs for n <= 13.
    """
    a = np.array(mats, dtype=np.float64)
    single = a.ndim == 2
    if single:
        a = a[None]
    n = a.shape[-1]
    if n == 1:
        vals = a[..., 0, 0][..., None]
        return vals[0] if single else vals
    batch_shape = a.shape[:-2]
    a = a.reshape(-1, n, n)
    scale = 1.0 + np.abs(a).max(axis=(1, 2))
    tol = 1e-12 * scale
    for _ in range(sweeps):
        offdiag = np.sqrt(np.maximum(
            (a ** 2).sum(axis=(1, 2)) - (np.diagonal(a, axis1=1, axis2=2) ** 2).sum(axis=1),
            0.0,
        ))
        if np.all(offdiag <= tol):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[:, p, q]
                active = apq != 0.0
                app = a[:, p, p]
                aqq = a[:, q, q]
                with np.errstate(over="ignore"):
                    tau = (aqq - app) / np.where(active, 2.0 * apq, 1.0)
                    # tau may overflow to inf for denormal apq; t then
                    # underflows to the correct no-op rotation t = 0.
                    t = np.where(
                        active,
                        np.sign(tau + (tau == 0.0)) / (np.abs(tau) + np.hypot(1.0, tau)),
                        0.0,
                    )
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                col_p = a[:, :, p].copy()
                col_q = a[:, :, q].copy()
                a[:, :, p] = c[:, None] * col_p - s[:, None] * col_q
                a[:, :, q] = s[:, None] * col_p + c[:, None] * col_q
                row_p = a[:, p, :].copy()
                row_q = a[:, q, :].copy()
                a[:, p, :] = c[:, None] * row_p - s[:, None] * row_q
                a[:, q, :] = s[:, None] * row_p + c[:, None] * row_q
    vals = np.sort(np.diagonal(a, axis1=1, axis2=2), axis=1)[:, ::-1]
    vals = vals.reshape(*batch_shape, n)
    return vals[0] if single else vals


def lambda_max(X: SymMatrix) -> float:
    """Largest eigenvalue via the cyclic Jacobi iteration."""
    if not np.all(np.isfinite(X.entries)):
        raise InvalidArgumentError("matrix entries must be finite")
    return float(jacobi_eigvals(X.entries)[0])


def lambda_min(X: SymMatrix) -> float:
    """Smallest eigenvalue via the cyclic Jacobi iteration."""
    if not np.all(np.isfinite(X.entries)):
        raise InvalidArgumentError("matrix entries must be finite")
    return float(jacobi_eigvals(X.entries)[-1])


def invert_spd(W: SymMatrix) -> SymMatrix:
    """Inverse of a symmetric positive definite matrix, symmetrized.

    Rejects matrices whose smallest eigenvalue is below 1e-12 so that
    near-singular metrics fail loudly instead of amplifying noise.
    """
    if jacobi_eigvals(W.entries)[-1] < 1e-12:
        raise SingularMetricError("matrix is not positive definite (lambda_min < 1e-12)")
    try:
        cho = scipy.linalg.cho_factor(W.entries, lower=True)
    except scipy.linalg.LinAlgError as exc:  # pragma: no cover - guarded above
        raise SingularMetricError(str(exc)) from exc
    inv = scipy.linalg.cho_solve(cho, np.eye(W.dim))
    return SymMatrix.from_array(inv)


def null_space_basis(B: np.ndarray) -> np.ndarray:
    """Orthonormal basis for the left null space of B (columns annihilate B).

    Uses column-pivoted Householder QR of B, a fixed deterministic pivot
    rule, so the basis is reproducible for a given B.  Raises
    EmptyAnnihilatorError when B has full row rank (r == n), in which
    case the unactuated-direction conditions have no content.
    """
    B = np.asarray(B, dtype=np.float64)
    if B.ndim != 2:
        raise InvalidArgumentError(f"B must be a matrix, got shape {B.shape}")
    if not np.all(np.isfinite(B)):
        raise InvalidArgumentError("B must be finite")
    n = B.shape[0]
    if not np.any(B):
        return np.eye(n)
    Q, R, _ = scipy.linalg.qr(B, mode="full", pivoting=True)
    diag = np.abs(np.diagonal(R))
    rank_tol = max(B.shape) * np.finfo(np.float64).eps * (diag[0] if diag.size else 0.0)
    r = int(np.sum(diag > rank_tol))
    if r >= n:
        raise EmptyAnnihilatorError("B has full row rank; annihilator is empty")
    return Q[:, r:]
