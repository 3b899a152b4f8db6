"""Dense linear algebra for the overparameterized (n <= d) regime.

Provides the three primitives the rest of the toolkit is built on:
minimum-norm interpolation of an underdetermined system, orthogonal
projection onto the row space of a data matrix, and eigendecomposition
of an empirical covariance with the Gram trick for d > n.

All functions are pure; returned objects hold read-only arrays and are
safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

# Singular values below RANK_RTOL * s_max are treated as zero everywhere.
RANK_RTOL = 1e-10

# Covariance eigenvalues below EIG_RTOL * lambda_max are indistinguishable
# from eigh round-off on a rank-deficient Gram matrix and are not returned.
EIG_RTOL = 1e-12

__all__ = [
    "RANK_RTOL",
    "RankDeficiencyError",
    "RowSpaceProjector",
    "SpectralDecomposition",
    "min_norm_solve",
    "row_space_projector",
    "project",
    "covariance_eig",
]


class RankDeficiencyError(ValueError):
    """A matrix is numerically rank-deficient for the requested operation."""

    def __init__(self, effective_rank: int, expected_rank: int, detail: str = ""):
        self.effective_rank = effective_rank
        self.expected_rank = expected_rank
        msg = (
            f"numerically rank-deficient: effective rank {effective_rank} "
            f"< required rank {expected_rank}"
        )
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def _as_matrix(X, name="X") -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got ndim={X.ndim}")
    if X.size and not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite entries")
    return X


def _as_vector(v, name="v") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-dimensional, got ndim={v.ndim}")
    if v.size and not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RowSpaceProjector:
    """Orthogonal projector onto the row space of a source matrix.

    ``basis`` holds one orthonormal row per retained direction, so the
    projector itself is ``basis.T @ basis`` without ever forming it densely.
    """

    basis: np.ndarray
    source_rank: int

    def __post_init__(self):
        object.__setattr__(self, "basis", _freeze(self.basis))
        if self.basis.shape[0] != self.source_rank:
            raise ValueError("source_rank must equal the number of basis rows")

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[1]


@dataclass(frozen=True)
class SpectralDecomposition:
    """Top eigenpairs of an empirical covariance, eigenvalues descending.

    ``eigenvectors`` stores one unit-norm vector per row, matching
    ``eigenvalues`` index for index.  ``rank_warning`` is set when fewer
    pairs than requested were numerically available.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    ambient_dim: int
    rank_warning: bool = field(default=False)

    def __post_init__(self):
        object.__setattr__(self, "eigenvalues", _freeze(self.eigenvalues))
        object.__setattr__(self, "eigenvectors", _freeze(self.eigenvectors))
        if self.eigenvalues.shape[0] != self.eigenvectors.shape[0]:
            raise ValueError("one eigenvector per eigenvalue required")
        if self.eigenvectors.ndim == 2 and self.eigenvectors.shape[1] != self.ambient_dim:
            raise ValueError("eigenvector length must equal ambient_dim")

    @property
    def count(self) -> int:
        return self.eigenvalues.shape[0]


def min_norm_solve(X, y) -> np.ndarray:
    """Smallest-l2-norm solution of ``X theta = y`` for n <= d.

    Solves through the n x n Gram matrix ``X X^T``: Cholesky first, falling
    back to a symmetric eigendecomposition when the Gram matrix is not
    numerically positive definite.  Singular values of X below
    ``RANK_RTOL * s_max`` count as zero; if the effective rank is below n
    a :class:`RankDeficiencyError` is raised instead of returning garbage.

    The result lies in the row space of X and satisfies
    ``||X theta - y|| <= 1e-8 ||y||``.
    """
    X = _as_matrix(X)
    y = _as_vector(y, "y")
    n, d = X.shape
    if y.shape[0] != n:
        raise ValueError(f"dimension mismatch: X has {n} rows but y has {y.shape[0]} entries")
    if n > d:
        raise ValueError(f"min_norm_solve needs n <= d, got n={n}, d={d}")

    gram = X @ X.T
    ynorm = float(np.linalg.norm(y))

    try:
        factor = scipy.linalg.cho_factor(gram, lower=True, check_finite=False)
        alpha = scipy.linalg.cho_solve(factor, y, check_finite=False)
        theta = X.T @ alpha
        if np.linalg.norm(X @ theta - y) <= 1e-8 * ynorm or ynorm == 0.0:
            return theta
    except scipy.linalg.LinAlgError:
        pass

    # Near-singular Gram matrix: eigendecompose and enforce the rank cutoff.
    evals, evecs = np.linalg.eigh(gram)
    svals = np.sqrt(np.clip(evals, 0.0, None))
    smax = float(svals[-1])
    if smax == 0.0:
        raise RankDeficiencyError(0, n, "all-zero matrix")
    keep = svals > RANK_RTOL * smax
    rank = int(np.count_nonzero(keep))
    if rank < n:
        raise RankDeficiencyError(rank, n)
    alpha = evecs @ ((evecs.T @ y) / evals)
    theta = X.T @ alpha
    if np.linalg.norm(X @ theta - y) > 1e-8 * ynorm:
        raise RankDeficiencyError(rank, n, "Gram matrix too ill-conditioned to interpolate")
    return theta


def row_space_projector(X) -> RowSpaceProjector:
    """Orthonormal basis of the row space of X, via SVD with the rank cutoff."""
    X = _as_matrix(X)
    if X.size == 0:
        raise ValueError("empty matrix has no row space")
    _, svals, vt = np.linalg.svd(X, full_matrices=False)
    smax = float(svals[0]) if svals.size else 0.0
    if smax == 0.0:
        raise ValueError("all-zero matrix has an empty row space")
    rank = int(np.count_nonzero(svals > RANK_RTOL * smax))
    return RowSpaceProjector(basis=vt[:rank], source_rank=rank)


def project(p: RowSpaceProjector, v) -> np.ndarray:
    """Apply the row-space projector to a vector."""
    v = _as_vector(v)
    if v.shape[0] != p.ambient_dim:
        raise ValueError(
            f"dimension mismatch: projector lives in R^{p.ambient_dim}, "
            f"vector has {v.shape[0]} entries"
        )
    return p.basis.T @ (p.basis @ v)


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    # Deterministic orientation: first coordinate of non-negligible size positive.
    out = vectors.copy()
    for i, vec in enumerate(out):
        nz = np.nonzero(np.abs(vec) > 1e-12)[0]
        if nz.size and vec[nz[0]] < 0:
            out[i] = -vec
    return out


def covariance_eig(X, top_k: int) -> SpectralDecomposition:
    """Top eigenpairs of the empirical covariance ``X^T X / n``.

    For d > n the n x n Gram matrix ``X X^T / n`` is decomposed instead and
    eigenvectors are mapped back through ``X^T w / ||X^T w||``; eigenvalues
    agree between the two routes.  Requesting more pairs than the numerical
    rank supports returns the available ones with ``rank_warning`` set.
    """
    X = _as_matrix(X)
    n, d = X.shape
    if n < 1:
        raise ValueError("covariance_eig needs at least one row")
    if not 1 <= top_k <= min(n, d):
        raise ValueError(f"top_k must be in [1, min(n, d)] = [1, {min(n, d)}], got {top_k}")

    if d > n:
        gram = (X @ X.T) / n
        evals, evecs = np.linalg.eigh(gram)
        order = np.argsort(evals)[::-1]
        evals = evals[order]
        evecs = evecs[:, order]
        lam_max = max(float(evals[0]), 0.0)
        available = int(np.count_nonzero(evals > EIG_RTOL * lam_max)) if lam_max > 0 else 0
        kept = min(top_k, available)
        vectors = X.T @ evecs[:, :kept]
        norms = np.linalg.norm(vectors, axis=0)
        vectors = (vectors / norms).T
        values = evals[:kept]
    else:
        cov = (X.T @ X) / n
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1]
        evals = evals[order]
        evecs = evecs[:, order]
        lam_max = max(float(evals[0]), 0.0)
        available = int(np.count_nonzero(evals > EIG_RTOL * lam_max)) if lam_max > 0 else 0
        kept = min(top_k, available)
        vectors = evecs[:, :kept].T
        values = evals[:kept]

    return SpectralDecomposition(
        eigenvalues=values,
        eigenvectors=_fix_signs(np.ascontiguousarray(vectors)),
        ambient_dim=d,
        rank_warning=kept < top_k,
    )
