"""Spectral analysis of the linear regime and bound certificates.

Centers on noiseless linear tasks where train and test responses come from
one ground-truth vector.  Provides the squared test loss of the minimum-norm
interpolator, checkers for the two structural assumptions behind the
loss-to-projection-norm sandwich (equal projected norms; shared top
eigenspace with orthogonal tails), a certificate that the sandwich holds on
a given instance, and a generator of instances satisfying both assumptions
exactly by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import metrics, numerics
from .numerics import SpectralDecomposition

TAIL_PROFILES = ("power-law", "flat")

# Separates float round-off from genuine assumption violations at d <= 512.
ASSUMPTION_TOL = 1e-7
BOUND_RTOL = 1e-8

__all__ = [
    "SyntheticLinearTask",
    "AlignmentMatrix",
    "BoundReport",
    "TAIL_PROFILES",
    "test_loss",
    "alignment_matrix",
    "check_norm_assumption",
    "check_spectral_assumption",
    "verify_prop1",
    "construct_instance",
    "eigen_spectrum",
]


@dataclass(frozen=True)
class SyntheticLinearTask:
    """Noiseless linear task: responses are exact inner products with theta_star."""

    x: np.ndarray
    x_tilde: np.ndarray
    theta_star: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        xt = np.asarray(self.x_tilde, dtype=np.float64)
        ts = np.asarray(self.theta_star, dtype=np.float64)
        if x.ndim != 2 or xt.ndim != 2 or ts.ndim != 1:
            raise ValueError("x and x_tilde must be matrices, theta_star a vector")
        if x.shape[1] != ts.shape[0] or xt.shape[1] != ts.shape[0]:
            raise ValueError("x, x_tilde and theta_star must share the ambient dimension")
        for name, arr in (("x", x), ("x_tilde", xt), ("theta_star", ts)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "x_tilde", xt)
        object.__setattr__(self, "theta_star", ts)

    @property
    def y(self) -> np.ndarray:
        return self.x @ self.theta_star

    @property
    def y_tilde(self) -> np.ndarray:
        return self.x_tilde @ self.theta_star


@dataclass(frozen=True)
class AlignmentMatrix:
    """Absolute inner products between two sets of top eigenvectors."""

    entries: np.ndarray
    order: int

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.shape != (self.order, self.order):
            raise ValueError(f"entries must be {self.order} x {self.order}")
        object.__setattr__(self, "entries", e)


@dataclass(frozen=True)
class BoundReport:
    """Certificate for the loss/projection-norm sandwich on one instance.

    ``lambda_m`` and ``lambda_k_plus_1`` are eigenvalues of the unnormalized
    test second-moment matrix (rows' outer-product sum), so the sandwich
    reads ``lambda_m / m <= test_loss / proj_norm_linear^2 <= lambda_{k+1} / m``.
    ``ratio_defined`` is False when the projection norm vanishes.
    """

    k: int
    lambda_k_plus_1: float
    lambda_m: float
    test_loss: float
    proj_norm_linear: float
    ratio: float
    lower: float
    upper: float
    holds: bool
    ratio_defined: bool = field(default=True)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "lambda_k_plus_1": self.lambda_k_plus_1,
            "lambda_m": self.lambda_m,
            "test_loss": self.test_loss,
            "proj_norm_linear": self.proj_norm_linear,
            "ratio": self.ratio if self.ratio_defined else None,
            "lower": self.lower,
            "upper": self.upper,
            "holds": self.holds,
            "ratio_defined": self.ratio_defined,
        }


def test_loss(task: SyntheticLinearTask) -> float:
    """Mean squared test residual of the minimum-norm interpolator.

    Computed as ``||x_tilde theta_hat - y_tilde||^2 / m`` and cross-checked
    against the equivalent form through the component of theta_star
    orthogonal to the training rows; disagreement beyond round-off means the
    task is numerically inconsistent and raises.
    """
    m = task.x_tilde.shape[0]
    theta_hat = numerics.min_norm_solve(task.x, task.y)
    direct = float(np.sum((task.x_tilde @ theta_hat - task.y_tilde) ** 2) / m)

    projector = numerics.row_space_projector(task.x)
    residual_component = task.theta_star - numerics.project(projector, task.theta_star)
    orthogonal = float(np.sum((task.x_tilde @ residual_component) ** 2) / m)

    if abs(direct - orthogonal) > 1e-8 * max(direct, orthogonal) + 1e-12:
        raise RuntimeError(
            f"test-loss forms disagree ({direct} vs {orthogonal}); "
            "the task violates the noiseless linear model"
        )
    return direct


def alignment_matrix(
    train_eig: SpectralDecomposition, test_eig: SpectralDecomposition, order: int
) -> AlignmentMatrix:
    """Entrywise |<v_i, u_j>| between test (rows) and train (columns) eigenvectors."""
    if order > min(train_eig.count, test_eig.count):
        raise ValueError(
            f"order {order} exceeds available eigenvectors "
            f"({train_eig.count} train, {test_eig.count} test)"
        )
    if train_eig.ambient_dim != test_eig.ambient_dim:
        raise ValueError("decompositions live in different ambient dimensions")
    h = np.abs(test_eig.eigenvectors[:order] @ train_eig.eigenvectors[:order].T)
    return AlignmentMatrix(entries=h, order=order)


def check_norm_assumption(task: SyntheticLinearTask) -> float:
    """Relative mismatch between theta_star's train- and test-projected norms."""
    p_train = numerics.row_space_projector(task.x)
    p_test = numerics.row_space_projector(task.x_tilde)
    norm_train = float(np.linalg.norm(numerics.project(p_train, task.theta_star)))
    norm_test = float(np.linalg.norm(numerics.project(p_test, task.theta_star)))
    if norm_train == 0.0:
        raise ValueError("theta_star has zero projection onto the training rows")
    return (norm_test - norm_train) / norm_train


def check_spectral_assumption(
    train_eig: SpectralDecomposition, test_eig: SpectralDecomposition, k: int
) -> tuple[float, float]:
    """Quantify the shared-head/orthogonal-tail eigenstructure at cut ``k``.

    Returns ``(shared_gap, cross_overlap)``: the largest principal angle (in
    radians) between the two top-k eigenspaces, and the largest singular
    value of the inner-product matrix between the two tails.  Both are zero
    when the heads span one subspace and the tails intersect only at zero.
    """
    if not 1 <= k < min(train_eig.count, test_eig.count):
        raise ValueError(f"k must lie in [1, {min(train_eig.count, test_eig.count) - 1}]")
    head = train_eig.eigenvectors[:k] @ test_eig.eigenvectors[:k].T
    head_sv = np.linalg.svd(head, compute_uv=False)
    shared_gap = float(np.arccos(np.clip(head_sv.min(), 0.0, 1.0)))

    tail = train_eig.eigenvectors[k:] @ test_eig.eigenvectors[k:].T
    cross_overlap = float(np.linalg.svd(tail, compute_uv=False).max()) if tail.size else 0.0
    return shared_gap, cross_overlap


def verify_prop1(task: SyntheticLinearTask, k: int) -> BoundReport:
    """Check the eigenvalue sandwich on the loss-to-projection-norm ratio."""
    n, _ = task.x.shape
    m, d = task.x_tilde.shape
    if not 1 <= k < min(n, m):
        raise ValueError(f"k must lie in [1, {min(n, m) - 1}], got {k}")

    loss = test_loss(task)
    pnl = metrics.proj_norm_linear(task.x, task.y, task.x_tilde)

    eig = numerics.covariance_eig(task.x_tilde, top_k=min(m, d))
    evals = np.zeros(m)
    evals[: eig.count] = eig.eigenvalues
    lam_k_plus_1 = float(m * evals[k])
    lam_m = float(m * evals[m - 1])
    lower = lam_m / m
    upper = lam_k_plus_1 / m

    # A projection norm at round-off scale leaves the ratio meaningless.
    if pnl <= 1e-12 * np.linalg.norm(task.theta_star):
        return BoundReport(
            k=k,
            lambda_k_plus_1=lam_k_plus_1,
            lambda_m=lam_m,
            test_loss=loss,
            proj_norm_linear=pnl,
            ratio=float("nan"),
            lower=lower,
            upper=upper,
            holds=False,
            ratio_defined=False,
        )
    ratio = loss / pnl**2
    tol = BOUND_RTOL * upper
    return BoundReport(
        k=k,
        lambda_k_plus_1=lam_k_plus_1,
        lambda_m=lam_m,
        test_loss=loss,
        proj_norm_linear=pnl,
        ratio=ratio,
        lower=lower,
        upper=upper,
        holds=bool(lower - tol <= ratio <= upper + tol),
    )


def _eigenvalue_profile(count: int, tail_profile: str, decay: float) -> np.ndarray:
    if tail_profile == "flat":
        return np.ones(count)
    return np.arange(1, count + 1, dtype=np.float64) ** (-decay)


def construct_instance(
    k: int,
    n: int,
    m: int,
    d: int,
    seed: int = 0,
    tail_profile: str = "power-law",
    decay: float = 1.5,
) -> SyntheticLinearTask:
    """Build a task satisfying both structural assumptions exactly.

    Draws k shared orthonormal directions plus mutually orthogonal residual
    frames for train and test, assigns a descending eigenvalue profile down
    each side (``power-law``: i^-decay; ``flat``: all ones), and rescales the
    test-only component of theta_star so the projected norms match exactly.

    With the flat profile every retained eigenvalue is equal, so the sandwich
    certificate collapses to a point; eigenvector-based assumption checks are
    only meaningful for strictly decreasing profiles, where the top-k
    eigenspaces are identifiable.
    """
    if tail_profile not in TAIL_PROFILES:
        raise ValueError(f"tail_profile must be one of {TAIL_PROFILES}")
    if not 1 <= k < min(n, m):
        raise ValueError(f"k must lie in [1, {min(n, m) - 1}]")
    frames = n + m - k
    if frames > d:
        raise ValueError(
            f"dimension budget violated: need k + (n-k) + (m-k) = {frames} <= d = {d}"
        )
    if decay <= 0:
        raise ValueError("decay must be positive")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 6]))
    q, _ = np.linalg.qr(rng.standard_normal((d, frames)))
    shared = q[:, :k]
    train_tail = q[:, k:n]
    test_tail = q[:, n:frames]

    mu = _eigenvalue_profile(n, tail_profile, decay)
    lam = _eigenvalue_profile(m, tail_profile, decay)
    rot_train, _ = np.linalg.qr(rng.standard_normal((n, n)))
    rot_test, _ = np.linalg.qr(rng.standard_normal((m, m)))
    train_frame = np.hstack([shared, train_tail])
    test_frame = np.hstack([shared, test_tail])
    x = np.sqrt(n) * (rot_train * np.sqrt(mu)) @ train_frame.T
    x_tilde = np.sqrt(m) * (rot_test * np.sqrt(lam)) @ test_frame.T

    theta = rng.standard_normal(d)
    shared_c = shared @ (shared.T @ theta)
    train_c = train_tail @ (train_tail.T @ theta)
    test_c = test_tail @ (test_tail.T @ theta)
    remainder = theta - shared_c - train_c - test_c
    test_norm = np.linalg.norm(test_c)
    if test_norm == 0.0:
        raise ValueError("degenerate draw: theta_star has no test-only component")
    theta_star = shared_c + train_c + (np.linalg.norm(train_c) / test_norm) * test_c + remainder
    return SyntheticLinearTask(x=x, x_tilde=x_tilde, theta_star=theta_star)


def eigen_spectrum(x, top_k: int) -> np.ndarray:
    """Descending covariance eigenvalues of ``x^T x / n`` (for decay plots)."""
    return numerics.covariance_eig(x, top_k=top_k).eigenvalues
