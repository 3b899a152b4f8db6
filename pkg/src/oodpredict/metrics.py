"""Error-prediction metrics computed from unlabeled test samples.

Two families live here.  The projection-style metrics retrain models and
measure parameter-space displacement: :func:`proj_norm` (pseudo-label the
test set, fine-tune from the shared initialization, compare against a
reference model) and its closed-form linear counterpart
:func:`proj_norm_linear`.  The logit-based baselines (:func:`conf_score`,
:func:`entropy_score`, :func:`agree_score`, ATC) read only the classifier
outputs and therefore cannot see anything orthogonal to the fitted model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics
from .data import LabeledDataset
from .models import ParamVector, TrainConfig, param_distance, predict_class, softmax, train_sgd

__all__ = [
    "ProjNormConfig",
    "ProjNormRun",
    "ATCState",
    "pseudo_label",
    "proj_norm",
    "proj_norm_linear",
    "conf_score",
    "entropy_score",
    "agree_score",
    "atc_fit",
    "atc_score",
    "reference_subsample_indices",
]


@dataclass(frozen=True)
class ProjNormConfig:
    """How to run the two fine-tuning jobs inside :func:`proj_norm`.

    ``train_cfg`` is shared by both jobs.  ``ref_mode='retrain'`` fits the
    reference model on ``ref_subsample`` training points (defaulting to the
    test-set size); ``'reuse-model'`` skips that job and compares against
    the evaluated model itself.
    """

    train_cfg: TrainConfig
    ref_mode: str = "retrain"
    ref_subsample: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.ref_mode not in ("retrain", "reuse-model"):
            raise ValueError("ref_mode must be 'retrain' or 'reuse-model'")
        if self.ref_subsample is not None and self.ref_subsample < 1:
            raise ValueError("ref_subsample must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


@dataclass(frozen=True)
class ProjNormRun:
    """Result of one projection-norm evaluation, with both fitted models."""

    value: float
    theta_tilde: ParamVector
    theta_ref: ParamVector
    pseudo_label_agreement: float

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("value must be nonnegative")


@dataclass(frozen=True)
class ATCState:
    """Fitted score threshold for averaged-threshold-confidence estimates."""

    threshold: float
    score_kind: str = "negative-entropy"

    def __post_init__(self):
        if not np.isfinite(self.threshold):
            raise ValueError("threshold must be finite")


def pseudo_label(theta_hat: ParamVector, test_features) -> LabeledDataset:
    """Label test features with the classifier's own predictions."""
    features = np.asarray(test_features, dtype=np.float64)
    labels = predict_class(theta_hat, features)
    return LabeledDataset(features, labels, theta_hat.arch.num_classes)


def reference_subsample_indices(n_train: int, m_ref: int, seed: int) -> np.ndarray:
    """Seeded uniform subsample (without replacement) of training rows.

    Exposed so callers can reconstruct exactly which rows the reference
    model inside :func:`proj_norm` was fitted on.
    """
    if not 1 <= m_ref <= n_train:
        raise ValueError(
            f"reference subsample size must lie in [1, {n_train}], got {m_ref}; "
            "set ref_subsample explicitly when the test set outnumbers training rows"
        )
    return np.random.default_rng(seed).choice(n_train, size=m_ref, replace=False)


def proj_norm(
    theta0: ParamVector,
    theta_hat: ParamVector,
    train: LabeledDataset,
    test_features,
    cfg: ProjNormConfig,
) -> ProjNormRun:
    """Parameter-space distance between a pseudo-label fit and a reference fit.

    Pseudo-labels the test features with ``theta_hat``, fine-tunes a fresh
    model from ``theta0`` on them, fine-tunes the reference the same way on
    a seeded training subsample (or reuses ``theta_hat``), and returns the
    Euclidean distance between the two results.
    """
    if theta0.arch != theta_hat.arch:
        raise ValueError("theta0 and theta_hat must share an architecture")
    pseudo = pseudo_label(theta_hat, test_features)
    theta_tilde = train_sgd(theta0, pseudo, cfg.train_cfg)

    if cfg.ref_mode == "reuse-model":
        theta_ref = theta_hat
    else:
        m_ref = cfg.ref_subsample if cfg.ref_subsample is not None else pseudo.n
        idx = reference_subsample_indices(train.n, m_ref, cfg.seed)
        ref_data = LabeledDataset(train.features[idx], train.labels[idx], train.num_classes)
        theta_ref = train_sgd(theta0, ref_data, cfg.train_cfg)

    agreement = float(np.mean(predict_class(theta_tilde, pseudo.features) == pseudo.labels))
    return ProjNormRun(
        value=param_distance(theta_ref, theta_tilde),
        theta_tilde=theta_tilde,
        theta_ref=theta_ref,
        pseudo_label_agreement=agreement,
    )


def proj_norm_linear(x, y, x_tilde) -> float:
    """Norm of the fitted linear model outside the test data's row space.

    Fits the minimum-norm interpolator on ``(x, y)`` and measures how much
    of it the orthogonal projection onto the rows of ``x_tilde`` discards.
    """
    x = np.asarray(x, dtype=np.float64)
    x_tilde = np.asarray(x_tilde, dtype=np.float64)
    if x.shape[1] != x_tilde.shape[1]:
        raise ValueError("train and test features must share the ambient dimension")
    if x.shape[0] > x.shape[1] or x_tilde.shape[0] > x_tilde.shape[1]:
        raise ValueError("proj_norm_linear is defined for the n <= d regime on both sets")
    theta_hat = numerics.min_norm_solve(x, y)
    projector = numerics.row_space_projector(x_tilde)
    return float(np.linalg.norm(theta_hat - numerics.project(projector, theta_hat)))


def _check_logits(logits, name="logits") -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ValueError(f"{name} must have shape (n, K) with K >= 2")
    return logits


def conf_score(logits) -> float:
    """Mean of the winning softmax probability over rows."""
    p = softmax(_check_logits(logits))
    return float(np.mean(p.max(axis=1)))


def entropy_score(logits) -> float:
    """Mean predictive entropy (natural log) over rows; 0*log(0) counts as 0."""
    p = softmax(_check_logits(logits))
    plogp = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return float(np.mean(-plogp.sum(axis=1)))


def agree_score(logits_a, logits_b) -> float:
    """Fraction of rows on which two classifiers pick different classes."""
    a = np.asarray(logits_a, dtype=np.float64)
    b = np.asarray(logits_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"logit shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.argmax(a, axis=1) != np.argmax(b, axis=1)))


def _neg_entropy_scores(logits) -> np.ndarray:
    p = softmax(_check_logits(logits))
    plogp = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return plogp.sum(axis=1)


def atc_fit(val_logits, val_labels) -> ATCState:
    """Place the score threshold so flagged validation rows match its errors.

    Scores are row-wise negative entropies.  With ``k`` validation errors the
    threshold sits at the midpoint between the k-th and (k+1)-th order
    statistics (one past the extremes when k is 0 or n), so exactly k scores
    fall strictly below it whenever those order statistics are distinct.
    """
    scores = _neg_entropy_scores(val_logits)
    labels = np.asarray(val_labels)
    if labels.shape[0] != scores.shape[0]:
        raise ValueError("validation labels must match the logit rows")
    if scores.shape[0] < 1:
        raise ValueError("validation set must be nonempty")
    errors = int(np.count_nonzero(np.argmax(np.asarray(val_logits), axis=1) != labels))
    ordered = np.sort(scores)
    if errors == 0:
        t = float(ordered[0] - 1.0)
    elif errors == scores.shape[0]:
        t = float(ordered[-1] + 1.0)
    else:
        t = float((ordered[errors - 1] + ordered[errors]) / 2.0)
    return ATCState(threshold=t)


def atc_score(test_logits, state: ATCState) -> float:
    """Direct error estimate: fraction of rows scoring below the threshold."""
    return float(np.mean(_neg_entropy_scores(test_logits) < state.threshold))
