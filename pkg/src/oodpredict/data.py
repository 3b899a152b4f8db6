"""Datasets, synthetic shift generators, adversarial examples, and CSV I/O.

Randomness discipline: every generator takes an integer seed and derives
independent sub-streams with ``np.random.SeedSequence([seed, stream_id])``.
Stream ids are fixed per purpose (see ``_STREAM_*`` constants), which is what
makes paired sampling work: regenerating a Gaussian-shift test set with a new
``sigma`` but the same seed reuses the identical draw for the shared feature
block and only rescales the block that appears at test time.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

_STREAM_TRAIN_BLOCK = 0
_STREAM_TEST_SHARED = 1
_STREAM_TEST_NOVEL = 2
_STREAM_CORRUPTION = 3
_STREAM_BLOB_CENTERS = 4
_STREAM_BLOB_POINTS = 5

CORRUPTION_KINDS = ("noise", "scale", "dropout")

SHIFT_FAMILY_NAMES = (
    "gaussian-sigma",
    "noise",
    "scale",
    "dropout",
    "label-shift",
    "adversarial",
)

__all__ = [
    "LabeledDataset",
    "GaussianShiftSpec",
    "ShiftFamily",
    "AttackSpec",
    "CORRUPTION_KINDS",
    "SHIFT_FAMILY_NAMES",
    "derive_seed",
    "gen_gaussian_shift",
    "gen_feature_corruption",
    "gen_label_shift",
    "gen_blobs",
    "pgd_attack",
    "load_csv",
    "save_csv",
]


def _stream(seed: int, stream_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream_id]))


def derive_seed(seed: int, *tags: int) -> int:
    """Deterministic child seed for a named purpose; stable across runs."""
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix plus integer class labels in ``[0, num_classes)``."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels)
        if feats.ndim != 2:
            raise ValueError("features must be a 2-d matrix")
        if feats.shape[0] < 1:
            raise ValueError("dataset must contain at least one row")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain non-finite entries")
        if labels.ndim != 1 or labels.shape[0] != feats.shape[0]:
            raise ValueError("label count must equal feature row count")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == labels.astype(np.int64)):
                raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError("every label must lie in [0, num_classes)")
        object.__setattr__(self, "features", _freeze(feats))
        object.__setattr__(self, "labels", _freeze(labels))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class GaussianShiftSpec:
    """Parameters of the two-block Gaussian covariate-shift construction.

    Training features populate only the first ``d1`` coordinates; the last
    ``d2`` coordinates are exactly zero at training time and N(0, sigma^2)
    at test time.  Labels are ``sign(x[a] + x[b])`` mapped to {0, 1} with
    1-based coordinates ``a = label_coord_a``, ``b = label_coord_b``
    (defaults: 1 and d1 + d2).
    """

    d1: int
    d2: int
    n: int
    m: int
    sigma: float
    label_coord_a: int = 1
    label_coord_b: int | None = None
    seed: int = 0

    def __post_init__(self):
        if min(self.d1, self.d2, self.n, self.m) < 1:
            raise ValueError("d1, d2, n, m must all be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.label_coord_b is None:
            object.__setattr__(self, "label_coord_b", self.d1 + self.d2)
        d = self.d1 + self.d2
        for name in ("label_coord_a", "label_coord_b"):
            idx = getattr(self, name)
            if not 1 <= idx <= d:
                raise ValueError(f"{name} must lie in [1, {d}], got {idx}")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


@dataclass(frozen=True)
class ShiftFamily:
    """A named shift family with strictly increasing severity levels."""

    name: str
    severities: tuple[float, ...]
    base_seed: int = 0

    def __post_init__(self):
        if self.name not in SHIFT_FAMILY_NAMES:
            raise ValueError(f"unknown shift family {self.name!r}; known: {SHIFT_FAMILY_NAMES}")
        sev = tuple(float(s) for s in self.severities)
        if not sev:
            raise ValueError("severity list must be nonempty")
        if any(b <= a for a, b in zip(sev, sev[1:])):
            raise ValueError("severities must be strictly increasing")
        object.__setattr__(self, "severities", sev)


@dataclass(frozen=True)
class AttackSpec:
    """l-infinity PGD attack parameters; ``step_size`` defaults to epsilon/4."""

    epsilon: float
    steps: int = 20
    step_size: float | None = None
    seed: int = 0  # reserved for randomized-start variants; the attack is deterministic

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")

    def resolved_step_size(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / 4.0


def _shift_labels(features: np.ndarray, coord_a: int, coord_b: int) -> np.ndarray:
    # Ties (sum exactly zero) land in class 1, matching the >= comparison.
    total = features[:, coord_a - 1] + features[:, coord_b - 1]
    return (total >= 0.0).astype(np.int64)


def gen_gaussian_shift(spec: GaussianShiftSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Draw paired train/test sets under the two-block Gaussian shift.

    Returns ``(train, test)``.  For a fixed seed the first ``d1`` test
    columns are bit-identical across all sigma values; only the novel block
    changes, and it changes by pure rescaling of one fixed draw.
    """
    d = spec.d1 + spec.d2
    train_shared = _stream(spec.seed, _STREAM_TRAIN_BLOCK).standard_normal((spec.n, spec.d1))
    test_shared = _stream(spec.seed, _STREAM_TEST_SHARED).standard_normal((spec.m, spec.d1))
    test_novel = _stream(spec.seed, _STREAM_TEST_NOVEL).standard_normal((spec.m, spec.d2))

    train_x = np.zeros((spec.n, d))
    train_x[:, : spec.d1] = train_shared
    test_x = np.empty((spec.m, d))
    test_x[:, : spec.d1] = test_shared
    test_x[:, spec.d1 :] = spec.sigma * test_novel

    train_y = _shift_labels(train_x, spec.label_coord_a, spec.label_coord_b)
    test_y = _shift_labels(test_x, spec.label_coord_a, spec.label_coord_b)
    return (
        LabeledDataset(train_x, train_y, num_classes=2),
        LabeledDataset(test_x, test_y, num_classes=2),
    )


def gen_feature_corruption(
    base: LabeledDataset, kind: str, severity: float, seed: int = 0
) -> LabeledDataset:
    """Corrupt features with additive noise, coordinate scaling, or dropout.

    ``noise`` adds N(0, severity^2) per entry, ``scale`` multiplies a seeded
    random half of the coordinates by (1 + severity), ``dropout`` zeroes each
    entry independently with probability min(severity, 1).  Labels pass
    through unchanged and severity 0 returns the features bit-identical.
    """
    if kind not in CORRUPTION_KINDS:
        raise ValueError(f"unknown corruption kind {kind!r}; known: {CORRUPTION_KINDS}")
    if severity < 0:
        raise ValueError("severity must be nonnegative")
    if severity == 0.0:
        return LabeledDataset(base.features, base.labels, base.num_classes)

    rng = _stream(seed, _STREAM_CORRUPTION)
    x = base.features.copy()
    if kind == "noise":
        x += rng.normal(0.0, severity, size=x.shape)
    elif kind == "scale":
        cols = rng.choice(base.dim, size=base.dim // 2, replace=False)
        x[:, cols] *= 1.0 + severity
    else:  # dropout
        drop = rng.random(size=x.shape) < min(severity, 1.0)
        x = np.where(drop, 0.0, x)
    return LabeledDataset(x, base.labels, base.num_classes)


def gen_label_shift(base: LabeledDataset, keep_classes) -> LabeledDataset:
    """Restrict a dataset to rows whose label is in ``keep_classes``.

    Labels are deliberately not re-indexed so classifier heads stay valid.
    """
    keep = sorted(set(int(c) for c in keep_classes))
    if not keep:
        raise ValueError("keep_classes must be nonempty")
    if keep[0] < 0 or keep[-1] >= base.num_classes:
        raise ValueError(f"keep_classes must be a subset of [0, {base.num_classes})")
    mask = np.isin(base.labels, keep)
    if not mask.any():
        raise ValueError("label shift selected no rows")
    return LabeledDataset(base.features[mask], base.labels[mask], base.num_classes)


def gen_blobs(
    n: int,
    dim: int,
    num_classes: int,
    seed: int = 0,
    spread: float = 1.0,
    center_scale: float = 6.0,
    split: int = 0,
) -> LabeledDataset:
    """Gaussian-blob classification data: one isotropic cloud per class.

    Class centers depend only on ``seed`` and are drawn from
    ``center_scale * N(0, I) / sqrt(dim)``, giving typical pairwise center
    distance ``center_scale * sqrt(2)`` in feature units; points add
    ``spread * N(0, I)``.  ``split`` selects an independent sample from the
    same population (train/val/test share centers, not points).  Labels are
    drawn uniformly, so class counts fluctuate binomially.
    """
    if n < 1 or dim < 1 or num_classes < 1:
        raise ValueError("n, dim and num_classes must be >= 1")
    centers_rng = _stream(seed, _STREAM_BLOB_CENTERS)
    points_rng = np.random.default_rng(
        np.random.SeedSequence([seed, _STREAM_BLOB_POINTS, split])
    )
    centers = center_scale * centers_rng.standard_normal((num_classes, dim)) / np.sqrt(dim)
    labels = points_rng.integers(0, num_classes, size=n)
    features = centers[labels] + spread * points_rng.standard_normal((n, dim))
    return LabeledDataset(features, labels, num_classes)


def _clip_linf(x: np.ndarray, origin: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip into the l-inf ball so the *measured* gap never exceeds epsilon.

    Plain ``origin + clip(x - origin, -eps, eps)`` can overshoot by one
    rounding ulp; nudge offending entries inward until the recomputed
    difference satisfies the bound with no tolerance.
    """
    out = origin + np.clip(x - origin, -epsilon, epsilon)
    while True:
        gap = out - origin
        high = gap > epsilon
        low = gap < -epsilon
        if not (high.any() or low.any()):
            return out
        out = np.where(high | low, np.nextafter(out, origin), out)


def pgd_attack(
    grad_oracle: Callable[[np.ndarray, np.ndarray], np.ndarray],
    base: LabeledDataset,
    spec: AttackSpec,
) -> LabeledDataset:
    """Iterated signed-gradient attack inside an l-infinity ball.

    ``grad_oracle(features, labels)`` must return per-example gradients of
    the training loss with respect to the inputs, one row per example.
    Iterates from the clean points (no random start); true labels are kept
    on the output so its error remains measurable.
    """
    if spec.epsilon == 0.0:
        return LabeledDataset(base.features, base.labels, base.num_classes)
    step = spec.resolved_step_size()
    origin = base.features
    x = origin.copy()
    for _ in range(spec.steps):
        grad = np.asarray(grad_oracle(x, base.labels), dtype=np.float64)
        if grad.shape != x.shape:
            raise ValueError(
                f"grad_oracle returned shape {grad.shape}, expected {x.shape}"
            )
        x = _clip_linf(x + step * np.sign(grad), origin, spec.epsilon)
    return LabeledDataset(x, base.labels, base.num_classes)


def save_csv(dataset: LabeledDataset, path) -> None:
    """Write ``f0,...,f{d-1},label`` rows; floats keep full precision."""
    path = Path(path)
    cols = [f"f{j}" for j in range(dataset.dim)] + ["label"]
    lines = [",".join(cols)]
    for row, label in zip(dataset.features, dataset.labels):
        lines.append(",".join(repr(float(v)) for v in row) + f",{int(label)}")
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_csv(path) -> LabeledDataset:
    """Read a dataset written by :func:`save_csv`; errors carry line numbers."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh]
    lines = [line for line in lines if line != ""]
    if not lines:
        raise ValueError(f"{path}: empty file")
    header = lines[0].split(",")
    if header[-1] != "label" or header[:-1] != [f"f{j}" for j in range(len(header) - 1)]:
        raise ValueError(f"{path}: line 1: malformed header {lines[0]!r}")
    dim = len(header) - 1
    if len(lines) == 1:
        raise ValueError(f"{path}: no data rows (header only)")

    features = np.empty((len(lines) - 1, dim))
    labels = np.empty(len(lines) - 1, dtype=np.int64)
    for i, line in enumerate(lines[1:]):
        lineno = i + 2
        parts = line.split(",")
        if len(parts) != dim + 1:
            raise ValueError(
                f"{path}: line {lineno}: expected {dim + 1} columns, got {len(parts)}"
            )
        try:
            features[i] = [float(tok) for tok in parts[:-1]]
        except ValueError as exc:
            raise ValueError(f"{path}: line {lineno}: malformed feature value ({exc})") from exc
        try:
            labels[i] = int(parts[-1])
        except ValueError as exc:
            raise ValueError(
                f"{path}: line {lineno}: label must be a nonnegative integer, got {parts[-1]!r}"
            ) from exc
        if labels[i] < 0:
            raise ValueError(f"{path}: line {lineno}: label must be nonnegative")
    return LabeledDataset(features, labels, num_classes=int(labels.max()) + 1)
