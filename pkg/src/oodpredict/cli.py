"""Config-driven experiment runner.

Subcommands: ``gen-data`` materializes the shift datasets as CSV, ``run``
sweeps every configured metric over every shift dataset and scores the
predictions, ``stress`` calibrates metrics on corruptions and applies them
to adversarially perturbed test sets, ``report`` renders tables from a
records file.  Exit codes: 0 success, 2 config error, 3 runtime failure.

All randomness derives from the single global seed through named
sub-streams, so identical config + seed reproduces byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import metrics as metrics_mod
from . import theory
from .data import (
    AttackSpec,
    GaussianShiftSpec,
    LabeledDataset,
    ShiftFamily,
    derive_seed,
    gen_blobs,
    gen_feature_corruption,
    gen_gaussian_shift,
    pgd_attack,
    save_csv,
)
from .evaluation import (
    EvalReport,
    PredictionRecord,
    calibrate_and_predict,
    ensemble_zscore,
    fit_eval,
    residual_correlation,
)
from .metrics import ProjNormConfig, agree_score, atc_fit, atc_score, conf_score, entropy_score
from .models import (
    Architecture,
    TrainConfig,
    init_model,
    input_gradients,
    load_params,
    predict_logits,
    test_error,
    train_sgd,
)
from .numerics import covariance_eig, min_norm_solve

SCHEMA_VERSION = 1
TASKS = ("toy-linear", "mlp-shift", "prop1-sweep", "stress-test")
ALL_METRICS = ("proj-norm", "proj-norm-linear", "conf-score", "entropy", "agree-score", "atc")
TOY_METRICS = ("proj-norm-linear", "conf-score", "entropy")
NONLINEAR_METRICS = ("proj-norm", "conf-score", "entropy", "agree-score", "atc")
DEFAULT_SIGMA_GRID = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0)
RECORD_COLUMNS = ("dataset_id", "family", "severity", "method", "prediction", "true_error")

__all__ = [
    "ConfigError",
    "StageError",
    "ExperimentConfig",
    "DataSettings",
    "ProjNormSettings",
    "StressSettings",
    "Prop1Settings",
    "load_config",
    "config_to_toml",
    "config_from_dict",
    "config_to_dict",
    "write_records",
    "read_records",
    "cmd_gen_data",
    "cmd_run",
    "cmd_stress",
    "cmd_report",
    "main",
]


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for the exit message."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


@contextmanager
def _stage(name: str):
    try:
        yield
    except (StageError, ConfigError):
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


@dataclass(frozen=True)
class DataSettings:
    """Sizes and shapes of the generated datasets."""

    n_train: int = 4000
    m_test: int = 2000
    input_dim: int = 20
    num_classes: int = 4
    blob_spread: float = 2.0
    blob_center_scale: float = 6.0
    d1: int = 1000
    d2: int = 500

    def __post_init__(self):
        if min(self.n_train, self.m_test, self.input_dim, self.num_classes, self.d1, self.d2) < 1:
            raise ConfigError("data sizes must all be >= 1")
        if self.blob_spread <= 0 or self.blob_center_scale <= 0:
            raise ConfigError("blob_spread and blob_center_scale must be positive")


@dataclass(frozen=True)
class ProjNormSettings:
    """Overrides for the two fine-tuning jobs inside the projection norm."""

    ref_mode: str = "retrain"
    ref_subsample: int = 0  # 0 means "use the test-set size"
    steps: int = 0  # 0 means "reuse [train].steps"
    learning_rate: float = 0.0  # 0 means "reuse [train].learning_rate"

    def __post_init__(self):
        if self.ref_mode not in ("retrain", "reuse-model"):
            raise ConfigError("projnorm.ref_mode must be 'retrain' or 'reuse-model'")
        if self.ref_subsample < 0 or self.steps < 0 or self.learning_rate < 0:
            raise ConfigError("projnorm overrides must be nonnegative (0 = inherit)")


@dataclass(frozen=True)
class StressSettings:
    """Adversarial grid; epsilons are in feature units."""

    epsilons: tuple[float, ...] = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
    steps: int = 20
    step_size: float = 0.0  # 0 means "epsilon / 4"

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilons)
        if not eps:
            raise ConfigError("stress.epsilons must be nonempty")
        if any(e < 0 for e in eps) or any(b <= a for a, b in zip(eps, eps[1:])):
            raise ConfigError("stress.epsilons must be nonnegative and strictly increasing")
        if self.steps < 1:
            raise ConfigError("stress.steps must be >= 1")
        if self.step_size < 0:
            raise ConfigError("stress.step_size must be nonnegative (0 = epsilon/4)")
        object.__setattr__(self, "epsilons", eps)


@dataclass(frozen=True)
class Prop1Settings:
    """Instance sweep for the bound certificate."""

    instances: int = 100
    k_max: int = 10
    n: int = 40
    m: int = 40
    d: int = 128
    decay: float = 1.5

    def __post_init__(self):
        if self.instances < 1:
            raise ConfigError("prop1.instances must be >= 1")
        if not 1 <= self.k_max < min(self.n, self.m):
            raise ConfigError("prop1.k_max must lie in [1, min(n, m))")
        if self.n + self.m - 1 > self.d:
            raise ConfigError("prop1 dimension budget violated: need n + m - 1 <= d")
        if self.decay <= 0:
            raise ConfigError("prop1.decay must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    seed: int = 0
    out_dir: str = "runs/out"
    architecture: Architecture = field(
        default_factory=lambda: Architecture("mlp", 20, 4, hidden=(32,))
    )
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            steps=400, learning_rate=0.05, batch_size=64, momentum=0.9, schedule="cosine"
        )
    )
    data: DataSettings = field(default_factory=DataSettings)
    shifts: tuple[ShiftFamily, ...] = ()
    metric_names: tuple[str, ...] = ()
    projnorm: ProjNormSettings = field(default_factory=ProjNormSettings)
    stress: StressSettings = field(default_factory=StressSettings)
    prop1: Prop1Settings = field(default_factory=Prop1Settings)
    ensemble: tuple[str, str] | None = None
    init_params: str = ""  # path to a saved parameter file; empty = random init

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; known: {TASKS}")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if not self.shifts:
            object.__setattr__(self, "shifts", _default_shifts(self.task))
        if not self.metric_names:
            default = TOY_METRICS if self.task == "toy-linear" else NONLINEAR_METRICS
            object.__setattr__(self, "metric_names", default)
        allowed = TOY_METRICS if self.task == "toy-linear" else NONLINEAR_METRICS
        for name in self.metric_names:
            if name not in ALL_METRICS:
                raise ConfigError(f"unknown metric {name!r}; known: {ALL_METRICS}")
            if name not in allowed:
                raise ConfigError(f"metric {name!r} is not available for task {self.task!r}")
        if self.ensemble is not None:
            if len(self.ensemble) != 2:
                raise ConfigError("ensemble must name exactly two metrics")
            for name in self.ensemble:
                if name not in self.metric_names:
                    raise ConfigError(f"ensemble metric {name!r} is not in the metric list")
        if self.task == "toy-linear":
            if all(s.name != "gaussian-sigma" for s in self.shifts):
                raise ConfigError("toy-linear needs a 'gaussian-sigma' shift family")
            if self.data.n_train > self.data.d1:
                raise ConfigError(
                    "toy-linear needs n_train <= d1: training rows only span the "
                    "shared feature block, and interpolation requires full row rank"
                )
        elif self.task in ("mlp-shift", "stress-test"):
            bad = [s.name for s in self.shifts if s.name not in ("noise", "scale", "dropout")]
            if bad:
                raise ConfigError(
                    f"task {self.task!r} supports noise/scale/dropout shift families, got {bad}"
                )


def _default_shifts(task: str) -> tuple[ShiftFamily, ...]:
    if task == "toy-linear":
        return (ShiftFamily("gaussian-sigma", DEFAULT_SIGMA_GRID),)
    if task in ("mlp-shift", "stress-test"):
        return (
            ShiftFamily("noise", (0.5, 1.0, 1.5, 2.0, 2.5)),
            ShiftFamily("scale", (0.25, 0.5, 0.75, 1.0, 1.5)),
            ShiftFamily("dropout", (0.1, 0.3, 0.5, 0.7, 0.9)),
        )
    return ()


# ---------------------------------------------------------------------------
# Config parsing / serialization
# ---------------------------------------------------------------------------

_TOP_KEYS = {
    "schema_version",
    "task",
    "seed",
    "out_dir",
    "ensemble",
    "init_params",
    "architecture",
    "train",
    "data",
    "metrics",
    "projnorm",
    "stress",
    "prop1",
    "shift",
}


def _check_keys(mapping: dict, allowed, where: str) -> None:
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _build(cls, mapping: dict, where: str):
    try:
        return cls(**mapping)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    _check_keys(raw, _TOP_KEYS, "config")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    if "task" not in raw:
        raise ConfigError("config must set 'task'")

    arch_raw = dict(raw.get("architecture", {}))
    _check_keys(arch_raw, ("kind", "input_dim", "num_classes", "hidden", "activation"), "[architecture]")
    if "hidden" in arch_raw:
        arch_raw["hidden"] = tuple(arch_raw["hidden"])
    arch = _build(Architecture, arch_raw, "[architecture]") if arch_raw else None

    train_raw = dict(raw.get("train", {}))
    _check_keys(
        train_raw,
        ("steps", "learning_rate", "batch_size", "momentum", "schedule", "loss", "seed"),
        "[train]",
    )
    train = _build(TrainConfig, train_raw, "[train]") if train_raw else None

    data_raw = dict(raw.get("data", {}))
    data = _build(DataSettings, data_raw, "[data]")

    metrics_raw = dict(raw.get("metrics", {}))
    _check_keys(metrics_raw, ("names",), "[metrics]")
    names = tuple(metrics_raw.get("names", ()))

    pn = _build(ProjNormSettings, dict(raw.get("projnorm", {})), "[projnorm]")
    stress = _build(StressSettings, dict(raw.get("stress", {})), "[stress]")
    prop1 = _build(Prop1Settings, dict(raw.get("prop1", {})), "[prop1]")

    shifts = []
    for i, entry in enumerate(raw.get("shift", [])):
        entry = dict(entry)
        _check_keys(entry, ("family", "severities", "base_seed"), f"[[shift]] #{i + 1}")
        try:
            shifts.append(
                ShiftFamily(
                    name=entry["family"],
                    severities=tuple(entry["severities"]),
                    base_seed=int(entry.get("base_seed", 0)),
                )
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"invalid [[shift]] #{i + 1}: {exc}") from exc

    ensemble = raw.get("ensemble")
    if ensemble is not None:
        ensemble = tuple(ensemble)

    kwargs = dict(
        task=raw["task"],
        seed=int(raw.get("seed", 0)),
        out_dir=str(raw.get("out_dir", "runs/out")),
        data=data,
        shifts=tuple(shifts),
        metric_names=names,
        projnorm=pn,
        stress=stress,
        prop1=prop1,
        ensemble=ensemble,
        init_params=str(raw.get("init_params", "")),
    )
    if arch is not None:
        kwargs["architecture"] = arch
    if train is not None:
        kwargs["train"] = train
    return _build(ExperimentConfig, kwargs, "config")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    arch = cfg.architecture
    return {
        "schema_version": SCHEMA_VERSION,
        "task": cfg.task,
        "seed": cfg.seed,
        "out_dir": cfg.out_dir,
        **({"ensemble": list(cfg.ensemble)} if cfg.ensemble else {}),
        **({"init_params": cfg.init_params} if cfg.init_params else {}),
        "architecture": {
            "kind": arch.kind,
            "input_dim": arch.input_dim,
            "num_classes": arch.num_classes,
            "hidden": list(arch.hidden),
            "activation": arch.activation,
        },
        "train": {
            "steps": cfg.train.steps,
            "learning_rate": cfg.train.learning_rate,
            "batch_size": cfg.train.batch_size,
            "momentum": cfg.train.momentum,
            "schedule": cfg.train.schedule,
            "loss": cfg.train.loss,
            "seed": cfg.train.seed,
        },
        "data": {
            "n_train": cfg.data.n_train,
            "m_test": cfg.data.m_test,
            "input_dim": cfg.data.input_dim,
            "num_classes": cfg.data.num_classes,
            "blob_spread": cfg.data.blob_spread,
            "blob_center_scale": cfg.data.blob_center_scale,
            "d1": cfg.data.d1,
            "d2": cfg.data.d2,
        },
        "metrics": {"names": list(cfg.metric_names)},
        "projnorm": {
            "ref_mode": cfg.projnorm.ref_mode,
            "ref_subsample": cfg.projnorm.ref_subsample,
            "steps": cfg.projnorm.steps,
            "learning_rate": cfg.projnorm.learning_rate,
        },
        "stress": {
            "epsilons": list(cfg.stress.epsilons),
            "steps": cfg.stress.steps,
            "step_size": cfg.stress.step_size,
        },
        "prop1": {
            "instances": cfg.prop1.instances,
            "k_max": cfg.prop1.k_max,
            "n": cfg.prop1.n,
            "m": cfg.prop1.m,
            "d": cfg.prop1.d,
            "decay": cfg.prop1.decay,
        },
        "shift": [
            {"family": s.name, "severities": list(s.severities), "base_seed": s.base_seed}
            for s in cfg.shifts
        ],
    }


def _toml_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_scalar(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value).__name__} to TOML")


def config_to_toml(cfg: ExperimentConfig) -> str:
    """Serialize a config so that parsing the output reproduces it exactly."""
    mapping = config_to_dict(cfg)
    lines = []
    for key, value in mapping.items():
        if not isinstance(value, (dict, list)) or key == "ensemble":
            lines.append(f"{key} = {_toml_scalar(value)}")
    for key, value in mapping.items():
        if isinstance(value, dict):
            lines.append("")
            lines.append(f"[{key}]")
            lines.extend(f"{k} = {_toml_scalar(v)}" for k, v in value.items())
    for entry in mapping.get("shift", []):
        lines.append("")
        lines.append("[[shift]]")
        lines.extend(f"{k} = {_toml_scalar(v)}" for k, v in entry.items())
    return "\n".join(lines) + "\n"


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# Records CSV
# ---------------------------------------------------------------------------


def write_records(records: Sequence[PredictionRecord], path) -> None:
    lines = [",".join(RECORD_COLUMNS)]
    for r in records:
        for text in (r.dataset_id, r.family, r.method):
            if "," in text:
                raise ValueError(f"record field {text!r} must not contain commas")
        lines.append(
            f"{r.dataset_id},{r.family},{r.severity:.9g},{r.method},"
            f"{r.prediction:.9g},{r.true_error:.9g}"
        )
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_records(path) -> list[PredictionRecord]:
    path = Path(path)
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln]
    if not lines:
        raise ValueError(f"{path}: empty records file")
    if lines[0].split(",") != list(RECORD_COLUMNS):
        raise ValueError(f"{path}: row 1: bad header {lines[0]!r}")
    if len(lines) == 1:
        raise ValueError(f"{path}: no records (header only)")
    records = []
    for i, line in enumerate(lines[1:]):
        row = i + 2
        parts = line.split(",")
        if len(parts) != len(RECORD_COLUMNS):
            raise ValueError(f"{path}: row {row}: expected {len(RECORD_COLUMNS)} columns")
        try:
            records.append(
                PredictionRecord(
                    dataset_id=parts[0],
                    family=parts[1],
                    severity=float(parts[2]),
                    method=parts[3],
                    prediction=float(parts[4]),
                    true_error=float(parts[5]),
                )
            )
        except ValueError as exc:
            raise ValueError(f"{path}: row {row}: {exc}") from exc
    return records


# ---------------------------------------------------------------------------
# Shared pipeline pieces
# ---------------------------------------------------------------------------


def _regression_logits(scores: np.ndarray) -> np.ndarray:
    # Two-class logits for a scalar regression output classified by sign.
    return np.column_stack([-scores, scores])


def _toy_shift_family(cfg: ExperimentConfig) -> ShiftFamily:
    for fam in cfg.shifts:
        if fam.name == "gaussian-sigma":
            return fam
    raise ConfigError("toy-linear task needs a 'gaussian-sigma' shift family")


def _toy_datasets(cfg: ExperimentConfig):
    family = _toy_shift_family(cfg)
    base_seed = derive_seed(cfg.seed, 20, family.base_seed)
    out = []
    train = None
    for sigma in family.severities:
        spec = GaussianShiftSpec(
            d1=cfg.data.d1, d2=cfg.data.d2, n=cfg.data.n_train, m=cfg.data.m_test,
            sigma=float(sigma), seed=base_seed,
        )
        train, test = gen_gaussian_shift(spec)
        out.append((float(sigma), test))
    return train, out


def _blob_split(cfg: ExperimentConfig, n: int, split: int) -> LabeledDataset:
    return gen_blobs(
        n=n,
        dim=cfg.data.input_dim,
        num_classes=cfg.data.num_classes,
        seed=derive_seed(cfg.seed, 30),
        spread=cfg.data.blob_spread,
        center_scale=cfg.data.blob_center_scale,
        split=split,
    )


def _corruption_datasets(cfg: ExperimentConfig, clean_test: LabeledDataset):
    out = []
    for fam_idx, family in enumerate(cfg.shifts):
        if family.name not in ("noise", "scale", "dropout"):
            raise ConfigError(
                f"shift family {family.name!r} is not a feature corruption; "
                "mlp tasks support noise/scale/dropout"
            )
        for sev_idx, severity in enumerate(family.severities):
            seed = derive_seed(cfg.seed, 40, family.base_seed, fam_idx, sev_idx)
            ds = gen_feature_corruption(clean_test, family.name, severity, seed)
            out.append((f"{family.name}-s{severity:g}", family.name, severity, ds))
    return out


@dataclass
class _FittedModels:
    theta0: object
    theta_hat: object
    theta_agree: object
    atc_state: object
    train_data: LabeledDataset
    pn_cfg: ProjNormConfig


def _fit_models(cfg: ExperimentConfig, train_data, val_data) -> _FittedModels:
    arch = cfg.architecture
    train_cfg = replace(cfg.train, seed=derive_seed(cfg.seed, 51, cfg.train.seed))
    if cfg.init_params:
        theta0 = load_params(cfg.init_params)
        if theta0.arch != arch:
            raise ConfigError(
                f"init_params architecture {theta0.arch} does not match [architecture]"
            )
    else:
        theta0 = init_model(arch, derive_seed(cfg.seed, 50))
    theta_hat = train_sgd(theta0, train_data, train_cfg)

    theta_agree = None
    if "agree-score" in cfg.metric_names:
        partner_cfg = replace(train_cfg, seed=derive_seed(cfg.seed, 53))
        theta_agree = train_sgd(init_model(arch, derive_seed(cfg.seed, 52)), train_data, partner_cfg)

    atc_state = None
    if "atc" in cfg.metric_names:
        atc_state = atc_fit(predict_logits(theta_hat, val_data.features), val_data.labels)

    pn_train = replace(
        train_cfg,
        steps=cfg.projnorm.steps or cfg.train.steps,
        learning_rate=cfg.projnorm.learning_rate or cfg.train.learning_rate,
        seed=derive_seed(cfg.seed, 54),
    )
    pn_cfg = ProjNormConfig(
        train_cfg=pn_train,
        ref_mode=cfg.projnorm.ref_mode,
        ref_subsample=cfg.projnorm.ref_subsample or None,
        seed=derive_seed(cfg.seed, 55),
    )
    return _FittedModels(theta0, theta_hat, theta_agree, atc_state, train_data, pn_cfg)


def _evaluate_nonlinear(cfg: ExperimentConfig, fitted: _FittedModels, named_datasets):
    """One record per (dataset, metric), in config order."""
    records = []
    for dataset_id, family, severity, ds in named_datasets:
        truth = test_error(fitted.theta_hat, ds)
        logits = predict_logits(fitted.theta_hat, ds.features)
        for name in cfg.metric_names:
            if name == "proj-norm":
                value = metrics_mod.proj_norm(
                    fitted.theta0, fitted.theta_hat, fitted.train_data, ds.features, fitted.pn_cfg
                ).value
            elif name == "conf-score":
                value = conf_score(logits)
            elif name == "entropy":
                value = entropy_score(logits)
            elif name == "agree-score":
                value = agree_score(logits, predict_logits(fitted.theta_agree, ds.features))
            elif name == "atc":
                value = atc_score(logits, fitted.atc_state)
            else:
                raise ConfigError(f"metric {name!r} is not available for nonlinear tasks")
            records.append(
                PredictionRecord(dataset_id, family, severity, name, float(value), truth)
            )
    return records


def _toy_records(cfg: ExperimentConfig):
    train, tests = _toy_datasets(cfg)
    targets = 2.0 * train.labels - 1.0
    theta = min_norm_solve(train.features, targets)
    records = []
    for sigma, ds in tests:
        scores = ds.features @ theta
        logits = _regression_logits(scores)
        truth = float(np.mean((scores > 0).astype(np.int64) != ds.labels))
        for name in cfg.metric_names:
            if name == "proj-norm-linear":
                value = metrics_mod.proj_norm_linear(train.features, targets, ds.features)
            elif name == "conf-score":
                value = conf_score(logits)
            elif name == "entropy":
                value = entropy_score(logits)
            else:
                raise ConfigError(f"metric {name!r} is not available for the toy task")
            records.append(
                PredictionRecord(f"gaussian-sigma-s{sigma:g}", "gaussian-sigma", sigma, name, float(value), truth)
            )
    return records


def _method_reports(records: Sequence[PredictionRecord]) -> tuple[dict, list[EvalReport]]:
    """fit_eval per method; degenerate fits are reported, not fatal."""
    by_method: dict[str, list[PredictionRecord]] = {}
    for r in records:
        by_method.setdefault(r.method, []).append(r)
    summary = {}
    reports = []
    for method, recs in by_method.items():
        try:
            rep = fit_eval(recs)
        except ValueError as exc:
            summary[method] = {"error": str(exc)}
            continue
        summary[method] = {
            "r_squared": rep.r_squared,
            "spearman_rho": rep.spearman_rho,
            "slope": rep.slope,
            "intercept": rep.intercept,
        }
        reports.append(rep)
    return summary, reports


def _run_report_json(cfg: ExperimentConfig, records) -> dict:
    summary, reports = _method_reports(records)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "task": cfg.task,
        "seed": cfg.seed,
        "methods": summary,
    }
    if len(reports) >= 2:
        corr = residual_correlation(reports)
        doc["residual_correlation"] = {
            "methods": [rep.method for rep in reports],
            "matrix": [[float(v) for v in row] for row in corr],
        }
    if cfg.ensemble is not None:
        name_a, name_b = cfg.ensemble
        recs_a = [r for r in records if r.method == name_a]
        recs_b = [r for r in records if r.method == name_b]
        combined = ensemble_zscore(
            [r.prediction for r in recs_a], [r.prediction for r in recs_b]
        )
        ens_records = [
            PredictionRecord(r.dataset_id, r.family, r.severity,
                             f"ensemble({name_a}+{name_b})", float(v), r.true_error)
            for r, v in zip(recs_a, combined)
        ]
        ens_summary, _ = _method_reports(ens_records)
        doc["ensemble"] = ens_summary
    return doc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _dataset_dir(out_dir: Path) -> Path:
    d = out_dir / "datasets"
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_gen_data(cfg: ExperimentConfig, out_dir: Path) -> list[Path]:
    """Write every configured shift dataset (plus train/val) as CSV."""
    written = []
    target = _dataset_dir(out_dir)
    with _stage("generate-data"):
        if cfg.task == "toy-linear":
            train, tests = _toy_datasets(cfg)
            save_csv(train, target / "train.csv")
            written.append(target / "train.csv")
            for sigma, ds in tests:
                path = target / f"test-gaussian-sigma-s{sigma:g}.csv"
                save_csv(ds, path)
                written.append(path)
        elif cfg.task in ("mlp-shift", "stress-test"):
            train = _blob_split(cfg, cfg.data.n_train, split=0)
            val = _blob_split(cfg, cfg.data.m_test, split=1)
            clean = _blob_split(cfg, cfg.data.m_test, split=2)
            for name, ds in (("train", train), ("val", val), ("test-clean", clean)):
                path = target / f"{name}.csv"
                save_csv(ds, path)
                written.append(path)
            for dataset_id, _, _, ds in _corruption_datasets(cfg, clean):
                path = target / f"test-{dataset_id}.csv"
                save_csv(ds, path)
                written.append(path)
        else:
            raise ConfigError(f"task {cfg.task!r} does not generate datasets")
    return written


def cmd_run(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Full sweep: train, evaluate every metric on every shift, score."""
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.task == "prop1-sweep":
        return _cmd_prop1(cfg, out_dir)
    if cfg.task == "toy-linear":
        with _stage("toy-sweep"):
            records = _toy_records(cfg)
    elif cfg.task == "mlp-shift":
        with _stage("generate-data"):
            train = _blob_split(cfg, cfg.data.n_train, split=0)
            val = _blob_split(cfg, cfg.data.m_test, split=1)
            clean = _blob_split(cfg, cfg.data.m_test, split=2)
            datasets = _corruption_datasets(cfg, clean)
        with _stage("train-models"):
            fitted = _fit_models(cfg, train, val)
        with _stage("metric-sweep"):
            records = _evaluate_nonlinear(cfg, fitted, datasets)
    else:
        raise ConfigError(f"'run' does not handle task {cfg.task!r}; use the stress command")

    with _stage("score"):
        write_records(records, out_dir / "records.csv")
        doc = _run_report_json(cfg, records)
        (out_dir / "report.json").write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return doc


def _cmd_prop1(cfg: ExperimentConfig, out_dir: Path) -> dict:
    reports = []
    with _stage("prop1-sweep"):
        p = cfg.prop1
        for i in range(p.instances):
            k = 1 + (i % p.k_max)
            profile = "power-law" if i % 2 == 0 else "flat"
            seed_i = derive_seed(cfg.seed, 60, i)
            task = theory.construct_instance(
                k, p.n, p.m, p.d, seed=seed_i, tail_profile=profile, decay=p.decay
            )
            rep = theory.verify_prop1(task, k)
            entry = rep.to_dict()
            entry.update({"instance": i, "seed": seed_i, "tail_profile": profile})
            entry["norm_gap"] = theory.check_norm_assumption(task)
            # diagnostics, no claim attached: on a flat (degenerate) spectrum the
            # computed top-k eigenvectors are an arbitrary basis of the eigenspace
            train_eig = covariance_eig(task.x, top_k=p.n)
            test_eig = covariance_eig(task.x_tilde, top_k=p.m)
            gap, overlap = theory.check_spectral_assumption(train_eig, test_eig, k)
            entry["shared_gap"] = gap
            entry["cross_overlap"] = overlap
            reports.append(entry)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "task": cfg.task,
        "seed": cfg.seed,
        "bound_reports": reports,
        "all_hold": all(r["holds"] for r in reports),
    }
    with _stage("score"):
        (out_dir / "report.json").write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return doc


def cmd_stress(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Calibrate on corruptions, stress on adversarially perturbed test sets."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with _stage("generate-data"):
        train = _blob_split(cfg, cfg.data.n_train, split=0)
        val = _blob_split(cfg, cfg.data.m_test, split=1)
        clean = _blob_split(cfg, cfg.data.m_test, split=2)
        corruption_sets = _corruption_datasets(cfg, clean)
    with _stage("train-models"):
        fitted = _fit_models(cfg, train, val)
    with _stage("metric-sweep"):
        corruption_records = _evaluate_nonlinear(cfg, fitted, corruption_sets)

    with _stage("adversarial-sweep"):
        def oracle(features, labels):
            ds = LabeledDataset(features, labels, clean.num_classes)
            return input_gradients(fitted.theta_hat, ds)

        adv_sets = []
        for eps in cfg.stress.epsilons:
            spec = AttackSpec(
                epsilon=float(eps),
                steps=cfg.stress.steps,
                step_size=cfg.stress.step_size or None,
            )
            attacked = pgd_attack(oracle, clean, spec)
            adv_sets.append((f"adversarial-eps{eps:g}", "adversarial", float(eps), attacked))
        adv_records = _evaluate_nonlinear(cfg, fitted, adv_sets)

    with _stage("calibrate"):
        calibrated: dict[str, list[float]] = {}
        cal_mse: dict[str, float] = {}
        for name in cfg.metric_names:
            fit_recs = [r for r in corruption_records if r.method == name]
            apply_recs = [r for r in adv_records if r.method == name]
            predicted, mse = calibrate_and_predict(fit_recs, apply_recs)
            calibrated[name] = [float(v) for v in predicted]
            cal_mse[name] = mse
        truth = [r.true_error for r in adv_records if r.method == cfg.metric_names[0]]

    with _stage("score"):
        write_records(corruption_records + adv_records, out_dir / "records.csv")
        doc = {
            "schema_version": SCHEMA_VERSION,
            "task": cfg.task,
            "seed": cfg.seed,
            "epsilons": list(cfg.stress.epsilons),
            "true_error": truth,
            "calibrated": calibrated,
            "calibration_mse": cal_mse,
            "corruption_fit": _method_reports(corruption_records)[0],
        }
        (out_dir / "stress.json").write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        lines = ["epsilon,true_error," + ",".join(cfg.metric_names)]
        for i, eps in enumerate(cfg.stress.epsilons):
            cells = [f"{eps:g}", f"{truth[i]:.9g}"]
            cells += [f"{calibrated[name][i]:.9g}" for name in cfg.metric_names]
            lines.append(",".join(cells))
        (out_dir / "stress.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return doc


def _format_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(cell)) for cell in col) for col in zip(header, *rows)]
    def fmt(row):
        return "  ".join(str(cell).ljust(w) for cell, w in zip(row, widths)).rstrip()
    sep = "  ".join("-" * w for w in widths)
    return "\n".join([fmt(header), sep] + [fmt(r) for r in rows])


def cmd_report(records_path, out_dir: Path | None = None) -> str:
    """Render prediction-quality and residual-correlation tables."""
    with _stage("read-records"):
        records = read_records(records_path)

    with _stage("render"):
        methods = sorted({r.method for r in records})
        families = sorted({r.family for r in records})
        by_method = {
            m: sorted((r for r in records if r.method == m), key=lambda r: r.dataset_id)
            for m in methods
        }

        def cell(recs):
            try:
                rep = fit_eval(recs)
            except ValueError:
                return "--"
            return f"{rep.r_squared:.3f}/{rep.spearman_rho:.3f}"

        rows = []
        for m in methods:
            row = [m]
            for fam in families:
                row.append(cell([r for r in by_method[m] if r.family == fam]))
            row.append(cell(by_method[m]))
            rows.append(row)
        table1 = _format_table(["method"] + families + ["overall"], rows)

        reports = []
        for m in methods:
            try:
                reports.append(fit_eval(by_method[m]))
            except ValueError:
                pass
        parts = ["Prediction performance (R^2/rho)", table1]
        if len(reports) >= 2:
            try:
                corr = residual_correlation(reports)
            except ValueError as exc:
                parts += ["", f"Residual correlation unavailable: {exc}"]
            else:
                names = [rep.method for rep in reports]
                rows2 = [
                    [names[i]] + [f"{corr[i, j]:+.2f}" for j in range(len(names))]
                    for i in range(len(names))
                ]
                parts += ["", "Residual correlation", _format_table(["method"] + names, rows2)]
        text = "\n".join(parts) + "\n"

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text(text, encoding="utf-8")
    return text


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodpredict",
        description="Predict out-of-distribution test error from unlabeled samples.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("gen-data", "write the configured shift datasets as CSV"),
        ("run", "train, sweep metrics over shifts, and score predictions"),
        ("stress", "calibrate on corruptions and stress on adversarial shifts"),
    ):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", required=True, help="TOML experiment config")
        p.add_argument("--out", help="output directory (default: out_dir from the config)")
        p.add_argument("--seed", type=int, help="override the config seed")
    rep = sub.add_parser("report", help="render tables from a records CSV")
    rep.add_argument("--records", help="records CSV (default: <out_dir>/records.csv)")
    rep.add_argument("--config", help="config used to locate the records file")
    rep.add_argument("--out", help="directory for report.txt (default: print only)")
    rep.add_argument("--seed", type=int, help="unused; accepted for interface uniformity")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else None
        if cfg is not None:
            if args.seed is not None:
                if args.seed < 0:
                    raise ConfigError("seed must be nonnegative")
                cfg = replace(cfg, seed=args.seed)
            if args.out:
                cfg = replace(cfg, out_dir=args.out)
        if args.command == "report":
            records_path = args.records
            if records_path is None:
                if cfg is None:
                    raise ConfigError("report needs --records or --config")
                records_path = Path(cfg.out_dir) / "records.csv"
        else:
            if cfg is None:
                raise ConfigError(f"{args.command} requires --config")
            if args.command == "stress" and cfg.task != "stress-test":
                raise ConfigError(f"stress command needs task 'stress-test', got {cfg.task!r}")
            if args.command == "run" and cfg.task == "stress-test":
                raise ConfigError("task 'stress-test' runs through the stress command")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "gen-data":
            written = cmd_gen_data(cfg, Path(cfg.out_dir))
            print(f"wrote {len(written)} dataset files under {cfg.out_dir}")
        elif args.command == "run":
            cmd_run(cfg, Path(cfg.out_dir))
            print(f"wrote records and report under {cfg.out_dir}")
        elif args.command == "stress":
            cmd_stress(cfg, Path(cfg.out_dir))
            print(f"wrote stress table and records under {cfg.out_dir}")
        else:
            out = Path(args.out) if args.out else None
            print(cmd_report(records_path, out), end="")
    except StageError as exc:
        print(f"error in stage '{exc.stage}': {exc.cause}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # defensive: unexpected failure still exits 3
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
