"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines as the
criteria execute.
"""

import time

import numpy as np
import pytest

from oodpredict import cli
from oodpredict.data import gen_blobs
from oodpredict.evaluation import (
    PredictionRecord,
    ensemble_zscore,
    fit_eval,
    midranks,
    residual_correlation,
    spearman_rho,
)
from oodpredict.metrics import (
    ProjNormConfig,
    agree_score,
    atc_fit,
    atc_score,
    conf_score,
    entropy_score,
    proj_norm,
    proj_norm_linear,
    reference_subsample_indices,
)
from oodpredict.models import (
    Architecture,
    ParamVector,
    TrainConfig,
    init_model,
    input_gradients,
    linearized_features,
    param_distance,
    predict_logits,
    softmax,
    test_error as error_fraction,
    train_sgd,
)
from oodpredict.numerics import min_norm_solve, project, row_space_projector
from oodpredict.theory import SyntheticLinearTask, construct_instance, verify_prop1
from oodpredict.theory import test_loss as mean_test_loss


class criterion:
    """Prints '[acceptance N] name: PASS|FAIL' around a block of assertions."""

    def __init__(self, number, name):
        self.number = number
        self.name = name

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    @property
    def elapsed(self):
        return time.perf_counter() - self.start

    def __exit__(self, exc_type, exc, tb):
        verdict = "PASS" if exc_type is None else "FAIL"
        print(f"[acceptance {self.number}] {self.name}: {verdict} ({self.elapsed:.1f}s)")
        return False


def test_criterion_1_toy_reproduction():
    with criterion(1, "toy covariate-shift reproduction") as c:
        cfg = cli.ExperimentConfig(
            task="toy-linear", seed=0, data=cli.DataSettings(n_train=500, m_test=500)
        )
        records = cli._toy_records(cfg)
        sigmas = sorted({r.severity for r in records})
        assert sigmas == [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0]
        errors = [r.true_error for r in records if r.method == "proj-norm-linear"]
        pnl = [r.prediction for r in records if r.method == "proj-norm-linear"]
        conf = [r.prediction for r in records if r.method == "conf-score"]
        assert spearman_rho(sigmas, errors) >= 0.9
        assert spearman_rho(pnl, errors) >= 0.9
        assert len(set(conf)) == 1  # bit-identical across every sigma
        assert c.elapsed <= 60.0


def test_criterion_2_bound_certificate_sweep():
    with criterion(2, "eigenvalue sandwich holds on 100 constructed instances") as c:
        checked = 0
        for i in range(100):
            k = 1 + (i % 10)
            n = 20 + (i % 5) * 10   # 20..60
            m = 25 + (i % 4) * 10   # 25..55
            d = 128 + (i % 3) * 64  # 128..256
            profile = "power-law" if i % 2 == 0 else "flat"
            task = construct_instance(k, n, m, d, seed=1000 + i, tail_profile=profile)
            report = verify_prop1(task, k)
            assert report.ratio_defined
            assert report.holds, f"instance {i}: ratio {report.ratio} outside the sandwich"
            if profile == "flat":
                lam_over_m = report.lambda_m / m
                assert report.ratio == pytest.approx(lam_over_m, rel=1e-8)
            checked += 1
        assert checked == 100
        assert c.elapsed <= 30.0


def test_criterion_3_oracle_equivalences():
    with criterion(3, "independent-oracle equivalences") as c:
        rng = np.random.default_rng(42)
        # linear projection norm vs the dense projection-matrix oracle
        for _ in range(50):
            x = rng.standard_normal((20, 100))
            y = rng.standard_normal(20)
            xt = rng.standard_normal((20, 100))
            theta = min_norm_solve(x, y)
            dense = xt.T @ np.linalg.solve(xt @ xt.T, xt)
            oracle = np.linalg.norm(theta - dense @ theta)
            assert abs(proj_norm_linear(x, y, xt) - oracle) <= 1e-8

        # minimum-norm solve vs gradient descent from the zero vector
        for i in range(20):
            n = 3 + i % 4
            d = 8 + (i * 3) % 13
            x = rng.standard_normal((n, d))
            y = rng.standard_normal(n)
            theta = min_norm_solve(x, y)
            lr = 1.0 / np.linalg.norm(x, 2) ** 2
            gd = np.zeros(d)
            for _ in range(200_000):
                grad = x.T @ (x @ gd - y)
                gd -= lr * grad
                if np.linalg.norm(grad) < 1e-12:
                    break
            assert np.max(np.abs(theta - gd)) <= 1e-4

        # the two closed forms of the linear test loss
        for _ in range(50):
            task = SyntheticLinearTask(
                x=rng.standard_normal((8, 40)),
                x_tilde=rng.standard_normal((10, 40)),
                theta_star=rng.standard_normal(40),
            )
            direct = mean_test_loss(task)
            p = row_space_projector(task.x)
            residual = task.theta_star - project(p, task.theta_star)
            alt = float(np.sum((task.x_tilde @ residual) ** 2) / task.x_tilde.shape[0])
            assert abs(direct - alt) <= 1e-8 * max(direct, alt)
        assert c.elapsed <= 120.0


def test_criterion_4_nonlinear_ranking_and_fixed_point():
    with criterion(4, "pseudo-label retraining ranks corruption severity") as c:
        cfg = cli.ExperimentConfig(
            task="mlp-shift",
            seed=0,
            projnorm=cli.ProjNormSettings(steps=800, learning_rate=0.02),
        )
        assert cfg.data.n_train == 4000 and cfg.data.m_test == 2000
        assert [s.name for s in cfg.shifts] == ["noise", "scale", "dropout"]
        assert all(len(s.severities) == 5 for s in cfg.shifts)
        train = cli._blob_split(cfg, cfg.data.n_train, split=0)
        val = cli._blob_split(cfg, cfg.data.m_test, split=1)
        clean = cli._blob_split(cfg, cfg.data.m_test, split=2)
        datasets = cli._corruption_datasets(cfg, clean)
        fitted = cli._fit_models(cfg, train, val)
        records = cli._evaluate_nonlinear(cfg, fitted, datasets)
        pn_records = [r for r in records if r.method == "proj-norm"]
        assert len(pn_records) == 15
        rho = spearman_rho(
            [r.prediction for r in pn_records], [r.true_error for r in pn_records]
        )
        assert rho >= 0.8

        # fixed point: test set == the seeded reference subsample of a training
        # set the model interpolates, with shared seeds on both fine-tunings
        fp_train = gen_blobs(120, 4, 3, seed=3, spread=0.4)
        arch = Architecture("linear-softmax", 4, 3)
        theta0 = init_model(arch, 5)
        theta_hat = train_sgd(
            theta0, fp_train, TrainConfig(steps=1200, learning_rate=0.2, batch_size=16, seed=1)
        )
        assert error_fraction(theta_hat, fp_train) == 0.0
        m_ref, sub_seed = 40, 77
        idx = reference_subsample_indices(fp_train.n, m_ref, sub_seed)
        pn_cfg = ProjNormConfig(
            train_cfg=TrainConfig(steps=60, learning_rate=0.1, batch_size=8, momentum=0.9, seed=2),
            ref_subsample=m_ref,
            seed=sub_seed,
        )
        run = proj_norm(theta0, theta_hat, fp_train, fp_train.features[idx], pn_cfg)
        assert run.value == 0.0
        assert c.elapsed <= 600.0


def test_criterion_5_atc_self_consistency():
    with criterion(5, "fitted threshold reproduces validation error exactly") as c:
        def brute_force_threshold(scores, err_count):
            ordered = np.sort(scores)
            candidates = [ordered[0] - 1.0, ordered[-1] + 1.0]
            candidates += [(a + b) / 2 for a, b in zip(ordered, ordered[1:])]
            for t in candidates:
                if int(np.sum(scores < t)) == err_count:
                    return t
            raise AssertionError("no threshold reproduces the count")

        for seed in range(20):
            rng = np.random.default_rng(seed)
            n, k = 40 + seed, 3 + seed % 3
            logits = rng.standard_normal((n, k)) * rng.uniform(0.5, 2.5)
            labels = rng.integers(0, k, n)
            state = atc_fit(logits, labels)
            p = softmax(logits)
            scores = np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=1)
            err_count = int(np.sum(np.argmax(logits, axis=1) != labels))
            assert int(np.sum(scores < state.threshold)) == err_count
            assert state.threshold == pytest.approx(
                brute_force_threshold(scores, err_count)
            )
            assert atc_score(logits, state) == pytest.approx(err_count / n, abs=1e-12)


def test_criterion_6_adversarial_stress_shape(tmp_path):
    with criterion(6, "adversarial stress saturates logit metrics, not retraining") as c:
        cfg = cli.ExperimentConfig(
            task="stress-test",
            seed=0,
            architecture=cli.Architecture("linear-softmax", 20, 4),
            projnorm=cli.ProjNormSettings(steps=800, learning_rate=0.02),
        )
        assert cfg.stress.epsilons == (0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
        doc = cli.cmd_stress(cfg, tmp_path)
        truth = doc["true_error"]
        assert truth[-1] >= 0.95
        logit_metrics = ("conf-score", "entropy", "agree-score", "atc")
        for name in logit_metrics:
            assert doc["calibrated"][name][-1] <= 0.5
        pn_final = doc["calibrated"]["proj-norm"][-1]
        for name in logit_metrics:
            assert pn_final > doc["calibrated"][name][-1]
        assert c.elapsed <= 600.0


def test_criterion_7_evaluation_harness_oracles():
    with criterion(7, "evaluation harness matches hand-computed formulas") as c:
        preds = [0.3, 1.2, 0.7, 2.0, 1.5]
        errs = [0.10, 0.35, 0.20, 0.80, 0.50]
        records = [
            PredictionRecord(f"d{i}", "f", float(i), "m", p, e)
            for i, (p, e) in enumerate(zip(preds, errs))
        ]
        rep = fit_eval(records)
        x, y = np.array(preds), np.array(errs)
        slope = np.sum((x - x.mean()) * (y - y.mean())) / np.sum((x - x.mean()) ** 2)
        intercept = y.mean() - slope * x.mean()
        res = y - slope * x - intercept
        r2 = 1 - np.sum(res**2) / np.sum((y - y.mean()) ** 2)
        rx, ry = midranks(x), midranks(y)
        rho = np.sum((rx - rx.mean()) * (ry - ry.mean())) / np.sqrt(
            np.sum((rx - rx.mean()) ** 2) * np.sum((ry - ry.mean()) ** 2)
        )
        assert rep.r_squared == pytest.approx(r2, abs=1e-10)
        assert rep.spearman_rho == pytest.approx(rho, abs=1e-10)

        rng = np.random.default_rng(1)
        reports = []
        for name in ("a", "b", "c"):
            p2 = rng.uniform(0, 1, 8)
            e2 = np.clip(0.5 * p2 + rng.normal(0, 0.1, 8), 0, 1)
            reports.append(
                fit_eval(
                    [
                        PredictionRecord(f"d{i}", "f", float(i), name, float(pp), float(ee))
                        for i, (pp, ee) in enumerate(zip(p2, e2))
                    ]
                )
            )
        corr = residual_correlation(reports)
        assert np.array_equal(corr, corr.T)
        assert np.all(np.diag(corr) == 1.0)

        a, b = rng.standard_normal(12), rng.standard_normal(12)
        base = ensemble_zscore(a, b)
        rescaled = ensemble_zscore(3.0 * a + 7.0, 0.25 * b - 2.0)
        np.testing.assert_allclose(rescaled, base, atol=1e-12)
        assert np.array_equal(np.argsort(rescaled), np.argsort(base))


def test_criterion_8_metric_invariant_suite():
    with criterion(8, "metric invariants and gradient checks") as c:
        rng = np.random.default_rng(3)

        # logit-shift invariance at 1e-12
        logits = rng.standard_normal((9, 5))
        shift = rng.standard_normal((9, 1))
        state = atc_fit(logits, rng.integers(0, 5, 9))
        assert abs(conf_score(logits) - conf_score(logits + shift)) <= 1e-12
        assert abs(entropy_score(logits) - entropy_score(logits + shift)) <= 1e-12
        assert agree_score(logits, logits + shift) == 0.0
        assert abs(atc_score(logits, state) - atc_score(logits + shift, state)) <= 1e-12

        # uniform-logit closed forms
        for k in (2, 3, 10):
            assert abs(entropy_score(np.zeros((4, k))) - np.log(k)) <= 1e-12
            assert abs(conf_score(np.zeros((4, k))) - 1.0 / k) <= 1e-12

        # disagreement fractions are exact multiples of 1/n
        a = rng.standard_normal((16, 3))
        b = rng.standard_normal((16, 3))
        assert (agree_score(a, b) * 16) == int(round(agree_score(a, b) * 16))

        # parameter-distance metric axioms
        arch = Architecture("mlp", 5, 3, hidden=(7,))
        t1, t2, t3 = (init_model(arch, s) for s in (1, 2, 3))
        assert param_distance(t1, t1) == 0.0
        assert param_distance(t1, t2) == param_distance(t2, t1)
        assert param_distance(t1, t3) <= param_distance(t1, t2) + param_distance(t2, t3) + 1e-12

        # central finite differences at relative 1e-4: parameter-space head
        # gradients and input-space loss gradients, both architectures
        for arch in (
            Architecture("linear-softmax", 4, 3),
            Architecture("mlp", 4, 3, hidden=(6,), activation="tanh"),
        ):
            theta = init_model(arch, 7)
            data = gen_blobs(4, 4, 3, seed=8)
            feats = linearized_features(theta, data.features)
            grads = input_gradients(theta, data)
            eps = 1e-3
            probe_rng = np.random.default_rng(9)
            for _ in range(20):
                i = int(probe_rng.integers(0, data.n))
                j = int(probe_rng.integers(0, arch.param_count))
                plus, minus = theta.values.copy(), theta.values.copy()
                plus[j] += eps
                minus[j] -= eps
                gp = predict_logits(ParamVector(arch, plus), data.features[i : i + 1]).mean()
                gm = predict_logits(ParamVector(arch, minus), data.features[i : i + 1]).mean()
                fd = (gp - gm) / (2 * eps)
                assert abs(fd - feats[i, j]) <= 1e-4 * max(1.0, abs(feats[i, j]))
            for _ in range(20):
                i = int(probe_rng.integers(0, data.n))
                j = int(probe_rng.integers(0, data.dim))
                fplus = data.features.copy()
                fminus = data.features.copy()
                fplus[i, j] += eps
                fminus[i, j] -= eps

                def point_loss(features):
                    lg = predict_logits(theta, features[i : i + 1])
                    p = softmax(lg)
                    return -np.log(p[0, data.labels[i]])

                fd = (point_loss(fplus) - point_loss(fminus)) / (2 * eps)
                assert abs(fd - grads[i, j]) <= 1e-4 * max(1.0, abs(grads[i, j]))
