import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oodpredict.data import GaussianShiftSpec, LabeledDataset, gen_blobs, gen_gaussian_shift
from oodpredict.evaluation import spearman_rho
from oodpredict.metrics import (
    ATCState,
    ProjNormConfig,
    agree_score,
    atc_fit,
    atc_score,
    conf_score,
    entropy_score,
    proj_norm,
    proj_norm_linear,
    pseudo_label,
    reference_subsample_indices,
)
from oodpredict.models import (
    Architecture,
    ParamVector,
    TrainConfig,
    init_model,
    softmax,
    test_error as error_fraction,
    train_sgd,
)
from oodpredict.numerics import min_norm_solve


def dense_residual_projection(x_tilde, theta):
    """Oracle: ||(I - Xt^T (Xt Xt^T)^-1 Xt) theta||."""
    p = x_tilde.T @ np.linalg.solve(x_tilde @ x_tilde.T, x_tilde)
    return np.linalg.norm(theta - p @ theta)


def brute_force_atc_threshold(scores, err_count):
    """Scan every candidate threshold for one flagging exactly err_count rows."""
    ordered = np.sort(scores)
    candidates = [ordered[0] - 1.0, ordered[-1] + 1.0]
    candidates += [(a + b) / 2 for a, b in zip(ordered, ordered[1:])]
    for t in candidates:
        if int(np.sum(scores < t)) == err_count:
            return t
    raise AssertionError("no threshold reproduces the error count")


class TestPseudoLabel:
    def test_interpolating_model_reproduces_labels(self):
        data = gen_blobs(60, 3, 3, seed=1, spread=0.4)
        arch = Architecture("linear-softmax", 3, 3)
        cfg = TrainConfig(steps=800, learning_rate=0.2, batch_size=16, seed=0)
        theta = train_sgd(init_model(arch, 0), data, cfg)
        assert error_fraction(theta, data) == 0.0
        pseudo = pseudo_label(theta, data.features)
        assert np.array_equal(pseudo.labels, data.labels)

    def test_zero_parameters_label_zero(self):
        arch = Architecture("linear-softmax", 2, 3)
        theta = ParamVector(arch, np.zeros(arch.param_count))
        pseudo = pseudo_label(theta, np.random.default_rng(0).standard_normal((5, 2)))
        assert np.all(pseudo.labels == 0)

    def test_deterministic(self):
        theta = init_model(Architecture("mlp", 3, 2, hidden=(4,)), 2)
        x = np.random.default_rng(1).standard_normal((10, 3))
        assert np.array_equal(pseudo_label(theta, x).labels, pseudo_label(theta, x).labels)


class TestProjNorm:
    def test_fixed_point_is_exactly_zero(self):
        # test set == the seeded reference subsample of an interpolated train set
        train = gen_blobs(120, 4, 3, seed=3, spread=0.4)
        arch = Architecture("linear-softmax", 4, 3)
        fit_cfg = TrainConfig(steps=1200, learning_rate=0.2, batch_size=16, seed=1)
        theta0 = init_model(arch, 5)
        theta_hat = train_sgd(theta0, train, fit_cfg)
        assert error_fraction(theta_hat, train) == 0.0

        m_ref, sub_seed = 40, 77
        idx = reference_subsample_indices(train.n, m_ref, sub_seed)
        test_features = train.features[idx]
        cfg = ProjNormConfig(
            train_cfg=TrainConfig(steps=60, learning_rate=0.1, batch_size=8, momentum=0.9, seed=2),
            ref_subsample=m_ref,
            seed=sub_seed,
        )
        run = proj_norm(theta0, theta_hat, train, test_features, cfg)
        assert run.value == 0.0
        assert run.pseudo_label_agreement == 1.0

    def test_seed_determinism(self):
        train = gen_blobs(50, 3, 2, seed=6)
        test = gen_blobs(30, 3, 2, seed=6, split=1)
        arch = Architecture("mlp", 3, 2, hidden=(5,))
        theta0 = init_model(arch, 0)
        cfg = ProjNormConfig(
            train_cfg=TrainConfig(steps=40, learning_rate=0.05, batch_size=8, seed=3), seed=4
        )
        theta_hat = train_sgd(theta0, train, cfg.train_cfg)
        a = proj_norm(theta0, theta_hat, train, test.features, cfg)
        b = proj_norm(theta0, theta_hat, train, test.features, cfg)
        assert a.value == b.value
        assert a.value >= 0.0

    def test_reuse_model_mode(self):
        train = gen_blobs(50, 3, 2, seed=8)
        arch = Architecture("linear-softmax", 3, 2)
        theta0 = init_model(arch, 0)
        cfg = ProjNormConfig(
            train_cfg=TrainConfig(steps=30, learning_rate=0.05, batch_size=8, seed=3),
            ref_mode="reuse-model",
        )
        theta_hat = train_sgd(theta0, train, cfg.train_cfg)
        run = proj_norm(theta0, theta_hat, train, train.features, cfg)
        assert run.theta_ref is theta_hat

    def test_tracks_shift_severity_on_mlp(self):
        sigmas = [0.5, 1.0, 2.0, 3.0, 4.0]
        arch = Architecture("mlp", 45, 2, hidden=(16,))
        tc = TrainConfig(
            steps=300, learning_rate=0.05, batch_size=32, momentum=0.9, schedule="cosine", seed=7
        )
        theta0 = init_model(arch, 1)
        train, _ = gen_gaussian_shift(GaussianShiftSpec(d1=30, d2=15, n=400, m=400, sigma=0.5, seed=3))
        theta_hat = train_sgd(theta0, train, tc)
        cfg = ProjNormConfig(train_cfg=tc, seed=9)
        values = []
        for sigma in sigmas:
            _, test = gen_gaussian_shift(
                GaussianShiftSpec(d1=30, d2=15, n=400, m=400, sigma=sigma, seed=3)
            )
            values.append(proj_norm(theta0, theta_hat, train, test.features, cfg).value)
        assert spearman_rho(values, sigmas) >= 0.8

    def test_subsample_too_large(self):
        train = gen_blobs(10, 3, 2, seed=1)
        arch = Architecture("linear-softmax", 3, 2)
        theta0 = init_model(arch, 0)
        cfg = ProjNormConfig(
            train_cfg=TrainConfig(steps=5, learning_rate=0.1, batch_size=4), ref_subsample=20
        )
        with pytest.raises(ValueError, match="subsample"):
            proj_norm(theta0, theta0, train, train.features, cfg)


class TestProjNormLinear:
    def test_same_test_set_gives_zero(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((5, 12))
        y = rng.standard_normal(5)
        assert proj_norm_linear(x, y, x) <= 1e-10

    def test_orthogonal_spans(self):
        assert proj_norm_linear([[1.0, 0.0, 0.0]], [1.0], [[0.0, 1.0, 0.0]]) == pytest.approx(1.0)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            x = rng.standard_normal((20, 100))
            y = rng.standard_normal(20)
            xt = rng.standard_normal((20, 100))
            theta = min_norm_solve(x, y)
            assert abs(proj_norm_linear(x, y, xt) - dense_residual_projection(xt, theta)) <= 1e-8

    def test_zero_when_row_space_contained(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((4, 20))
        y = rng.standard_normal(4)
        xt = np.vstack([x, rng.standard_normal((3, 20))])
        assert proj_norm_linear(x, y, xt) <= 1e-10

    def test_rejects_overdetermined(self):
        with pytest.raises(ValueError, match="regime"):
            proj_norm_linear(np.ones((5, 2)), np.ones(5), np.ones((1, 2)))


class TestLogitScores:
    def test_conf_saturated(self):
        logits = np.zeros((3, 4))
        logits[:, 2] = 1000.0
        assert conf_score(logits) == pytest.approx(1.0, abs=1e-12)

    def test_conf_uniform(self):
        assert conf_score(np.zeros((6, 5))) == pytest.approx(1 / 5, abs=1e-12)

    def test_conf_hand_average(self):
        # rows built to have softmax maxima exactly 0.7 and 0.9
        row1 = np.log([0.7, 0.3])
        row2 = np.log([0.1, 0.9])
        assert conf_score(np.vstack([row1, row2])) == pytest.approx(0.8, abs=1e-12)

    def test_entropy_uniform_is_log_k(self):
        for k in (2, 3, 7):
            assert entropy_score(np.zeros((4, k))) == pytest.approx(np.log(k), abs=1e-12)

    def test_entropy_saturated_is_zero(self):
        logits = np.zeros((2, 3))
        logits[:, 0] = 1e4
        assert entropy_score(logits) <= 1e-9

    def test_entropy_hand_average(self):
        def ent(p):
            p = np.asarray(p)
            return float(-(p * np.log(p)).sum())

        p1, p2 = [0.7, 0.3], [0.1, 0.9]
        logits = np.vstack([np.log(p1), np.log(p2)])
        assert entropy_score(logits) == pytest.approx((ent(p1) + ent(p2)) / 2, abs=1e-12)

    def test_agree_trivial(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((8, 3))
        assert agree_score(a, a) == 0.0
        # demoting every row's winner forces disagreement everywhere
        demoted = np.where(a == a.max(axis=1, keepdims=True), -1e6, a)
        assert agree_score(a, demoted) == 1.0

    def test_agree_partial(self):
        a = np.zeros((8, 2))
        a[:, 0] = 1.0
        b = a.copy()
        b[0, 1] = 2.0
        b[5, 1] = 2.0
        assert agree_score(a, b) == pytest.approx(0.25)

    def test_agree_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes"):
            agree_score(np.zeros((2, 2)), np.zeros((3, 2)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_logit_shift_invariance(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.standard_normal((7, 4))
        shift = rng.standard_normal((7, 1))
        assert abs(conf_score(logits) - conf_score(logits + shift)) <= 1e-12
        assert abs(entropy_score(logits) - entropy_score(logits + shift)) <= 1e-12
        assert agree_score(logits, logits + shift) == 0.0
        state = atc_fit(logits, rng.integers(0, 4, 7))
        assert abs(atc_score(logits, state) - atc_score(logits + shift, state)) <= 1e-12


class TestATC:
    def test_perfect_model_threshold_below_min(self):
        logits = np.array([[5.0, 0.0], [0.0, 5.0], [6.0, 0.0]])
        labels = np.array([0, 1, 0])
        state = atc_fit(logits, labels)
        scores = (softmax(logits) * np.log(softmax(logits))).sum(axis=1)
        assert state.threshold == pytest.approx(scores.min() - 1.0)
        assert atc_score(logits, state) == 0.0

    def test_all_wrong_threshold_above_max(self):
        logits = np.array([[5.0, 0.0], [5.0, 0.0]])
        labels = np.array([1, 1])
        state = atc_fit(logits, labels)
        scores = (softmax(logits) * np.log(softmax(logits))).sum(axis=1)
        assert state.threshold > scores.max()
        assert atc_score(logits, state) == 1.0

    def test_three_errors_of_ten_exact(self):
        rng = np.random.default_rng(10)
        logits = rng.standard_normal((10, 3))
        preds = np.argmax(logits, axis=1)
        labels = preds.copy()
        labels[:3] = (preds[:3] + 1) % 3  # exactly 3 errors
        state = atc_fit(logits, labels)
        scores = (softmax(logits) * np.log(softmax(logits))).sum(axis=1)
        assert int(np.sum(scores < state.threshold)) == 3
        assert state.threshold == pytest.approx(brute_force_atc_threshold(scores, 3))

    def test_self_consistency_seeded_fixtures(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            n, k = 50, 4
            logits = rng.standard_normal((n, k)) * rng.uniform(0.5, 3.0)
            labels = rng.integers(0, k, n)
            err = float(np.mean(np.argmax(logits, axis=1) != labels))
            state = atc_fit(logits, labels)
            assert atc_score(logits, state) == pytest.approx(err, abs=1e-12)

    def test_in_distribution_estimate_close(self):
        # validation and test drawn from the same population
        data = gen_blobs(10_000, 4, 3, seed=11, spread=1.6)
        arch = Architecture("linear-softmax", 4, 3)
        theta = train_sgd(
            init_model(arch, 0),
            LabeledDataset(data.features[:5000], data.labels[:5000], 3),
            TrainConfig(steps=300, learning_rate=0.1, batch_size=32, seed=1),
        )
        val = LabeledDataset(data.features[:5000], data.labels[:5000], 3)
        test = LabeledDataset(data.features[5000:], data.labels[5000:], 3)
        state = atc_fit(predict_logits_of(theta, val), val.labels)
        estimate = atc_score(predict_logits_of(theta, test), state)
        truth = error_fraction(theta, test)
        assert abs(estimate - truth) <= 0.05

    def test_state_requires_finite_threshold(self):
        with pytest.raises(ValueError, match="finite"):
            ATCState(threshold=float("nan"))


def predict_logits_of(theta, ds):
    from oodpredict.models import predict_logits

    return predict_logits(theta, ds.features)


class TestConfScoreSigmaInsensitivity:
    def test_logits_bit_identical_across_sigma(self):
        # the fitted interpolator is supported on the shared block, so test
        # logits cannot depend on how the novel block is scaled
        sigmas = (0.5, 1.0, 2.0, 4.0)
        logits_bytes = set()
        conf_values = set()
        pnl_values = []
        for sigma in sigmas:
            spec = GaussianShiftSpec(d1=40, d2=20, n=30, m=25, sigma=sigma, seed=13)
            train, test = gen_gaussian_shift(spec)
            targets = 2.0 * train.labels - 1.0
            theta = min_norm_solve(train.features, targets)
            assert np.all(theta[40:] == 0.0)
            scores = test.features @ theta
            logits_bytes.add(np.column_stack([-scores, scores]).tobytes())
            conf_values.add(conf_score(np.column_stack([-scores, scores])))
            pnl_values.append(proj_norm_linear(train.features, targets, test.features))
        assert len(logits_bytes) == 1
        assert len(conf_values) == 1
        assert len(set(np.round(pnl_values, 12))) == len(sigmas)


class TestLinearMetricOnNetworkFeatures:
    def test_tracks_shift_on_parameter_gradient_features(self):
        # run the closed-form metric on a network's linearized feature map:
        # parameter count is the ambient dimension, so n and m must not exceed it
        from oodpredict.models import linearized_features

        arch = Architecture("mlp", 35, 2, hidden=(8,))
        theta0 = init_model(arch, 2)
        train, _ = gen_gaussian_shift(
            GaussianShiftSpec(d1=25, d2=10, n=30, m=30, sigma=0.5, seed=5)
        )
        feats_train = linearized_features(theta0, train.features)
        assert feats_train.shape == (30, arch.param_count)
        targets = 2.0 * train.labels - 1.0
        values = []
        for sigma in (0.5, 1.0, 2.0, 4.0):
            _, test = gen_gaussian_shift(
                GaussianShiftSpec(d1=25, d2=10, n=30, m=30, sigma=sigma, seed=5)
            )
            values.append(
                proj_norm_linear(feats_train, targets, linearized_features(theta0, test.features))
            )
        assert all(b > a for a, b in zip(values, values[1:]))
