import dataclasses
import math
import unittest

import numpy as np

from tnkf.baselines import model_from_alpha
from tnkf.data import CLASSIFICATION, Centering, center, gen_noisy_sinc
from tnkf.dual import DualProblem, posterior_dense, solve_dense_bordered, solve_dense_direct
from tnkf.errors import InvalidArgument
from tnkf.kalman import TNKFConfig, tnkf_train
from tnkf.kernels import KernelSpec, kernel_matrix, kernel_vector
from tnkf.predict import (
    Diagnostics,
    TrainedModel,
    classify,
    metric_confidence,
    metric_decisive,
    metric_fit,
    metric_labeled,
    metric_rmse,
    predict_batch,
    predict_mean,
    predict_variance,
    sign,
    summarize,
)
from tnkf.tt import TruncationPolicy, TTVector, tt_full, tt_rank1_diag, tt_zeros


def point_model(x, weight, variance=0.0, sigma_r2=1.0, kernel=KernelSpec.linear(), y_mean=0.0):
    """A model with one training point `x`, dual weight `weight` and covariance `variance`."""
    return TrainedModel(
        kernel=kernel,
        X_train=np.array([x], dtype=float),
        dims=(1,),
        m=TTVector((np.full((1, 1, 1), weight),)),
        P=tt_rank1_diag(variance, (1,)),
        sigma_r2=sigma_r2,
        gamma=1.0,
        centering=Centering(y_mean),
    )


def random_problem(N, seed=0):
    rng = np.random.default_rng(seed)
    return DualProblem(
        X=rng.uniform(size=(N, 2)),
        y=rng.standard_normal(N),
        gamma=1.0,
        kernel=KernelSpec.rbf(1.0),
        sigma_r2=0.1,
        sigma_e2=1.0,
    )


class TestTrainedModel(unittest.TestCase):
    def test_invalid(self):
        with self.assertRaises(InvalidArgument):
            TrainedModel(KernelSpec.linear(), np.zeros((4, 1)), (2, 2), tt_zeros((4,)), tt_rank1_diag(1.0, (2, 2)), 1.0, 1.0)
        with self.assertRaises(InvalidArgument):
            TrainedModel(KernelSpec.linear(), np.zeros((3, 1)), (2, 2), tt_zeros((2, 2)), tt_rank1_diag(1.0, (2, 2)), 1.0, 1.0)
        with self.assertRaises(InvalidArgument):
            predict_mean(point_model([1.0, 2.0], 1.0), [1.0])


class TestMean(unittest.TestCase):
    def test_single_point(self):
        model = point_model([1.0, 2.0], 1.0)
        self.assertEqual(predict_mean(model, [1.0, 2.0]), 5.0)

    def test_zero_weights(self):
        model = TrainedModel(
            KernelSpec.rbf(1.0), np.arange(4.0).reshape(-1, 1), (2, 2), tt_zeros((2, 2)),
            tt_rank1_diag(1.0, (2, 2)), 1.0, 1.0, centering=Centering(2.5),
        )
        for x in [[0.0], [1.7], [-30.0]]:
            with self.subTest(x=x):
                self.assertEqual(predict_mean(model, x), 2.5)

    def test_dense_oracle(self):
        problem = random_problem(16)
        alpha = solve_dense_direct(problem)
        X_test = np.random.default_rng(1).uniform(size=(10, 2))
        for policy in [TruncationPolicy.exact(), TruncationPolicy.relative(1e-12)]:
            model = dataclasses.replace(model_from_alpha(problem, alpha), policy_yt=policy)
            for x in X_test:
                with self.subTest(policy=str(policy), x=x):
                    expected = kernel_vector(problem.kernel, problem.X, x) @ alpha
                    self.assertAlmostEqual(predict_mean(model, x), expected, delta=1e-8)

    def test_feature_centering(self):
        model = TrainedModel(
            KernelSpec.linear(), np.array([[1.0]]), (1,), TTVector((np.ones((1, 1, 1)),)),
            tt_rank1_diag(0.0, (1,)), 1.0, 1.0, centering=Centering(10.0, (3.0,)),
        )
        # (5 - 3) * 1 * 1 + 10
        self.assertEqual(predict_mean(model, [5.0]), 12.0)

    def test_bordered_solution(self):
        # Points on a regular polygon make the row sums of C equal, so centering loses nothing.
        N = 16
        t = 2 * np.pi * np.arange(N) / N
        X = np.column_stack([np.cos(t), np.sin(t)])
        y = np.random.default_rng(2).standard_normal(N) + 1.5
        kwargs = dict(X=X, gamma=2.0, kernel=KernelSpec.rbf(0.5), sigma_r2=1.0)
        b, alpha = solve_dense_bordered(DualProblem(y=y, **kwargs))
        centered = DualProblem(y=y - y.mean(), **kwargs)
        model = model_from_alpha(centered, solve_dense_direct(centered), Centering(float(y.mean())))
        bordered = kernel_matrix(centered.kernel, X) @ alpha + b
        for k in range(N):
            with self.subTest(k=k):
                self.assertAlmostEqual(predict_mean(model, X[k]), bordered[k], delta=1e-6)


class TestVariance(unittest.TestCase):
    def test_zero_covariance(self):
        model = point_model([1.0], 1.0, variance=0.0, sigma_r2=0.3)
        self.assertAlmostEqual(predict_variance(model, [4.0]), 0.3, places=15)

    def test_identity_covariance(self):
        model = TrainedModel(
            KernelSpec.linear(), np.ones((4, 1)), (2, 2), tt_zeros((2, 2)), tt_rank1_diag(1.0, (2, 2)), 1.0, 1.0
        )
        self.assertAlmostEqual(predict_variance(model, [1.0]), 5.0, places=12)

    def test_dense_oracle(self):
        problem = random_problem(16, seed=3)
        model = tnkf_train(problem, TNKFConfig.for_problem(problem))
        m, P = tt_full(model.m), tt_full(model.P)
        batch_m, batch_P = posterior_dense(problem)
        for x in np.random.default_rng(4).uniform(size=(8, 2)):
            c = kernel_vector(problem.kernel, problem.X, x)
            with self.subTest(x=x):
                self.assertAlmostEqual(predict_mean(model, x), c @ m, delta=1e-8)
                self.assertAlmostEqual(predict_variance(model, x), c @ P @ c + problem.sigma_r2, delta=1e-8)
                self.assertAlmostEqual(predict_mean(model, x), c @ batch_m, delta=1e-5)
                self.assertAlmostEqual(predict_variance(model, x), c @ batch_P @ c + problem.sigma_r2, delta=1e-5)
                self.assertGreaterEqual(predict_variance(model, x), problem.sigma_r2)

    def test_no_confidence(self):
        problem = random_problem(8)
        model = model_from_alpha(problem, solve_dense_direct(problem))
        self.assertTrue(math.isnan(predict_variance(model, [0.5, 0.5])))
        result = predict_batch(model, problem.X)
        self.assertTrue(np.isnan(result.sigma).all())
        self.assertIsNone(metric_confidence(problem.y, result.mean, result.sigma))

    def test_clamp(self):
        model = TrainedModel(
            KernelSpec.linear(), np.ones((4, 1)), (2, 2), tt_zeros((2, 2)), tt_rank1_diag(-1.0, (2, 2)), 0.5, 1.0
        )
        diagnostics = Diagnostics()
        with self.assertLogs("tnkf.predict", "WARNING"):
            self.assertEqual(predict_variance(model, [1.0], diagnostics), 0.5)
        self.assertEqual(diagnostics.clamped, 1)
        with self.assertLogs("tnkf.predict", "WARNING"):
            result = predict_batch(model, np.ones((3, 1)), workers=2)
        self.assertEqual(result.clamped, 3)
        np.testing.assert_allclose(result.sigma, math.sqrt(0.5))


class TestClassify(unittest.TestCase):
    examples = [
        # weight, sigma_r2, label, confident
        (0.9, 0.01, 1.0, True),
        (0.1, 0.04, 1.0, False),
        (-0.9, 0.01, -1.0, True),
        (0.0, 0.01, 1.0, False),
    ]

    def test_examples(self):
        for weight, sigma_r2, label, confident in self.examples:
            with self.subTest(weight=weight, sigma_r2=sigma_r2):
                result = classify(point_model([1.0], weight, sigma_r2=sigma_r2), [1.0])
                self.assertEqual(result.label, label)
                self.assertIs(result.confident, confident)
                self.assertAlmostEqual(result.mean, weight)
                self.assertAlmostEqual(result.sigma, math.sqrt(sigma_r2))

    def test_sign(self):
        np.testing.assert_array_equal(sign([0.0, -0.0, -1e-300, 2.0]), [1.0, 1.0, -1.0, 1.0])

    def test_label_matches_mean(self):
        problem = random_problem(16, seed=5)
        model = tnkf_train(problem, TNKFConfig.for_problem(problem))
        for x in np.random.default_rng(6).uniform(size=(20, 2)):
            with self.subTest(x=x):
                self.assertEqual(classify(model, x).label, sign(predict_mean(model, x)))


class TestBatch(unittest.TestCase):
    def test_workers(self):
        problem = random_problem(16, seed=7)
        model = tnkf_train(problem, TNKFConfig.for_problem(problem, policy_yt=TruncationPolicy.relative(1e-6)))
        X = np.random.default_rng(8).uniform(size=(12, 2))
        serial = predict_batch(model, X)
        threaded = predict_batch(model, X, workers=4)
        np.testing.assert_array_equal(serial.mean, threaded.mean)
        np.testing.assert_array_equal(serial.sigma, threaded.sigma)
        np.testing.assert_array_equal(serial.lower, serial.mean - 3 * serial.sigma)
        np.testing.assert_array_equal(serial.upper, serial.mean + 3 * serial.sigma)
        self.assertEqual(serial.clamped, 0)

    def test_sinc_coverage(self):
        train = center(gen_noisy_sinc(64, seed=0))
        test = gen_noisy_sinc(50, seed=1, low=-4.9, high=4.9)
        problem = DualProblem(train.X, train.y, gamma=10.0, kernel=KernelSpec.rbf(0.5), sigma_r2=0.05, sigma_e2=0.01)
        model = tnkf_train(problem, TNKFConfig.for_problem(problem), centering=train.centering)
        result = predict_batch(model, test.X)
        self.assertGreaterEqual(metric_confidence(test.y, result.mean, result.sigma), 99.0)
        self.assertTrue(np.all(result.sigma ** 2 >= problem.sigma_r2 * (1 - 1e-12)))


class TestMetrics(unittest.TestCase):
    def test_exact(self):
        y = [1.0, 2.0]
        self.assertEqual(metric_rmse(y, y), 0.0)
        self.assertEqual(metric_fit(y, y), 100.0)
        self.assertEqual(metric_labeled(y, y), 100.0)

    def test_examples(self):
        self.assertEqual(metric_labeled([1.0, -1.0], [1.0, 1.0]), 50.0)
        self.assertEqual(metric_labeled([1.0, -1.0, 1.0, -1.0], [0.0, -0.0, -2.0, -3.0]), 50.0)
        self.assertAlmostEqual(metric_rmse([0.0, 0.0], [3.0, 4.0]), math.sqrt(12.5))
        # ‖y - ŷ‖ = 1, ‖y - mean(ŷ)‖ = ‖(-0.5, 1.5)‖
        self.assertAlmostEqual(metric_fit([0.0, 2.0], [0.0, 1.0]), 100 * (1 - 1 / math.sqrt(2.5)))
        self.assertIsNone(metric_fit([1.0, 1.0], [1.0, 1.0]))
        self.assertAlmostEqual(metric_confidence([0.0, 1.0, 5.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]), 200 / 3)
        self.assertEqual(metric_decisive([1.0, -1.0], [1.0, -1.0], [0.1, 1.0]), 50.0)
        self.assertIsNone(metric_decisive([1.0], [1.0], [math.nan]))

    def test_invalid(self):
        for args in [([], []), ([1.0, 2.0], [1.0])]:
            with self.subTest(args):
                with self.assertRaises(InvalidArgument):
                    metric_rmse(*args)

    def test_summarize(self):
        problem = random_problem(8)
        model = tnkf_train(problem, TNKFConfig.for_problem(problem))
        result = predict_batch(model, problem.X)
        self.assertEqual(list(summarize("regression", problem.y, result)), ["rmse", "fit", "confidence"])
        labels = sign(problem.y)
        self.assertEqual(list(summarize(CLASSIFICATION, labels, result)), ["labeled", "confidence", "decisive"])


if __name__ == "__main__":
    unittest.main()
