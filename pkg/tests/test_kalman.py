import csv
import math
import os
import tempfile
import unittest

import numpy as np

from tnkf.dual import DualProblem, posterior_dense
from tnkf.errors import CovarianceCollapse, InvalidArgument
from tnkf.kalman import (
    TRACE_COLUMNS,
    EarlyStop,
    TNKFConfig,
    TNKFState,
    TraceRecord,
    early_stop_check,
    row_order,
    tnkf_init,
    tnkf_step,
    tnkf_train,
    write_trace,
)
from tnkf.kernels import KernelSpec, row_to_tt, tensorize_dims
from tnkf.tt import TruncationPolicy, tt_full, tt_ones, tt_rank1_diag, tt_zeros


def random_problem(N, seed=0, sigma_r2=0.1, sigma_e2=1.0):
    rng = np.random.default_rng(seed)
    return DualProblem(
        X=rng.uniform(size=(N, 2)),
        y=rng.standard_normal(N),
        gamma=1.0,
        kernel=KernelSpec.rbf(1.0),
        sigma_r2=sigma_r2,
        sigma_e2=sigma_e2,
    )


def relative(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def record(k, p, delta):
    return TraceRecord(k, 0.0, 1.0, p, delta, 1, 1, 1, 0.0, 0)


class TestConfig(unittest.TestCase):
    def test_invalid(self):
        for kwargs in [
            dict(lam=0.0),
            dict(lam=1.5),
            dict(max_iterations=0),
            dict(row_order="reversed"),
            dict(sym_every=-1),
            dict(sigma_r2=0.0),
            dict(gamma=-1.0),
        ]:
            with self.subTest(kwargs):
                with self.assertRaises(InvalidArgument):
                    TNKFConfig(**{"gamma": 1.0, "sigma_r2": 1.0, **kwargs})
        with self.assertRaises(InvalidArgument):
            EarlyStop(1e-5, 5e-3, 0)

    def test_row_order(self):
        natural = TNKFConfig(gamma=1.0, sigma_r2=1.0)
        shuffled = TNKFConfig(gamma=1.0, sigma_r2=1.0, row_order="shuffle", seed=3)
        np.testing.assert_array_equal(row_order(6, natural), np.arange(6))
        order = row_order(16, shuffled)
        self.assertEqual(sorted(order), list(range(16)))
        np.testing.assert_array_equal(order, row_order(16, shuffled))


class TestInit(unittest.TestCase):
    def test_identity_prior(self):
        state = tnkf_init(4, TNKFConfig(gamma=1.0, sigma_r2=1.0, sigma_e2=1.0))
        np.testing.assert_array_equal(tt_full(state.P), np.eye(4))
        np.testing.assert_array_equal(tt_full(state.m), np.zeros(4))
        self.assertEqual(state.k, 0)
        self.assertEqual(state.p_norm, 2.0)

    def test_priors(self):
        examples = [
            (TNKFConfig(gamma=0.005, sigma_r2=0.01, sigma_e2=0.01), 2.5e-7),
            (TNKFConfig(gamma=1.0, sigma_r2=1e-5), 1e-5),
        ]
        for config, expected in examples:
            with self.subTest(config.prior):
                state = tnkf_init(16, config)
                self.assertEqual(state.P.ranks, (1, 1, 1, 1, 1))
                np.testing.assert_allclose(np.diag(tt_full(state.P)), expected, rtol=1e-12)


class TestStep(unittest.TestCase):
    examples = [
        # lambda, m, P, s
        (1.0, 0.5, 0.5, 2.0),
        (0.5, 2 / 3, 2 / 3, 3.0),
    ]

    def test_scalar(self):
        c = row_to_tt([1.0], (1,))
        for lam, m, P, s in self.examples:
            with self.subTest(lam=lam):
                config = TNKFConfig(gamma=1.0, sigma_r2=1.0, sigma_e2=1.0, lam=lam)
                state = tnkf_step(tnkf_init(1, config), c, 1.0, config)
                self.assertAlmostEqual(float(tt_full(state.m)[0]), m, places=14)
                self.assertAlmostEqual(float(tt_full(state.P)[0, 0]), P, places=14)
                self.assertEqual(state.k, 1)
                r = state.record
                self.assertEqual(r.k, 1)
                self.assertAlmostEqual(r.v, 1.0)
                self.assertAlmostEqual(r.s, s, places=14)

    def test_collapse(self):
        dims = (2, 2)
        config = TNKFConfig(gamma=1.0, sigma_r2=1.0)
        state = TNKFState(tt_zeros(dims), tt_rank1_diag(-1.0, dims))
        with self.assertRaises(CovarianceCollapse) as cm:
            tnkf_step(state, tt_ones(dims), 1.0, config)
        self.assertEqual(cm.exception.iteration, 1)
        self.assertAlmostEqual(cm.exception.s, -3.0)

    def test_mismatched_row(self):
        config = TNKFConfig(gamma=1.0, sigma_r2=1.0)
        with self.assertRaises(InvalidArgument):
            tnkf_step(tnkf_init(4, config), tt_ones((4,)), 1.0, config)

    def test_branching_states(self):
        config = TNKFConfig(gamma=1.0, sigma_r2=1.0, sigma_e2=1.0)
        c = tt_ones((2, 2))
        start = tnkf_init(4, config)
        first = tnkf_step(start, c, 1.0, config)
        second = tnkf_step(start, c, -3.0, config)
        self.assertIsNone(start.record)
        self.assertEqual((first.record.k, second.record.k), (1, 1))
        self.assertAlmostEqual(first.record.v, 1.0)
        self.assertAlmostEqual(second.record.v, -3.0)
        self.assertEqual(tnkf_step(first, c, 1.0, config).record.k, 2)
        self.assertAlmostEqual(first.record.v, 1.0)

    def test_monotone_diagonal(self):
        problem = random_problem(16, seed=1)
        config = TNKFConfig.for_problem(problem)
        state = tnkf_init(problem.N, config)
        diagonal = np.diag(tt_full(state.P))
        for k in range(problem.N):
            state = tnkf_step(state, row_to_tt(problem.row(k), state.m.dims), problem.y[k], config)
            current = np.diag(tt_full(state.P))
            with self.subTest(k=k):
                self.assertTrue(np.all(current <= diagonal + 1e-12))
                self.assertGreaterEqual(state.record.s, problem.sigma_r2 * (1 - 1e-9))
            diagonal = current


class TestTrain(unittest.TestCase):
    def test_matches_batch_posterior(self):
        for N in [8, 16, 27, 64]:
            for seed in range(3):
                problem = random_problem(N, seed=seed)
                with self.subTest(N=N, seed=seed):
                    model = tnkf_train(problem, TNKFConfig.for_problem(problem))
                    m, P = posterior_dense(problem)
                    self.assertEqual(model.iterations, N)
                    self.assertEqual(model.dims, tensorize_dims(N))
                    self.assertLessEqual(relative(tt_full(model.m), m), 1e-6)
                    self.assertLessEqual(relative(tt_full(model.P), P), 1e-5)

    def test_row_order_invariance(self):
        problem = random_problem(16, seed=4)
        natural = tnkf_train(problem, TNKFConfig.for_problem(problem))
        shuffled = tnkf_train(problem, TNKFConfig.for_problem(problem, row_order="shuffle", seed=7))
        self.assertLessEqual(relative(tt_full(shuffled.m), tt_full(natural.m)), 1e-6)

    def test_prefetch(self):
        problem = random_problem(16, seed=5)
        config = TNKFConfig.for_problem(problem, policy_c=TruncationPolicy.relative(1e-3))
        direct = tnkf_train(problem, config)
        prefetched = tnkf_train(problem, config, prefetch=True)
        np.testing.assert_array_equal(tt_full(prefetched.m), tt_full(direct.m))
        np.testing.assert_array_equal(tt_full(prefetched.P), tt_full(direct.P))

    def test_rank_control(self):
        problem = random_problem(16, seed=6, sigma_r2=1.0, sigma_e2=1e-3)
        config = TNKFConfig.for_problem(
            problem,
            policy_m=TruncationPolicy.rank(2),
            policy_c=TruncationPolicy.rank(2),
            policy_P=TruncationPolicy.rank(2),
            policy_k=TruncationPolicy.rank(1),
        )
        model = tnkf_train(problem, config)
        self.assertEqual(len(model.trace), 16)
        for r in model.trace:
            with self.subTest(k=r.k):
                self.assertLessEqual(r.max_rank_m, 2)
                self.assertLessEqual(r.max_rank_P, 2)
                self.assertEqual(r.max_rank_k, 1)
        self.assertLessEqual(model.m.max_rank, 2)
        self.assertLessEqual(model.P.max_rank, 2)

    def test_symmetrization(self):
        problem = random_problem(16, seed=8)
        plain = tnkf_train(problem, TNKFConfig.for_problem(problem))
        symmetrized = tnkf_train(problem, TNKFConfig.for_problem(problem, sym_every=4))
        P = tt_full(symmetrized.P)
        self.assertLessEqual(np.linalg.norm(P - P.T), 1e-12 * np.linalg.norm(P))
        self.assertLessEqual(relative(tt_full(symmetrized.m), tt_full(plain.m)), 1e-8)

    def test_max_iterations(self):
        problem = random_problem(16)
        model = tnkf_train(problem, TNKFConfig.for_problem(problem, max_iterations=3))
        self.assertEqual(model.iterations, 3)
        self.assertEqual([r.k for r in model.trace], [1, 2, 3])

    def test_early_stop(self):
        # With a unit prior ‖P‖_F starts at 9 and changes by less than 1 per row.
        problem = random_problem(81, seed=9)
        config = TNKFConfig.for_problem(problem, early_stop=EarlyStop(10.0, 1.0, 5))
        model = tnkf_train(problem, config)
        self.assertEqual(model.iterations, 5)
        self.assertEqual(len(model.trace), 5)

    def test_progress(self):
        problem = random_problem(8)
        calls = []
        tnkf_train(problem, TNKFConfig.for_problem(problem), progress=lambda state, total: calls.append((state.k, total)))
        self.assertEqual(calls, [(k, 8) for k in range(1, 9)])

    def test_mismatched_config(self):
        problem = random_problem(8)
        with self.assertRaises(InvalidArgument):
            tnkf_train(problem, TNKFConfig(gamma=2.0, sigma_r2=problem.sigma_r2))


class TestEarlyStopCheck(unittest.TestCase):
    rule = TNKFConfig(gamma=1.0, sigma_r2=1.0, early_stop=EarlyStop(1e-5, 5e-3, 5))

    def test_examples(self):
        examples = [
            ([record(k, 1e-6, 0.0) for k in range(1, 6)], True),
            ([record(k, 1e-6, 0.0) for k in range(1, 5)], False),
            ([record(k, 1.0, 0.0) for k in range(1, 20)], False),
            ([record(k, 1e-6, 1e-2) for k in range(1, 6)], False),
            ([record(k, 1e-6, -1e-3) for k in range(1, 6)], True),
        ]
        for trace, expected in examples:
            with self.subTest(len=len(trace), p=trace[0].p_frobenius, delta=trace[0].p_delta):
                self.assertIs(early_stop_check(trace, self.rule), expected)

    def test_disabled(self):
        trace = [record(k, 0.0, 0.0) for k in range(1, 10)]
        self.assertFalse(early_stop_check(trace, TNKFConfig(gamma=1.0, sigma_r2=1.0)))

    def test_replay(self):
        trace = []
        p = 10.0
        for k in range(1, 40):
            trace.append(record(k, p / 2, -p / 2))
            p /= 2
        first = next(n for n in range(1, 40) if early_stop_check(trace[:n], self.rule))
        # 10 / 2**k drops below 1e-5 at k = 20; five such records end at k = 24.
        self.assertEqual(first, 24)


class TestTrace(unittest.TestCase):
    def test_write_trace(self):
        problem = random_problem(8)
        model = tnkf_train(problem, TNKFConfig.for_problem(problem))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "trace.csv")
            write_trace(model.trace, path)
            with open(path, newline="") as f:
                rows = list(csv.reader(f))
        self.assertEqual(rows[0], TRACE_COLUMNS)
        self.assertEqual([int(row[0]) for row in rows[1:]], list(range(1, 9)))
        for row, r in zip(rows[1:], model.trace):
            self.assertAlmostEqual(float(row[2]), r.s)
            self.assertAlmostEqual(float(row[3]), r.p_frobenius)

    def test_train_rmse(self):
        problem = random_problem(16)
        config = TNKFConfig.for_problem(problem, rmse_every=4)
        model = tnkf_train(problem, config, monitor=(problem.X, problem.y))
        for r in model.trace:
            with self.subTest(k=r.k):
                self.assertEqual(r.train_rmse is not None, r.k % 4 == 0)
        self.assertTrue(all(math.isfinite(r.train_rmse) for r in model.trace if r.train_rmse is not None))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "trace.csv")
            write_trace(model.trace, path)
            with open(path, newline="") as f:
                rows = list(csv.reader(f))
        self.assertEqual(rows[0], TRACE_COLUMNS + ["train_rmse"])
        self.assertEqual(rows[1][-1], "")
        self.assertNotEqual(rows[4][-1], "")


if __name__ == "__main__":
    unittest.main()
