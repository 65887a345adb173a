import math
from unittest import TestCase

import numpy as np

from pdsim.attnpattern import (CompressionPattern, FitnessOracle, GAConfig, LatencyModel, _rank_key, _softmax_rows,
                               build_sparse_index_set, dense_attention, exhaustive_search, ga_search, kv_factor,
                               make_oracle, pattern_latency, sparse_attention)
from pdsim.exceptions import InvalidArgument, InvalidParameter, SearchSpaceTooLarge


class SparseIndexSetTest(TestCase):

    def test_sink_and_recent(self):
        self.assertEqual(build_sparse_index_set(16, 2, 4).indices, (1, 2, 13, 14, 15, 16))

    def test_full_coverage(self):
        self.assertEqual(build_sparse_index_set(6, 4, 4).indices, tuple(range(1, 7)))
        self.assertEqual(build_sparse_index_set(5, 3, 3).indices, (1, 2, 3, 4, 5))

    def test_no_recent(self):
        self.assertEqual(build_sparse_index_set(10, 3, 0).indices, (1, 2, 3))

    def test_invalid(self):
        with self.assertRaises(InvalidArgument):
            build_sparse_index_set(0, 1, 1)
        with self.assertRaises(InvalidArgument):
            build_sparse_index_set(4, -1, 1)


class AttentionTest(TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(5)

    def test_single_key(self):
        V = [[3.0, -1.0, 2.0]]
        out = dense_attention(self.rng.normal(size=(4, 3)), self.rng.normal(size=(1, 3)), V)
        np.testing.assert_allclose(out, np.repeat(V, 4, axis=0))

    def test_zero_query_averages_values(self):
        V = self.rng.normal(size=(6, 2))
        out = dense_attention(np.zeros((3, 2)), self.rng.normal(size=(6, 2)), V)
        np.testing.assert_allclose(out, np.repeat([V.mean(axis=0)], 3, axis=0), atol=1e-12)

    def test_two_by_two(self):
        out = dense_attention([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]], [[1.0, 2.0], [3.0, 4.0]])
        p = 1.0 / (1.0 + math.exp(-1.0 / math.sqrt(2.0)))
        np.testing.assert_allclose(out, [[p + 3 * (1 - p), 2 * p + 4 * (1 - p)]], atol=1e-6)

    def test_large_logits_stay_finite(self):
        out = dense_attention([[1000.0]], [[1000.0], [999.0]], [[1.0], [0.0]])
        self.assertTrue(np.all(np.isfinite(out)))

    def test_full_index_set_equals_dense(self):
        Q, K, V = (self.rng.normal(size=s) for s in ((3, 4), (9, 4), (9, 4)))
        np.testing.assert_array_equal(sparse_attention(Q, K, V, build_sparse_index_set(9, 9, 0)),
                                      dense_attention(Q, K, V))

    def test_full_index_set_on_random_shapes(self):
        for _ in range(100):
            n, m, d = self.rng.integers(1, 12, size=3)
            Q, K, V = (self.rng.normal(size=s) for s in ((n, d), (m, d), (m, d)))
            split = int(self.rng.integers(0, m + 1))
            idx = build_sparse_index_set(m, split, m - split)
            np.testing.assert_allclose(sparse_attention(Q, K, V, idx), dense_attention(Q, K, V), rtol=0, atol=1e-9)

    def test_softmax_rows_sum_to_one(self):
        weights = _softmax_rows(self.rng.normal(scale=20.0, size=(50, 30)))
        np.testing.assert_allclose(weights.sum(axis=1), np.ones(50), rtol=0, atol=1e-12)

    def test_single_index(self):
        Q, K, V = (self.rng.normal(size=s) for s in ((3, 4), (9, 4), (9, 4)))
        np.testing.assert_allclose(sparse_attention(Q, K, V, {4}), np.repeat([V[3]], 3, axis=0))

    def test_peaked_attention_onto_the_sink(self):
        K = self.rng.normal(0, 0.1, size=(8, 4))
        K[0] = [30.0, 0.0, 0.0, 0.0]
        V = self.rng.normal(size=(8, 4))
        Q = np.array([[1.0, 0.0, 0.0, 0.0], [0.9, 0.1, 0.0, 0.0]])
        idx = build_sparse_index_set(8, 2, 2)
        np.testing.assert_allclose(sparse_attention(Q, K, V, idx), dense_attention(Q, K, V), atol=1e-3)

    def test_invalid(self):
        with self.assertRaises(InvalidArgument):
            dense_attention([[1.0, 2.0]], [[1.0]], [[1.0]])
        with self.assertRaises(InvalidArgument):
            sparse_attention([[1.0]], [[1.0]], [[1.0]], set())
        with self.assertRaises(InvalidArgument):
            sparse_attention([[1.0]], [[1.0]], [[1.0]], {2})


class PatternTest(TestCase):

    def test_bits(self):
        p = CompressionPattern.from_bits('10100000')
        self.assertEqual(p.compressed_layers(), [0, 2])
        self.assertEqual(str(p), '10100000')
        self.assertEqual(CompressionPattern.full(3).compressed, 0)
        with self.assertRaises(InvalidArgument):
            CompressionPattern.from_bits('10x')

    def test_latency(self):
        lat = LatencyModel.uniform(8)
        self.assertEqual(pattern_latency(CompressionPattern.full(8), lat), 16)
        self.assertEqual(lat.latency([True] * 8), 8)
        self.assertEqual(lat.latency(CompressionPattern.from_bits('11100000')), 13)
        self.assertEqual(lat.lower_bound, 8)

    def test_latency_decreases_with_compression(self):
        lat = LatencyModel.uniform(6, 3.0, 1.5)
        costs = [lat.latency([True] * k + [False] * (6 - k)) for k in range(7)]
        self.assertTrue(all(a > b for a, b in zip(costs, costs[1:])))

    def test_compressed_must_be_cheaper(self):
        with self.assertRaises(InvalidParameter):
            LatencyModel([2, 2], [1, 2])
        with self.assertRaises(InvalidArgument):
            LatencyModel.uniform(4).latency([True] * 3)

    def test_kv_factor(self):
        p = CompressionPattern.from_bits('1100')
        self.assertAlmostEqual(kv_factor(p, 1000, 4, 60), (2 * 0.064 + 2) / 4.0)
        self.assertEqual(kv_factor(p, 10, 4, 60), 1.0)
        self.assertEqual(kv_factor(p, 0, 4, 60), 1.0)

    def test_kv_factor_per_die(self):
        p = CompressionPattern.from_bits('1100')
        # window of 64 per request: 2 requests keep 128 of 1000, 20 keep everything
        np.testing.assert_allclose(kv_factor(p, [1000, 1000, 0], 4, 60, [2, 20, 0]),
                                   [(2 * 0.128 + 2) / 4.0, 1.0, 1.0])


class OracleTest(TestCase):

    def test_memoized(self):
        calls = []
        oracle = FitnessOracle(lambda p: calls.append(p) or 0.5)
        for _ in range(3):
            self.assertEqual(oracle((True, False)), 0.5)
        self.assertEqual(len(calls), 1)
        self.assertEqual(oracle.evaluations, 1)

    def test_out_of_range(self):
        with self.assertRaises(InvalidParameter):
            FitnessOracle(lambda p: 1.5).evaluate((True,))

    def test_registered_oracles(self):
        oracle = make_oracle('allowed_layers', 4, allowed=[0, 1])
        self.assertEqual(oracle.evaluate((True, True, False, False)), 1.0)
        self.assertEqual(oracle.evaluate((True, False, True, True)), 0.5)
        additive = make_oracle('additive', 2, sensitivity=[0.25, 0.5])
        self.assertEqual(additive.evaluate((True, True)), 0.25)
        with self.assertRaises(InvalidParameter):
            make_oracle('additive', 3, sensitivity=[0.1])
        with self.assertRaises(InvalidParameter):
            make_oracle('nope', 3)


class SearchTest(TestCase):

    def test_everything_feasible(self):
        result = ga_search(make_oracle('constant', 8), LatencyModel.uniform(8), GAConfig(tau=0.95), 8)
        self.assertEqual(str(result.pattern), '11111111')
        self.assertEqual(result.latency, 8)
        # stops as soon as the lower bound is reached
        self.assertLess(len(result.curve), 200)

    def test_unreachable_threshold(self):
        result = ga_search(make_oracle('constant', 6), LatencyModel.uniform(6), GAConfig(tau=1.01, generations=5), 6)
        self.assertTrue(result.infeasible)
        self.assertEqual(result.as_dict()['pattern'], 'infeasible')
        self.assertEqual(len(result.curve), 5)

    def test_allowed_layers(self):
        oracle = make_oracle('allowed_layers', 8, allowed=[0, 1, 2])
        lat = LatencyModel.uniform(8)
        expected = exhaustive_search(oracle, lat, 1.0, 8)
        self.assertEqual(str(expected.pattern), '11100000')
        result = ga_search(oracle, lat, GAConfig(tau=1.0, generations=100), 8)
        self.assertEqual(result.pattern, expected.pattern)
        self.assertEqual(result.accuracy, 1.0)

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(99)
        matches = 0
        for seed in range(100):
            L = int(rng.choice([6, 8, 10]))
            allowed = np.flatnonzero(rng.random(L) < 0.5)
            oracle = make_oracle('allowed_layers', L, allowed=allowed)
            lat = LatencyModel(rng.uniform(2, 3, L), rng.uniform(0.5, 1.5, L))
            found = ga_search(oracle, lat, GAConfig(tau=1.0, seed=seed), L)
            expected = exhaustive_search(oracle, lat, 1.0, L)
            matches += found.pattern == expected.pattern
        self.assertGreaterEqual(matches, 95)

    def test_curve_never_gets_worse(self):
        oracle = make_oracle('additive', 8, sensitivity=[0.01, 0.2, 0.02, 0.3, 0.01, 0.04, 0.5, 0.01])
        cfg = GAConfig(tau=0.9, generations=40, seed=4)
        result = ga_search(oracle, LatencyModel.uniform(8), cfg, 8)
        keys = [_rank_key((), c.best_acc, c.best_latency, cfg.tau) for c in result.curve]
        self.assertEqual(keys, sorted(keys, reverse=True))
        self.assertTrue(result.feasible)
        self.assertGreaterEqual(result.accuracy, 0.9)

    def test_deterministic(self):
        oracle = make_oracle('additive', 8, sensitivity=[0.05] * 8)
        cfg = GAConfig(tau=0.8, generations=30, seed=7)
        first = ga_search(oracle, LatencyModel.uniform(8), cfg, 8)
        second = ga_search(make_oracle('additive', 8, sensitivity=[0.05] * 8), LatencyModel.uniform(8), cfg, 8)
        self.assertEqual(first.as_dict(), second.as_dict())
        self.assertEqual(first.curve, second.curve)

    def test_exhaustive_guard(self):
        with self.assertRaises(SearchSpaceTooLarge):
            exhaustive_search(make_oracle('constant', 21), LatencyModel.uniform(21), 0.5, 21)

    def test_invalid_config(self):
        with self.assertRaises(InvalidParameter):
            GAConfig(population=1)
        with self.assertRaises(InvalidParameter):
            GAConfig(elitism=32)
        with self.assertRaises(InvalidArgument):
            ga_search(make_oracle('constant', 4), LatencyModel.uniform(5), GAConfig(), 4)
