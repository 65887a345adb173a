from unittest import TestCase

import numpy as np

from pdsim.core import (LoadMatrix, MetricKind, MetricSeries, PlacementTensor, all_device_loads, baseline_placement,
                        device_loads, imbalance_of, imbalance_ratio, max_imbalance, percentile)
from pdsim.exceptions import EmptyInput, InvalidArgument


def random_placement(rng, L, R, E):
    bits = rng.random((L, R, E)) < 0.4
    for l, e in np.argwhere(~bits.any(axis=1)):
        bits[l, rng.integers(R), e] = True
    return PlacementTensor(bits)


class PlacementTensorTest(TestCase):

    def test_every_expert_needs_a_device(self):
        bits = np.zeros((1, 2, 3), dtype=bool)
        bits[0, 0, 0] = bits[0, 1, 1] = True
        with self.assertRaisesRegex(InvalidArgument, 'expert 2 of layer 0'):
            PlacementTensor(bits)

    def test_capacity_is_checked_against_slots(self):
        P = PlacementTensor.from_device_lists([[[0, 1, 2], [3]]], 4)
        self.assertTrue(P.validate([3]))
        with self.assertRaisesRegex(InvalidArgument, 'device 0 of layer 0 hosts 3 experts, 2 slots'):
            P.validate([2])
        with self.assertRaises(InvalidArgument):
            PlacementTensor.from_device_lists([[[0, 1, 2], [3]]], 4, slots=[2])

    def test_device_lists(self):
        lists = [[[0, 2], [1, 2]], [[1, 2], [0]]]
        P = PlacementTensor.from_device_lists(lists, 3)
        self.assertEqual(P.shape, (2, 2, 3))
        self.assertEqual(P.to_device_lists(), lists)
        self.assertEqual(list(P.replica_counts(0)), [1, 1, 2])
        self.assertEqual(list(P.replica_counts(1)), [1, 1, 1])
        with self.assertRaises(InvalidArgument):
            PlacementTensor.from_device_lists([[[0, 0], [1]]], 2)
        with self.assertRaises(InvalidArgument):
            PlacementTensor.from_device_lists([[[0], [5]]], 2)

    def test_placement_is_immutable(self):
        P, _ = baseline_placement(1, 2, 4)
        with self.assertRaises(ValueError):
            P.bits[0, 0, 0] = False


class DeviceLoadTest(TestCase):

    def test_split_divides_load_over_replicas(self):
        P = PlacementTensor.from_device_lists([[[0, 1], [0, 2]]], 3)
        D = LoadMatrix([[9, 2, 1]])
        self.assertEqual(list(device_loads(P, D, 0)), [6.5, 5.5])
        self.assertEqual(list(device_loads(P, D, 0, literal=True)), [11.0, 10.0])

    def test_split_conserves_load(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            L, R, E = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 7)
            P = random_placement(rng, L, R, E)
            D = LoadMatrix(rng.random((L, E)) * 10)
            totals = all_device_loads(P, D).sum(axis=1)
            np.testing.assert_allclose(totals, D.values.sum(axis=1), rtol=0, atol=1e-9)
            for l in range(L):
                self.assertGreaterEqual(imbalance_ratio(P, D, l), 1.0)

    def test_uniform_load_is_exactly_balanced(self):
        P, slots = baseline_placement(3, 4, 8)
        self.assertEqual(slots, [2, 2, 2])
        D = LoadMatrix(np.full((3, 8), 0.3))
        for l in range(3):
            self.assertEqual(imbalance_ratio(P, D, l), 1.0)
        self.assertEqual(max_imbalance(P, D), 1.0)

    def test_skewed_baseline(self):
        P, _ = baseline_placement(1, 2, 4)
        D = LoadMatrix([[9, 1, 1, 1]])
        self.assertAlmostEqual(imbalance_ratio(P, D, 0), 10 / 6.0)

    def test_layers_without_load_are_balanced(self):
        self.assertEqual(imbalance_of([0, 0, 0]), 1.0)
        with self.assertRaises(EmptyInput):
            imbalance_of([])

    def test_dimension_mismatch(self):
        P, _ = baseline_placement(1, 2, 4)
        with self.assertRaises(InvalidArgument):
            device_loads(P, LoadMatrix([[1, 2, 3]]), 0)
        with self.assertRaises(InvalidArgument):
            device_loads(P, LoadMatrix([[1, 2, 3, 4]]), 1)

    def test_load_matrix_validation(self):
        with self.assertRaises(InvalidArgument):
            LoadMatrix([[1, -1]])
        with self.assertRaises(InvalidArgument):
            LoadMatrix([1, 2])
        with self.assertRaises(InvalidArgument):
            LoadMatrix([[1, float('nan')]])


class MetricSeriesTest(TestCase):

    def test_nearest_rank_percentile(self):
        series = MetricSeries(range(1, 101), MetricKind.TTFT)
        self.assertEqual(series.percentile(0.99), 99)
        self.assertEqual(series.percentile(0.5), 50)
        self.assertEqual(series.percentile(0.0), 1)
        self.assertEqual(series.percentile(1.0), 100)
        self.assertEqual(percentile([3.0], 0.99), 3.0)

    def test_mean(self):
        self.assertAlmostEqual(MetricSeries([1, 2, 3, 4]).mean(), 2.5)

    def test_invalid_samples(self):
        with self.assertRaises(InvalidArgument):
            MetricSeries([1, -0.5])
        with self.assertRaises(EmptyInput):
            MetricSeries().mean()
        with self.assertRaises(EmptyInput):
            percentile([], 0.5)
        with self.assertRaises(InvalidArgument):
            percentile([1, 2], 1.5)
