from unittest import TestCase

import numpy as np

from pdsim.core import LoadMatrix, baseline_placement
from pdsim.exceptions import InvalidConfig, InvalidParameter
from pdsim.simcluster import (AttentionConfig, ClusterConfig, ClusterSimulation, CostModel, FeatureSet, RunConfig,
                              decode_step_duration, expert_peak, prefill_duration, run_simulation)
from pdsim.workload import WorkloadSpec

SMALL = ClusterConfig(prefill_nodes=2, decode_width=8, per_die_batch=4)
SPEC = WorkloadSpec(mean_in=1000, mean_out=100)
RUN = RunConfig(duration=60, ramp=10)


def small_run(features=None, run=RUN):
    sim = ClusterSimulation(SMALL, SPEC, features or FeatureSet(), run)
    sim.run()
    return sim


class ConfigTest(TestCase):

    def test_shape(self):
        self.assertEqual(ClusterConfig().concurrency, 2560)
        self.assertEqual(ClusterConfig().xpyd, '6P8-1D32')
        self.assertEqual(SMALL.concurrency, 64)
        cluster = ClusterConfig().with_xpyd('4P8-2D16')
        self.assertEqual((cluster.prefill_nodes, cluster.decode_groups, cluster.decode_width), (4, 2, 16))
        self.assertEqual(cluster.decode_dies, 64)
        with self.assertRaises(InvalidParameter):
            ClusterConfig().with_xpyd('4P8')
        with self.assertRaises(InvalidParameter):
            ClusterConfig(decode_width=12)

    def test_feature_labels(self):
        self.assertEqual([f.label for f in FeatureSet().ablation()],
                         ['all-on', 'w/o-placement', 'w/o-attn', 'w/o-proxy', 'all-off'])
        self.assertEqual(FeatureSet('none', 'none', 'oas').label, 'w/o-placement+attn')
        with self.assertRaises(InvalidParameter):
            FeatureSet(proxy='random')

    def test_run_config(self):
        with self.assertRaises(InvalidParameter):
            RunConfig(duration=10, ramp=10)
        with self.assertRaises(InvalidParameter):
            RunConfig(warmup_fraction=1.0)


class CostTest(TestCase):

    def test_prefill(self):
        self.assertAlmostEqual(prefill_duration(CostModel(), 3500), 0.169)
        pattern = AttentionConfig().compression_pattern()
        self.assertLess(prefill_duration(CostModel(), 3500, pattern), 0.169)
        self.assertEqual(prefill_duration(CostModel(), 0), CostModel().prefill_base)

    def test_decode_step(self):
        P, _ = baseline_placement(1, 2, 4)
        self.assertEqual(expert_peak(P, LoadMatrix([[1, 1, 1, 1]])), 2.0)
        costs = CostModel(decode_base=1.0, decode_kv=0.5, decode_expert=0.25)
        self.assertEqual(decode_step_duration(costs, 4, P, [[9, 1, 1, 1]]), 1.0 + 2.0 + 2.5)
        # half the layers read at most 2 of the 4 entries
        attention = AttentionConfig(pattern='1100', sink=1, recent=1)
        self.assertEqual(decode_step_duration(costs, 4, P, [[9, 1, 1, 1]], attention=attention), 1.0 + 1.5 + 2.5)

    def test_busiest_die_gates_the_step(self):
        P, _ = baseline_placement(1, 2, 4)
        costs = CostModel(decode_base=1.0, decode_kv=0.5, decode_expert=0.25)
        self.assertEqual(decode_step_duration(costs, [4, 8], P, [[9, 1, 1, 1]], [1, 4]), 1.0 + 4.0 + 2.5)
        # the window is per request, four requests on a die keep all 8 entries
        attention = AttentionConfig(pattern='1100', sink=1, recent=1)
        self.assertEqual(decode_step_duration(costs, [4, 8], P, [[9, 1, 1, 1]], [1, 4], attention),
                         1.0 + 4.0 + 2.5)
        self.assertEqual(decode_step_duration(costs, [4, 8], P, [[9, 1, 1, 1]], [1, 1], attention),
                         1.0 + 2.5 + 2.5)

    def test_negative_costs(self):
        with self.assertRaises(InvalidParameter):
            CostModel(decode_base=-1)


class SimulatedCostTest(TestCase):

    def group_state(self, features=None):
        sim = ClusterSimulation(SMALL, SPEC, features or FeatureSet())
        group = sim.groups[0]
        # die 0: two requests with 10000 KV tokens, die 1: one request with 500
        group.count[:2] = [2, 1]
        group.kv_base[:2] = [10000, 500]
        return sim, group

    def test_decode_step_uses_the_cost_function(self):
        sim, group = self.group_state()
        expected = decode_step_duration(sim.costs, group.kv_base, group.placement, group.expert_counts,
                                        group.count, AttentionConfig())
        self.assertAlmostEqual(group.step_duration(), expected, places=12)
        # half the layers keep 2 x 1024 of die 0's 10000 entries
        self.assertAlmostEqual(group.step_duration(), 0.023 + 8.5e-8 * 6024, places=12)

    def test_decode_step_without_compression(self):
        sim, group = self.group_state(FeatureSet(attn='none'))
        self.assertAlmostEqual(group.step_duration(),
                               decode_step_duration(sim.costs, group.kv_base, group.placement, group.expert_counts),
                               places=12)
        self.assertAlmostEqual(group.step_duration(), 0.023 + 8.5e-8 * 10000, places=12)

    def test_prefill_uses_the_cost_function(self):
        sim, _ = self.group_state()
        self.assertAlmostEqual(sim.prefill_time(3500),
                               prefill_duration(sim.costs, 3500, AttentionConfig().compression_pattern()))
        self.assertAlmostEqual(sim.prefill_time(3500), 0.05 + 3.4e-5 * 3500 * 0.925)
        sim, _ = self.group_state(FeatureSet(attn='none'))
        self.assertAlmostEqual(sim.prefill_time(3500), 0.169)


class SimulationTest(TestCase):

    @classmethod
    def setUpClass(cls):
        cls.sim = small_run()

    def test_closed_loop_keeps_concurrency(self):
        self.assertTrue(self.sim.inflight_samples)
        self.assertEqual({n for _, n in self.sim.inflight_samples}, {SMALL.concurrency})

    def test_token_accounting(self):
        for record in self.sim.records:
            self.assertEqual(record.output_tokens, 1 + record.tpot_count)
            self.assertGreaterEqual(record.done, record.arrival + record.ttft)

    def test_report(self):
        report = self.sim.report
        self.assertEqual(report.xpyd, '2P8-1D8')
        self.assertEqual(report.method, 'all-on')
        self.assertGreater(report.qpm, 0)
        self.assertGreaterEqual(report.window_start, RUN.ramp)
        self.assertTrue(all(0.0 <= u <= 1.0 + 1e-9 for u in report.utilization['prefill']))
        self.assertTrue(report.imbalance[0])

    def test_deterministic(self):
        again = small_run()
        self.assertEqual(again.report.csv_row(), self.sim.report.csv_row())
        self.assertEqual(again.records, self.sim.records)

    def test_placement_lowers_imbalance(self):
        static = small_run(FeatureSet(placement='static'))
        none = small_run(FeatureSet(placement='none'))
        mean = lambda sim: np.mean([b for _, b in sim.report.imbalance[0]])
        self.assertLess(mean(static), mean(none))

    def test_request_budget(self):
        sim = small_run(run=RunConfig(duration=60, ramp=1, max_requests=50, warmup_fraction=0.0))
        self.assertEqual(len(sim.records), 50)
        self.assertLessEqual(sim.injected, 64)

    def test_inconsistent_configuration(self):
        with self.assertRaises(InvalidConfig) as ctx:
            run_simulation(SMALL, WorkloadSpec(layers=4))
        self.assertIn('workload.layers', ctx.exception.diagnostics[0])
        with self.assertRaises(InvalidConfig):
            run_simulation(ClusterConfig(layers=4), WorkloadSpec(layers=4))
