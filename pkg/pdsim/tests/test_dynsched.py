import io
import json
from unittest import TestCase

import numpy as np

from pdsim.core import LoadMatrix, baseline_placement, max_imbalance
from pdsim.dynsched import (ActivationWindow, DynamicExpertScheduler, MigrationPlan, Move, NoAction, Rebalance,
                            SchedulerConfig, apply_migration, plan_migration, predict_future_activations,
                            scheduler_step, should_rebalance, update_activation_window)
from pdsim.exceptions import EmptyInput, InvalidArgument, InvalidParameter, MigrationDeferred
from pdsim.logs import EventLog


class ActivationWindowTest(TestCase):

    def test_single_snapshot(self):
        w = ActivationWindow(1, 3)
        D = update_activation_window(w, [[3, 0, 7]])
        self.assertEqual(D.values.tolist(), [[3, 0, 7]])

    def test_constant_stream(self):
        w = ActivationWindow(2, 2, window_len=3, decay=0.3)
        for _ in range(5):
            D = update_activation_window(w, [[4, 1], [2, 2]])
        np.testing.assert_allclose(D.values, [[4, 1], [2, 2]])
        self.assertEqual(w.filled, 3)

    def test_weighted_towards_newest(self):
        w = ActivationWindow(1, 1, window_len=2, decay=0.5)
        update_activation_window(w, [[10]])
        D = update_activation_window(w, [[20]])
        self.assertAlmostEqual(D.values[0, 0], 50 / 3.0)
        # oldest entry drops out
        D = update_activation_window(w, [[20]])
        self.assertAlmostEqual(D.values[0, 0], 20.0)

    def test_invalid(self):
        w = ActivationWindow(1, 2)
        with self.assertRaises(InvalidArgument):
            w.push([[1, 2, 3]])
        with self.assertRaises(InvalidArgument):
            w.push([[1, -2]])
        with self.assertRaises(EmptyInput):
            w.ewma()
        with self.assertRaises(InvalidParameter):
            ActivationWindow(1, 2, window_len=0)
        with self.assertRaises(InvalidParameter):
            ActivationWindow(1, 2, decay=0)


class ForecastTest(TestCase):

    def forecast(self, history):
        w = ActivationWindow(1, 1, window_len=len(history))
        for v in history:
            w.push([[v]])
        return predict_future_activations(w).values[0, 0]

    def test_constant_history(self):
        self.assertEqual(self.forecast([7, 7, 7]), 7)

    def test_line_through_two_points(self):
        self.assertAlmostEqual(self.forecast([10, 20]), 30)

    def test_least_squares(self):
        self.assertAlmostEqual(self.forecast([1, 2, 4]), 16 / 3.0)

    def test_single_snapshot_and_clamp(self):
        self.assertEqual(self.forecast([5]), 5)
        self.assertEqual(self.forecast([20, 10, 0]), 0)

    def test_empty(self):
        with self.assertRaises(EmptyInput):
            predict_future_activations(ActivationWindow(1, 1))


class MigrationPlanTest(TestCase):

    def test_empty_plan(self):
        plan = MigrationPlan.from_moves([], 2.0, start=3.0)
        self.assertEqual(plan.duration, 0)
        self.assertEqual(plan.switch_time, 3.0)

    def test_bytes_over_bandwidth(self):
        plan = MigrationPlan.from_moves([Move(0, 1, 0, 1, 8)], 2.0, start=10.0)
        self.assertEqual(plan.duration, 4.0)
        self.assertEqual(plan.switch_time, 14.0)

    def test_links_transfer_in_parallel(self):
        plan = MigrationPlan.from_moves([Move(0, 1, 0, 1, 8), Move(0, 2, 2, 3, 6)], 2.0)
        self.assertEqual(plan.duration, 4.0)
        # same link adds up
        plan = MigrationPlan.from_moves([Move(0, 1, 0, 1, 8), Move(0, 2, 0, 1, 6)], 2.0)
        self.assertEqual(plan.duration, 7.0)

    def test_move_needs_two_devices(self):
        with self.assertRaises(InvalidArgument):
            Move(0, 0, 1, 1, 1)

    def test_plan_between_placements(self):
        old, _ = baseline_placement(1, 2, 4)
        new = old.from_device_lists([[[0, 1, 2], [0, 1, 3]]], 4)
        plan = plan_migration(old, new, 1.0, 1.0)
        self.assertEqual(sorted((m.expert, m.source, m.destination) for m in plan.moves),
                         [(0, 0, 1), (1, 0, 1), (2, 1, 0)])
        self.assertEqual(plan.duration, 2.0)


def phase(hot):
    row = [1.0] * 4
    row[hot] = 9.0
    return [row]


class SchedulerTest(TestCase):

    def setUp(self):
        P, slots = baseline_placement(1, 2, 4)
        self.scheduler = DynamicExpertScheduler(P, slots, SchedulerConfig(trigger=1.2, margin=0.05))

    def test_balanced_state_needs_nothing(self):
        self.scheduler.observe([[1, 1, 1, 1]])
        decision = scheduler_step(self.scheduler, 0.0)
        self.assertIsInstance(decision, NoAction)
        self.assertEqual(decision.b_current, 1.0)

    def test_insufficient_improvement(self):
        config = SchedulerConfig(margin=0.1)
        self.assertFalse(should_rebalance(1.8, 1.75, config))
        self.assertTrue(should_rebalance(1.8, 1.65, config))

    def test_step_needs_observations(self):
        with self.assertRaises(EmptyInput):
            self.scheduler.step(0.0)

    def test_skewed_load_triggers_one_rebalance(self):
        s = self.scheduler
        s.observe(phase(0))
        decision = s.step(0.0)
        self.assertIsInstance(decision, Rebalance)
        self.assertAlmostEqual(decision.b_current, 10 / 6.0)
        self.assertLess(decision.b_sim, 10 / 6.0 - 0.1)
        self.assertEqual(decision.slots, (3,))

        decisions = []
        for t in (0.0, 10.0, 20.0, 30.0):
            s.observe(phase(0))
            decision, _ = s.tick(t)
            decisions.append(decision)
            s.visible_placement.validate(s.slots)
        self.assertIsInstance(decisions[0], Rebalance)
        self.assertTrue(all(isinstance(d, NoAction) for d in decisions[1:]))
        self.assertEqual(s.rebalances, 1)
        self.assertEqual(s.slots, (3,))
        self.assertEqual(max_imbalance(s.visible_placement, LoadMatrix(phase(0))), 1.0)

    def test_old_placement_until_switch(self):
        s = self.scheduler
        before = s.visible_placement
        s.observe(phase(0))
        decision, events = s.tick(0.0)
        self.assertEqual([e.kind for e in events], ['transfer', 'switch'])
        self.assertEqual(events[1].time, decision.plan.switch_time)
        self.assertIs(s.visible_placement, before)
        self.assertFalse(s.complete_migration(decision.plan.switch_time - 0.5))
        self.assertIs(s.visible_placement, before)
        self.assertTrue(s.complete_migration(decision.plan.switch_time))
        self.assertEqual(s.visible_placement, decision.candidate)

    def test_overlapping_migration_is_deferred(self):
        s = self.scheduler
        s.observe(phase(0))
        decision = s.step(0.0)
        s.apply_migration(decision, 0.0)
        with self.assertRaises(MigrationDeferred):
            s.apply_migration(decision, 0.5)
        # a tick while the transfer runs counts the deferral
        s.observe(phase(0))
        decision, events = s.tick(0.5)
        self.assertEqual(events, [])
        self.assertEqual(s.deferred, 1)

    def test_plain_plan(self):
        events = apply_migration(self.scheduler, MigrationPlan.from_moves([], 1.0), 5.0)
        self.assertEqual([(e.kind, e.time) for e in events], [('switch', 5.0)])

    def run_shift(self):
        P, slots = baseline_placement(1, 2, 4)
        s = DynamicExpertScheduler(P, slots, SchedulerConfig(trigger=1.2, margin=0.05))
        trace = []
        t = 0.0
        for loads in [phase(0)] * 4 + [phase(3)] * 4:
            s.observe(loads)
            decision, _ = s.tick(t)
            s.visible_placement.validate(s.slots)
            trace.append((t, decision.decision, round(decision.b_current, 9)))
            t += 10.0
        return s, trace

    def test_scheduler_follows_a_shift(self):
        s, trace = self.run_shift()
        decisions = [d for _, d, _ in trace]
        self.assertEqual(decisions[:4], ['rebalance', 'no_action', 'no_action', 'no_action'])
        # the shift is noticed on the first interval and recovered on the next
        self.assertEqual(decisions[4], 'rebalance')
        self.assertTrue(all(b <= 1.2 for _, _, b in trace[5:]))
        self.assertLess(max_imbalance(s.visible_placement, LoadMatrix(phase(3))), 1.2)
        self.assertEqual(s.rebalances, 2)

    def test_deterministic(self):
        first = self.run_shift()[1]
        for _ in range(4):
            self.assertEqual(self.run_shift()[1], first)

    def test_switch_is_logged(self):
        stream = io.StringIO()
        events = EventLog(stream)
        P, slots = baseline_placement(1, 2, 4)
        s = DynamicExpertScheduler(P, slots, events=events)
        s.observe(phase(0))
        s.tick(0.0)
        s.observe(phase(0))
        s.tick(10.0)
        kinds = [json.loads(line)['kind'] for line in stream.getvalue().splitlines()]
        self.assertEqual(kinds, ['scheduler', 'switch', 'scheduler'])


class ConfigTest(TestCase):

    def test_invalid_parameters(self):
        for kwargs in ({'trigger': 0.9}, {'margin': -1}, {'interval': 0}, {'budget': -1},
                       {'window_len': 0}, {'decay': 1.5}, {'link_bandwidth': 0}):
            with self.assertRaises(InvalidParameter):
                SchedulerConfig(**kwargs)
