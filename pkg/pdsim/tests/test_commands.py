import csv
import io
import json
import os
import tempfile
from unittest import TestCase, mock

from pdsim.__main__ import main
from pdsim.commands.base import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_INVARIANT, EXIT_OK, EXIT_UNEXPECTED, exit_code
from pdsim.exceptions import InfeasiblePlacement, InvalidConfig, NoCapacity, ProtocolViolation

SMALL_SCENARIO = """\
cluster:
  prefill_nodes: 2
  decode_width: 8
  per_die_batch: 4
workload:
  mean_in: 1000
  mean_out: 100
run:
  duration: 30.0
  ramp: 5.0
"""


class CommandTestCase(TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, *parts):
        return os.path.join(self.dir, *parts)

    def write_file(self, name, content):
        with io.open(self.path(name), 'w', encoding='utf-8') as f:
            f.write(content if isinstance(content, str) else json.dumps(content))
        return self.path(name)

    def run_main(self, *argv):
        stdout, stderr = io.StringIO(), io.StringIO()
        code = main(list(argv), stdout=stdout, stderr=stderr)
        return code, stdout.getvalue(), stderr.getvalue()


class ExitCodeTest(TestCase):

    def test_mapping(self):
        self.assertEqual(exit_code(InvalidConfig('x')), EXIT_CONFIG)
        self.assertEqual(exit_code(ProtocolViolation('x')), EXIT_INVARIANT)
        self.assertEqual(exit_code(InfeasiblePlacement('x')), EXIT_INFEASIBLE)
        self.assertEqual(exit_code(NoCapacity('x')), EXIT_UNEXPECTED)


class PlaceTest(CommandTestCase):

    def test_place(self):
        loads = self.write_file('loads.json', {'layers': 1, 'experts': 4, 'loads': [[9, 1, 1, 1]]})
        code, out, _ = self.run_main('place', loads, '-R', '2', '-M', '2', '--oracle', '--out-dir', self.dir)
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(out.strip(), 'layer 0: slots 3, imbalance 1.6667 -> 1.0000, optimum 1.0000, gap 0.00%')
        with io.open(self.path('placement.json'), encoding='utf-8') as f:
            data = json.load(f)
        self.assertEqual(data['slots'], [3])
        self.assertEqual(data['imbalance'][0]['after'], 1.0)

    def test_fixed_slots(self):
        loads = self.write_file('loads.json', {'loads': [[9, 1, 1, 1], [1, 1, 1, 1]]})
        code, out, _ = self.run_main('place', loads, '-R', '2', '--slots', '3', '--out-dir', self.dir)
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(len(out.strip().splitlines()), 2)

    def test_close_to_optimum(self):
        loads = self.write_file('loads.json', {'loads': [[6, 5, 4, 3, 2, 1]]})
        code, _, _ = self.run_main('place', loads, '-R', '3', '-M', '3', '--oracle', '--out-dir', self.dir)
        self.assertEqual(code, EXIT_OK)
        with io.open(self.path('placement.json'), encoding='utf-8') as f:
            row = json.load(f)['imbalance'][0]
        self.assertLessEqual(row['gap'], 0.15)

    def test_uniform_loads(self):
        loads = self.write_file('loads.json', {'loads': [[5] * 6, [5] * 6]})
        code, _, _ = self.run_main('place', loads, '-R', '3', '--slots', '2', '--out-dir', self.dir)
        self.assertEqual(code, EXIT_OK)
        with io.open(self.path('placement.json'), encoding='utf-8') as f:
            rows = json.load(f)['imbalance']
        self.assertEqual([r['after'] for r in rows], [1.0, 1.0])

    def test_infeasible(self):
        loads = self.write_file('loads.json', {'loads': [[9, 1, 1, 1]]})
        code, _, err = self.run_main('place', loads, '-R', '2', '--slots', '1', '--out-dir', self.dir)
        self.assertEqual(code, EXIT_INFEASIBLE)
        self.assertTrue(err.startswith('error: '))

    def test_missing_file(self):
        code, _, _ = self.run_main('place', self.path('nope.json'), '-R', '2')
        self.assertEqual(code, EXIT_CONFIG)


class PatternSearchTest(CommandTestCase):

    def test_packaged_search(self):
        code, out, _ = self.run_main('pattern-search', '--out-dir', self.dir)
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(out.startswith('11100000 latency 13.0'))
        with io.open(self.path('pattern.json'), encoding='utf-8') as f:
            data = json.load(f)
        self.assertEqual(data['pattern'], data['optimum']['pattern'])
        with io.open(self.path('curve.csv'), encoding='utf-8') as f:
            rows = list(csv.DictReader(f))
        self.assertEqual(len(rows), data['generations'])

    def test_infeasible_is_not_an_error(self):
        code, out, _ = self.run_main('pattern-search', '--set', 'ga.tau=1.5', '--set', 'ga.generations=3',
                                     '--set', 'search.exhaustive=false', '--out-dir', self.dir)
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(out.startswith('infeasible'))

    def test_bad_config(self):
        code, _, err = self.run_main('pattern-search', '--set', 'ga.bogus=1', '--out-dir', self.dir)
        self.assertEqual(code, EXIT_CONFIG)
        self.assertIn('unknown key ga.bogus', err)


class SimulateTest(CommandTestCase):

    def test_bad_scenario(self):
        code, _, err = self.run_main('simulate', '--set', 'cluster.bogus=1', '--out-dir', self.dir)
        self.assertEqual(code, EXIT_CONFIG)
        self.assertIn('unknown key cluster.bogus', err)
        self.assertEqual(os.listdir(self.dir), [])

    def test_missing_scenario(self):
        code, _, _ = self.run_main('simulate', self.path('nope.yaml'))
        self.assertEqual(code, EXIT_CONFIG)

    @mock.patch.dict(os.environ, {'PDSIM_THREADS': '1'})
    def test_simulate_and_report(self):
        scenario = self.write_file('small.yaml', SMALL_SCENARIO)
        code, out, _ = self.run_main('simulate', scenario, '--events', '--out-dir', self.path('run'))
        self.assertEqual(code, EXIT_OK)
        self.assertIn('2P8-1D8/b4/all-on/s0', out)
        for name in ('report.csv', 'report.json', 'events.jsonl', 'manifest.json'):
            self.assertTrue(os.path.exists(self.path('run', name)), name)
        self.assertFalse(os.path.exists(self.path('run', 'events-0000.jsonl')))

        code, _, _ = self.run_main('report', self.path('run', 'events.jsonl'), '--out-dir', self.path('again'))
        self.assertEqual(code, EXIT_OK)
        with io.open(self.path('run', 'report.csv'), encoding='utf-8') as f:
            first = f.read()
        with io.open(self.path('again', 'report.csv'), encoding='utf-8') as f:
            self.assertEqual(f.read(), first)


class ReportTest(CommandTestCase):

    def test_missing_log(self):
        code, _, _ = self.run_main('report', self.path('events.jsonl'))
        self.assertEqual(code, EXIT_CONFIG)

    def test_truncated_log(self):
        log = self.write_file('events.jsonl', json.dumps({'kind': 'run', 't': 0.0, 'point': 0}) + '\n')
        code, _, err = self.run_main('report', log)
        self.assertEqual(code, EXIT_INVARIANT)
        self.assertIn('truncated', err)
