import io
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor

from .base import BaseCommand
from .. import __version__
from ..config import load_scenario, scenario_path, sweep_threads
from ..logs import EventLog
from ..report import write_csv, write_json
from ..simcluster import run_simulation

logger = logging.getLogger(__name__)


def simulate_point(scenario, point, events_path=None):
    """
    Runs one sweep point in isolation; module level so that worker processes can pickle it.
    """
    with EventLog(events_path, point=point.index) as events:
        return run_simulation(point.cluster, scenario.workload, point.features, point.run, scenario.costs,
                              scenario.proxy, scenario.scheduler, scenario.attention, events)


def run_points(scenario, points, threads=1, events_dir=None):
    """
    :return: SimReport per point, in point order
    """
    paths = [None] * len(points)
    if events_dir:
        paths = [os.path.join(events_dir, 'events-%04d.jsonl' % p.index) for p in points]
    if threads <= 1:
        return [simulate_point(scenario, p, path) for p, path in zip(points, paths)]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(simulate_point, [scenario] * len(points), points, paths))


def merge_events(paths, target):
    with io.open(target, 'w', encoding='utf-8', newline='\n') as out:
        for path in paths:
            with io.open(path, encoding='utf-8') as f:
                shutil.copyfileobj(f, out)
            os.remove(path)


class Command(BaseCommand):
    help = 'Run the closed-loop cluster simulation for every point of a scenario sweep'

    def add_arguments(self, parser):
        parser.add_argument('scenario', nargs='?', default=None,
                            help='scenario YAML file, defaults to the packaged default scenario')
        parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='SECTION.KEY=VALUE',
                            help='override a scenario value, may be repeated')
        parser.add_argument('--seed', type=int, default=None, help='run seed, replaces any seed sweep')
        parser.add_argument('--out-dir', default=None, help='output directory, defaults to output.out_dir')
        parser.add_argument('--events', action='store_true', default=False,
                            help='also write events.jsonl with scheduling decisions and request records')

    def handle(self, *args, **options):
        path = options.get('scenario') or scenario_path('default.yaml')
        overrides = list(options.get('overrides') or [])
        if options.get('seed') is not None:
            overrides += ['run.seed=%d' % options['seed'], 'sweep.seeds=null']
        with io.open(path, encoding='utf-8') as f:
            scenario = load_scenario(f, overrides, name=path)

        points = scenario.points()
        threads = sweep_threads(len(points))
        out_dir = options.get('out_dir') or scenario.output.out_dir
        events = options.get('events') or scenario.output.events
        os.makedirs(out_dir, exist_ok=True)
        logger.info('Running %d sweep points on %d workers', len(points), threads)

        reports = run_points(scenario, points, threads, out_dir if events else None)

        write_json(reports, os.path.join(out_dir, 'report.json'))
        write_csv(reports, os.path.join(out_dir, 'report.csv'))
        if events:
            merge_events([os.path.join(out_dir, 'events-%04d.jsonl' % p.index) for p in points],
                         os.path.join(out_dir, 'events.jsonl'))
        with io.open(os.path.join(out_dir, 'manifest.json'), 'w', encoding='utf-8') as f:
            json.dump({'argv': sys.argv, 'version': __version__, 'scenario': path, 'points': len(points),
                       'threads': threads, 'overrides': overrides}, f, indent=2, sort_keys=True)

        for point, report in zip(points, reports):
            self.write('%-32s QPM %8.2f  TTFT %7.3f s  TPOT %7.2f ms  hit rate %.3f'
                       % (point.name, report.qpm, report.ttft_mean, report.tpot_mean, report.hit_rate))
