import csv
import io
import json
import os

from .base import BaseCommand
from ..attnpattern import exhaustive_search, ga_search
from ..config import load_ga_config, scenario_path


class Command(BaseCommand):
    help = 'Search the layer-wise KV cache compression pattern with a genetic algorithm'

    def add_arguments(self, parser):
        parser.add_argument('config', nargs='?', default=None,
                            help='GA config YAML file, defaults to the packaged ga.yaml')
        parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='SECTION.KEY=VALUE')
        parser.add_argument('--seed', type=int, default=None, help='GA seed')
        parser.add_argument('--out-dir', default='.', help='directory receiving pattern.json and curve.csv')

    def handle(self, *args, **options):
        path = options.get('config') or scenario_path('ga.yaml')
        overrides = list(options.get('overrides') or [])
        if options.get('seed') is not None:
            overrides.append('ga.seed=%d' % options['seed'])
        with io.open(path, encoding='utf-8') as f:
            config = load_ga_config(f, overrides, name=path)

        L = config.search.layers
        lat = config.latency_model()
        result = ga_search(config.make_oracle(), lat, config.ga, L)
        data = result.as_dict()
        data['tau'] = config.ga.tau
        data['lower_bound'] = lat.lower_bound
        if config.search.exhaustive:
            optimum = exhaustive_search(config.make_oracle(), lat, config.ga.tau, L)
            data['optimum'] = optimum.as_dict()

        os.makedirs(options['out_dir'], exist_ok=True)
        with io.open(os.path.join(options['out_dir'], 'pattern.json'), 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=2, sort_keys=True)
        with io.open(os.path.join(options['out_dir'], 'curve.csv'), 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(('generation', 'best_acc', 'best_latency', 'feasible_count'))
            for point in result.curve:
                writer.writerow((point.generation, repr(point.best_acc), repr(point.best_latency),
                                 point.feasible_count))

        if result.infeasible:
            self.write('infeasible: no pattern reaches accuracy %s (best %.4f)' % (config.ga.tau, result.accuracy))
        else:
            self.write('%s latency %s accuracy %.4f' % (result.pattern, result.latency, result.accuracy))
