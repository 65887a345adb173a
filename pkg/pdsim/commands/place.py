import io
import json
import logging
import os

from .base import BaseCommand
from ..core import PlacementTensor, baseline_placement, imbalance_ratio
from ..exceptions import SearchSpaceTooLarge
from ..placement import (BudgetVector, brute_force_layer, load_matrix_from_json, place_layer, placement_to_json,
                         static_expert_placement, topology_from_json)

logger = logging.getLogger(__name__)


def _read_json(path):
    with io.open(path, encoding='utf-8') as f:
        return json.load(f)


class Command(BaseCommand):
    help = 'Compute a static expert placement for a load matrix file'

    def add_arguments(self, parser):
        parser.add_argument('loads', help='JSON file {"loads": [[...], ...]}, one row of expert loads per layer')
        parser.add_argument('-R', '--devices', type=int, required=True, help='expert-parallel devices')
        parser.add_argument('-M', '--budget', type=int, default=None,
                            help='redundant expert instances over all layers, defaults to one per device and layer')
        parser.add_argument('--slots', type=int, default=None,
                            help='fixed slots per device in every layer instead of a budget')
        parser.add_argument('--topology', default=None, help='JSON topology file, {"ring": R} or {"comm_cost": ...}')
        parser.add_argument('--oracle', action='store_true', default=False,
                            help='also run the exhaustive search per layer and print the gap')
        parser.add_argument('--out-dir', default='.', help='directory receiving placement.json')

    def handle(self, *args, **options):
        D = load_matrix_from_json(_read_json(options['loads']))
        R = options['devices']
        topo = topology_from_json(_read_json(options['topology'])) if options.get('topology') else None
        L = D.layers

        if options.get('slots') is not None:
            budget = BudgetVector((options['slots'],) * L)
            layers = [place_layer(D.row(l), R, budget[l], topo)[0] for l in range(L)]
            P = PlacementTensor(layers, slots=budget.slots)
        else:
            M = options['budget'] if options.get('budget') is not None else L * R
            P, budget = static_expert_placement(D, L, R, M, topo)

        baseline, _ = baseline_placement(L, R, D.experts)
        summary = []
        for l in range(L):
            row = {'layer': l, 'slots': int(budget[l]), 'before': imbalance_ratio(baseline, D, l),
                   'after': imbalance_ratio(P, D, l)}
            if options.get('oracle'):
                try:
                    _, optimum = brute_force_layer(D.row(l), R, budget[l])
                    row['optimum'] = optimum
                    row['gap'] = row['after'] / optimum - 1.0
                except SearchSpaceTooLarge as e:
                    logger.warning('Layer %d: %s', l, e)
                    row['optimum'] = None
            summary.append(row)

        os.makedirs(options['out_dir'], exist_ok=True)
        data = placement_to_json(P, budget.slots)
        data['imbalance'] = summary
        with io.open(os.path.join(options['out_dir'], 'placement.json'), 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=2, sort_keys=True)

        for row in summary:
            line = 'layer %d: slots %d, imbalance %.4f -> %.4f' % (row['layer'], row['slots'], row['before'],
                                                                   row['after'])
            if 'optimum' in row:
                if row['optimum'] is None:
                    line += ', optimum skipped'
                else:
                    line += ', optimum %.4f, gap %.2f%%' % (row['optimum'], 100.0 * row['gap'])
            self.write(line)
