import os

from .base import BaseCommand
from ..report import reports_from_events, write_csv, write_json


class Command(BaseCommand):
    help = 'Recompute the reports of a simulation from its events.jsonl'

    def add_arguments(self, parser):
        parser.add_argument('events', help='event log written by simulate --events')
        parser.add_argument('--out-dir', default=None, help='defaults to the directory of the event log')

    def handle(self, *args, **options):
        if not os.path.exists(options['events']):
            raise FileNotFoundError('Event log %s does not exist' % options['events'])
        reports = reports_from_events(options['events'])
        out_dir = options.get('out_dir') or os.path.dirname(os.path.abspath(options['events']))
        os.makedirs(out_dir, exist_ok=True)
        write_json(reports, os.path.join(out_dir, 'report.json'))
        write_csv(reports, os.path.join(out_dir, 'report.csv'))
        for r in reports:
            self.write('%s b%d %s seed %d: QPM %.2f TTFT %.3f s TPOT %.2f ms'
                       % (r.xpyd, r.batch, r.method, r.seed, r.qpm, r.ttft_mean, r.tpot_mean))
