"""
Aggregation of per-request records into the reported serving metrics, report writers
and re-aggregation of a JSONL event log.
"""
import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

from .core import MetricKind, MetricSeries
from .exceptions import EmptyInput, InvariantViolation
from .logs import read_events

logger = logging.getLogger(__name__)

CSV_COLUMNS = ('xPyD', 'batch', 'QPM', 'TTFT', 'TPOT', 'p99_TTFT', 'p99_TPOT', 'E2E', 'p99_E2E',
               'OTT', 'TTT', 'method', 'seed')


@dataclass(frozen=True)
class RequestRecord:
    id: int
    arrival: float
    done: float
    ttft: float
    tpot_sum: float
    tpot_count: int
    prompt_len: int
    output_tokens: int
    matched_tokens: int = 0

    @classmethod
    def from_request(cls, r, done):
        return cls(id=r.id, arrival=r.arrival, done=done, ttft=r.ttft, tpot_sum=r.tpot_sum,
                   tpot_count=r.tpot_count, prompt_len=r.prompt_len, output_tokens=r.generated,
                   matched_tokens=r.matched_tokens)

    @property
    def e2e(self):
        return self.done - self.arrival

    @property
    def tpot_ms(self):
        if not self.tpot_count:
            return None
        return 1000.0 * self.tpot_sum / self.tpot_count


@dataclass(frozen=True)
class SimReport:
    xpyd: str
    batch: int
    method: str
    seed: int
    completed: int
    window_start: float
    window: float
    qpm: float
    ttft_mean: float
    ttft_p99: float
    tpot_mean: float
    tpot_p99: float
    e2e_mean: float
    e2e_p99: float
    ott: float
    ttt: float
    prompt_throughput: float
    output_tokens: int
    prompt_tokens: int
    hit_tokens: int = 0
    routed_prompt_tokens: int = 0
    # role -> list of busy fractions per node (prefill) or per decode group
    utilization: dict = field(default_factory=dict)
    # per decode group list of [time, imbalance]
    imbalance: list = field(default_factory=list)
    rebalances: int = 0

    @property
    def hit_rate(self):
        return self.hit_tokens / float(self.routed_prompt_tokens) if self.routed_prompt_tokens else 0.0

    def as_dict(self):
        return asdict(self)

    def csv_row(self):
        return {
            'xPyD': self.xpyd,
            'batch': self.batch,
            'QPM': '%.3f' % self.qpm,
            'TTFT': '%.4f' % self.ttft_mean,
            'TPOT': '%.3f' % self.tpot_mean,
            'p99_TTFT': '%.4f' % self.ttft_p99,
            'p99_TPOT': '%.3f' % self.tpot_p99,
            'E2E': '%.4f' % self.e2e_mean,
            'p99_E2E': '%.4f' % self.e2e_p99,
            'OTT': '%.2f' % self.ott,
            'TTT': '%.2f' % self.ttt,
            'method': self.method,
            'seed': self.seed,
        }

    def check(self):
        """
        :raises InvariantViolation: on negative metrics or broken token accounting
        """
        for name in ('qpm', 'ttft_mean', 'ttft_p99', 'tpot_mean', 'tpot_p99', 'e2e_mean', 'e2e_p99', 'ott'):
            if not getattr(self, name) >= 0:
                raise InvariantViolation('Report metric %s is negative or undefined: %r' % (name, getattr(self, name)))
        if self.ttt < self.ott:
            raise InvariantViolation('Total token throughput %r below output throughput %r' % (self.ttt, self.ott))
        return self


def _stats(series):
    try:
        return series.mean(), series.percentile(0.99)
    except EmptyInput:
        return 0.0, 0.0


def warmup_boundary(done_times, ramp_end, fraction):
    """
    Start of the measurement window: the later of the ramp end and the completion of
    the first ``fraction`` of requests.

    :return: (window start, number of leading completions to skip)
    """
    skip = int(math.ceil(fraction * len(done_times)))
    start = ramp_end
    if skip:
        start = max(start, done_times[skip - 1])
    return start, skip


def aggregate(records, ramp_end, end, warmup_fraction=0.05, **labels):
    """
    Builds a SimReport from completed request records.

    :param records:         RequestRecord list, any order
    :param ramp_end:        time the injector reached the target concurrency
    :param end:             end of the simulated run
    :param warmup_fraction: share of the earliest completions excluded from the metrics
    :param labels:          xpyd, batch, method, seed and the optional extra SimReport fields
    :raises InvariantViolation: when nothing completed inside the window
    """
    ordered = sorted(records, key=lambda r: (r.done, r.id))
    start, skip = warmup_boundary([r.done for r in ordered], ramp_end, warmup_fraction)
    measured = [r for r in ordered[skip:] if r.done >= start]
    window = end - start
    if not measured or window <= 0:
        raise InvariantViolation('No request completed inside the measurement window [%.3f, %.3f], '
                                 '%d completions in total' % (start, end, len(ordered)))
    ttft = MetricSeries((r.ttft for r in measured), MetricKind.TTFT)
    tpot = MetricSeries((r.tpot_ms for r in measured if r.tpot_count), MetricKind.TPOT)
    e2e = MetricSeries((r.e2e for r in measured), MetricKind.E2E)
    output_tokens = sum(r.output_tokens for r in measured)
    prompt_tokens = sum(r.prompt_len for r in measured)
    ott = output_tokens / window
    prompt_throughput = prompt_tokens / window
    ttft_mean, ttft_p99 = _stats(ttft)
    tpot_mean, tpot_p99 = _stats(tpot)
    e2e_mean, e2e_p99 = _stats(e2e)
    return SimReport(
        completed=len(measured),
        window_start=start,
        window=window,
        qpm=60.0 * len(measured) / window,
        ttft_mean=ttft_mean,
        ttft_p99=ttft_p99,
        tpot_mean=tpot_mean,
        tpot_p99=tpot_p99,
        e2e_mean=e2e_mean,
        e2e_p99=e2e_p99,
        ott=ott,
        ttt=ott + prompt_throughput,
        prompt_throughput=prompt_throughput,
        output_tokens=output_tokens,
        prompt_tokens=prompt_tokens,
        **labels
    ).check()


def write_json(reports, path):
    with io.open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump([r.as_dict() for r in reports], f, sort_keys=True, indent=2)
        f.write('\n')


def write_csv(reports, path):
    with io.open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS, lineterminator='\n')
        writer.writeheader()
        for r in reports:
            writer.writerow(r.csv_row())


def reports_from_events(path):
    """
    Recomputes the reports of every run recorded in an event log written with
    ``--events``.

    :return: list of SimReport in point order
    """
    runs = {}
    requests = {}
    ends = {}
    for record in read_events(path):
        kind = record['kind']
        point = record.get('point', 0)
        if kind == 'run':
            runs[point] = record
        elif kind == 'request':
            requests.setdefault(point, []).append(RequestRecord(
                id=record['request'], arrival=record['arrival'], done=record['t'], ttft=record['ttft'],
                tpot_sum=record['tpot_sum'], tpot_count=record['tpot_count'], prompt_len=record['prompt_len'],
                output_tokens=record['output_tokens'], matched_tokens=record['matched']))
        elif kind == 'end':
            ends[point] = record
    if not runs:
        raise EmptyInput('No run records in %s' % path)
    ret = []
    for point in sorted(runs):
        run = runs[point]
        if point not in ends:
            raise InvariantViolation('Run %s in %s has no end record, the log is truncated' % (point, path))
        end = ends[point]
        ret.append(aggregate(
            requests.get(point, []), run['ramp'], end['t'], run['warmup_fraction'],
            xpyd=run['xpyd'], batch=run['batch'], method=run['method'], seed=run['seed'],
            hit_tokens=end['hit_tokens'], routed_prompt_tokens=end['routed_prompt_tokens'],
            utilization=end['utilization'], imbalance=end['imbalance'], rebalances=end['rebalances']))
    logger.info('Re-aggregated %d runs from %s', len(ret), path)
    return ret
