"""
Discrete-event simulation of a prefill/decode disaggregated MoE serving cluster.

A closed-loop client keeps a fixed number of requests in flight. Requests pass the
proxy, run prefill in token-capped batches on the prefill nodes, move their KV cache
to a decode group, and decode there in lockstep steps whose duration is gated by the
busiest die's KV traffic and by the hottest expert-parallel device. Everything runs on
one ``simpy`` clock, so a run is a pure function of its configuration and seed.
"""
import bisect
import logging
import re
from dataclasses import dataclass, replace

import numpy as np
import simpy

from .attnpattern import CompressionPattern, LatencyModel, kv_factor
from .core import LoadMatrix, all_device_loads, baseline_placement, max_imbalance
from .dynsched import DynamicExpertScheduler, SchedulerConfig
from .exceptions import InvalidArgument, InvalidConfig, InvalidParameter
from .logs import EventLog
from .placement import static_expert_placement
from .proxy import Proxy, ProxyConfig, advance_lifecycle
from .report import RequestRecord, aggregate
from .workload import WorkloadSpec, expected_loads, iter_workload

logger = logging.getLogger(__name__)

XPYD_RE = re.compile(r'^(\d+)P(\d+)-(\d+)D(\d+)$')

PLACEMENT_MODES = ('static', 'dynamic', 'none')
ATTENTION_MODES = ('pattern', 'none')
PROXY_MODES = ('oas', 'round_robin')

# timers never fire at the current instant twice
_EPSILON = 1e-9


@dataclass(frozen=True)
class ClusterConfig:
    """
    Shape of the deployment. ``xPyD`` reads as x prefill nodes of width P and y decode
    groups of D devices each; every device has ``dies_per_device`` dies and a decode
    node holds ``devices_per_node`` devices.
    """
    prefill_nodes: int = 6
    prefill_width: int = 8
    decode_groups: int = 1
    decode_width: int = 32
    devices_per_node: int = 8
    dies_per_device: int = 2
    per_die_batch: int = 40
    layers: int = 8
    experts: int = 16
    # expert-parallel devices a layer's experts are spread over
    ep_devices: int = 8
    top_k: int = 2
    # redundant expert instances over all layers, None for one per device and layer
    redundant_slots: int = None
    prefill_batch_tokens: int = 16384
    # cached tokens per prefill node, None for unlimited
    cache_capacity: int = 262144

    def __post_init__(self):
        for name in ('prefill_nodes', 'prefill_width', 'decode_groups', 'decode_width', 'devices_per_node',
                     'dies_per_device', 'per_die_batch', 'layers', 'experts', 'ep_devices', 'top_k',
                     'prefill_batch_tokens'):
            if getattr(self, name) < 1:
                raise InvalidParameter('%s must be at least 1, got %s' % (name, getattr(self, name)))
        if self.decode_width % self.devices_per_node:
            raise InvalidParameter('Decode width %d is not a whole number of %d-device nodes'
                                   % (self.decode_width, self.devices_per_node))
        if self.top_k > self.experts:
            raise InvalidParameter('top_k %d exceeds %d experts' % (self.top_k, self.experts))
        if self.redundant_slots is not None and self.redundant_slots < 0:
            raise InvalidParameter('redundant_slots must be non-negative, got %s' % self.redundant_slots)
        if self.cache_capacity is not None and self.cache_capacity < 0:
            raise InvalidParameter('cache_capacity must be non-negative, got %s' % self.cache_capacity)

    @property
    def dies_per_group(self):
        return self.decode_width * self.dies_per_device

    @property
    def decode_nodes(self):
        return self.decode_groups * self.decode_width // self.devices_per_node

    @property
    def decode_dies(self):
        return self.decode_groups * self.dies_per_group

    @property
    def concurrency(self):
        return self.per_die_batch * self.decode_nodes * self.devices_per_node * self.dies_per_device

    @property
    def budget(self):
        if self.redundant_slots is not None:
            return self.redundant_slots
        return self.layers * self.ep_devices

    @property
    def xpyd(self):
        return '%dP%d-%dD%d' % (self.prefill_nodes, self.prefill_width, self.decode_groups, self.decode_width)

    def with_xpyd(self, text):
        match = XPYD_RE.match(text.strip())
        if not match:
            raise InvalidParameter('Cluster shape %r does not read as <x>P<width>-<y>D<width>' % text)
        x, p, y, d = (int(v) for v in match.groups())
        return replace(self, prefill_nodes=x, prefill_width=p, decode_groups=y, decode_width=d)


@dataclass(frozen=True)
class CostModel:
    """
    Service-time constants, calibrated once on the 6P8-1D32 shape at per-die batch 40
    with the default workload: a prefill node handles about 9 requests/s when its
    batches are full, which puts the six prefill nodes just above the decode group's
    throughput at batch 40 and below it at batch 48. The decode step lands at about
    48 ms with every feature on and 73 ms with every feature off.
    """
    prefill_base: float = 0.05
    # seconds per uncached prompt token, 3500 tokens take 0.169 s at batch 1
    prefill_token: float = 3.4e-5
    decode_base: float = 0.023
    # seconds per KV token read on the busiest die, ~10 ms at 40 x 4.4k tokens half compressed
    decode_kv: float = 8.5e-8
    # seconds per expert activation on the hottest device, summed over layers, ~15 ms balanced
    decode_expert: float = 2.6e-6
    # prefill to decode KV transfer, seconds per prompt token
    kv_transfer: float = 1e-4

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not value >= 0:
                raise InvalidParameter('Cost %s must be non-negative, got %r' % (name, value))

    def prefill(self, new_tokens, factor=1.0):
        return self.prefill_base + self.prefill_token * new_tokens * factor

    def decode_step(self, kv_tokens, expert_peak):
        return self.decode_base + self.decode_kv * kv_tokens + self.decode_expert * expert_peak


@dataclass(frozen=True)
class FeatureSet:
    placement: str = 'dynamic'
    attn: str = 'pattern'
    proxy: str = 'oas'

    def __post_init__(self):
        for name, allowed in (('placement', PLACEMENT_MODES), ('attn', ATTENTION_MODES), ('proxy', PROXY_MODES)):
            if getattr(self, name) not in allowed:
                raise InvalidParameter('Feature %s must be one of %s, got %r'
                                       % (name, ', '.join(allowed), getattr(self, name)))

    @property
    def off(self):
        ret = []
        if self.placement == 'none':
            ret.append('placement')
        if self.attn == 'none':
            ret.append('attn')
        if self.proxy == 'round_robin':
            ret.append('proxy')
        return ret

    @property
    def label(self):
        off = self.off
        if not off:
            return 'all-on'
        if len(off) == 3:
            return 'all-off'
        return 'w/o-' + '+'.join(off)

    def ablation(self):
        """
        The five variants of the ablation study, starting from this feature set with
        every feature on.
        """
        on = FeatureSet(self.placement if self.placement != 'none' else 'dynamic', 'pattern', 'oas')
        return [
            on,
            replace(on, placement='none'),
            replace(on, attn='none'),
            replace(on, proxy='round_robin'),
            FeatureSet('none', 'none', 'round_robin'),
        ]


@dataclass(frozen=True)
class AttentionConfig:
    # layers running with the sink + recent KV cache
    pattern: str = '00111100'
    sink: int = 64
    recent: int = 960
    # relative per-layer prefill cost of a full and of a compressed layer
    full_cost: float = 1.0
    compressed_cost: float = 0.85

    def __post_init__(self):
        CompressionPattern.from_bits(self.pattern)
        if self.sink < 0 or self.recent < 0:
            raise InvalidParameter('Sink and recent window sizes must be non-negative')
        if not 0 <= self.compressed_cost < self.full_cost:
            raise InvalidParameter('Compressed layer cost %s must lie in [0, %s)'
                                   % (self.compressed_cost, self.full_cost))

    @property
    def window(self):
        return self.sink + self.recent

    def compression_pattern(self):
        return CompressionPattern.from_bits(self.pattern)

    def latency_model(self, layers):
        return LatencyModel.uniform(layers, self.full_cost, self.compressed_cost)


@dataclass(frozen=True)
class RunConfig:
    duration: float = 300.0
    ramp: float = 60.0
    warmup_fraction: float = 0.05
    seed: int = 0
    # spacing of the imbalance samples
    sample_interval: float = 10.0
    # stop after this many completions, None to run for the full duration
    max_requests: int = None

    def __post_init__(self):
        if self.duration <= 0 or self.ramp < 0 or self.ramp >= self.duration:
            raise InvalidParameter('Need 0 <= ramp < duration, got ramp %s and duration %s'
                                   % (self.ramp, self.duration))
        if not 0 <= self.warmup_fraction < 1:
            raise InvalidParameter('warmup_fraction must be in [0, 1), got %s' % self.warmup_fraction)
        if self.sample_interval <= 0:
            raise InvalidParameter('sample_interval must be positive, got %s' % self.sample_interval)
        if self.max_requests is not None and self.max_requests < 1:
            raise InvalidParameter('max_requests must be at least 1, got %s' % self.max_requests)


def prefill_duration(costs, new_tokens, pattern=None, latency=None):
    """
    Time of one prefill batch over ``new_tokens`` uncached prompt tokens. Compressed
    layers of ``pattern`` are cheaper per token as given by the latency model.
    """
    if new_tokens < 0:
        raise InvalidArgument('New token count must be non-negative, got %s' % new_tokens)
    factor = 1.0
    if pattern is not None:
        latency = latency or AttentionConfig().latency_model(pattern.layers)
        factor = latency.cost_factor(pattern)
    return costs.prefill(new_tokens, factor)


def expert_peak(placement, D_step):
    """sum over layers of the hottest device's expert load"""
    return float(all_device_loads(placement, D_step).max(axis=1).sum())


def decode_step_duration(costs, die_kv, placement, D_step, die_requests=1, attention=None):
    """
    One lockstep decode step: base cost, KV reads of the busiest die and the hottest
    expert-parallel device of every layer. With ``attention`` the compressed layers read
    at most ``attention.window`` entries per request on each die.

    :param die_kv:          KV tokens per die of the group, or one number for a single die
    :param die_requests:    requests per die, matching ``die_kv``
    :param attention:       AttentionConfig when compression is on, else None
    """
    if not isinstance(D_step, LoadMatrix):
        D_step = LoadMatrix(D_step)
    kv = np.atleast_1d(np.asarray(die_kv, dtype=float))
    if attention is not None:
        kv = kv * kv_factor(attention.compression_pattern(), kv, attention.sink, attention.recent, die_requests)
    return costs.decode_step(float(kv.max()), expert_peak(placement, D_step))


def _busy_between(marks, start, end):
    """busy seconds inside [start, end] from (batch end, cumulative busy) marks"""
    def cumulative(t):
        i = bisect.bisect_right(marks[0], t)
        return marks[1][i - 1] if i else 0.0
    return cumulative(end) - cumulative(start)


class DecodeGroup(object):
    """
    One data-parallel decode group. Dies decode in lockstep; per die the KV length is
    kept as ``kv_base + count * step`` so a step never walks the requests.
    """

    def __init__(self, sim, index):
        self.sim = sim
        self.index = index
        cluster = sim.cluster
        self.dies = cluster.dies_per_group
        self.count = np.zeros(self.dies, dtype=np.int64)
        self.kv_base = np.zeros(self.dies, dtype=np.int64)
        self.expert_counts = np.zeros((cluster.layers, cluster.experts))
        self.interval_counts = np.zeros_like(self.expert_counts)
        self.sample_counts = np.zeros_like(self.expert_counts)
        self.layer_index = np.arange(cluster.layers)[:, None]
        self.pending = []
        self.first = {}
        self.finish = {}
        self.step = 0
        self.wake = None
        self.busy = 0.0
        self.marks = ([], [])
        self.imbalance = []
        self.scheduler = None
        self._init_placement()

    def _init_placement(self):
        sim = self.sim
        c = sim.cluster
        mode = sim.features.placement
        if mode == 'static':
            loads = LoadMatrix(expected_loads(sim.spec))
            placement, budget = static_expert_placement(loads, c.layers, c.ep_devices, c.budget)
            slots = budget.slots
        else:
            placement, slots = baseline_placement(c.layers, c.ep_devices, c.experts)
        if mode == 'dynamic':
            config = sim.scheduler_config
            if config.budget is None:
                config = replace(config, budget=c.budget)
            self.scheduler = DynamicExpertScheduler(placement, slots, config, events=sim.events,
                                                    name='decode%d' % self.index)
        self.use(placement)

    def use(self, placement):
        self.placement = placement

    def admit(self, r, die):
        self.pending.append((r, die))
        if self.wake is not None and not self.wake.triggered:
            self.wake.succeed()

    def step_duration(self):
        sim = self.sim
        kv = self.kv_base + self.count * self.step
        attention = sim.attention if sim.pattern is not None else None
        return decode_step_duration(sim.costs, kv, self.placement, self.expert_counts, self.count, attention)

    def _start(self, now):
        proxy = self.sim.proxy
        for r, die in self.pending:
            proxy.decode_started(r, now)
            self.count[die] += 1
            self.kv_base[die] += r.prompt_len - self.step
            self.expert_counts[self.layer_index, r.routing] += 1
            self.first.setdefault(self.step, []).append(r)
            end = self.step + r.output_len - 1
            self.finish.setdefault(end, []).append((r, die, self.step))
        self.pending = []

    def _end(self, now):
        for r in self.first.pop(self.step, ()):
            advance_lifecycle(r, 'token', now)
        for r, die, admitted in self.finish.pop(self.step, ()):
            if r.output_len > 1:
                advance_lifecycle(r, 'tokens', now, count=r.output_len - 1)
            self.count[die] -= 1
            self.kv_base[die] -= r.prompt_len - admitted
            self.expert_counts[self.layer_index, r.routing] -= 1
            self.sim.complete(r, now)

    def run(self):
        env = self.sim.env
        while True:
            self._start(env.now)
            if not self.count.any():
                self.wake = env.event()
                yield self.wake
                self.wake = None
                continue
            duration = self.step_duration()
            self.interval_counts += self.expert_counts
            self.sample_counts += self.expert_counts
            yield env.timeout(duration)
            self.busy += duration
            self.marks[0].append(env.now)
            self.marks[1].append(self.busy)
            self._end(env.now)
            self.step += 1
            self.sim.dispatch_decode()

    def sample(self):
        env = self.sim.env
        while True:
            yield env.timeout(self.sim.run_config.sample_interval)
            counts, self.sample_counts = self.sample_counts, np.zeros_like(self.sample_counts)
            if counts.sum() > 0:
                self.imbalance.append([env.now, max_imbalance(self.placement, LoadMatrix(counts))])

    def schedule(self):
        env = self.sim.env
        scheduler = self.scheduler
        while True:
            yield env.timeout(scheduler.config.interval)
            counts, self.interval_counts = self.interval_counts, np.zeros_like(self.interval_counts)
            scheduler.observe(counts)
            _, events = scheduler.tick(env.now)
            # tick may have completed a due switch itself
            if scheduler.visible_placement is not self.placement:
                self.use(scheduler.visible_placement)
            for event in events:
                if event.kind == 'switch':
                    env.process(self._switch(event.time))

    def _switch(self, when):
        env = self.sim.env
        yield env.timeout(max(0.0, when - env.now))
        if self.scheduler.complete_migration(env.now):
            self.use(self.scheduler.visible_placement)


class ClusterSimulation(object):
    """
    One simulated benchmark run. Build it, call ``run()`` once, read the SimReport.
    ``inflight_samples`` holds (time, in-flight count) after every completion past the
    ramp.
    """

    def __init__(self, cluster=None, spec=None, features=None, run=None, costs=None, proxy=None,
                 scheduler=None, attention=None, events=None):
        self.cluster = cluster or ClusterConfig()
        self.features = features or FeatureSet()
        self.run_config = run or RunConfig()
        self.costs = costs or CostModel()
        self.attention = attention or AttentionConfig()
        self.scheduler_config = scheduler or SchedulerConfig()
        spec = spec or WorkloadSpec(layers=self.cluster.layers, experts=self.cluster.experts,
                                    top_k=self.cluster.top_k)
        self.spec = replace(spec, seed=self.run_config.seed)
        self._check()
        self.events = events or EventLog.null()

        proxy_config = proxy or ProxyConfig()
        proxy_config = replace(proxy_config, policy=self.features.proxy, block_size=self.spec.block_size,
                               cache_capacity=self.cluster.cache_capacity)
        if self.features.proxy == 'round_robin':
            proxy_config = replace(proxy_config, deferral=False)
        self.proxy = Proxy(proxy_config, self.cluster.prefill_nodes, self.cluster.decode_dies,
                           self.cluster.per_die_batch, self.events)

        self.pattern = None
        self.latency = None
        if self.features.attn == 'pattern':
            self.pattern = self.attention.compression_pattern()
            self.latency = self.attention.latency_model(self.pattern.layers)

        self.env = simpy.Environment()
        self.trace = iter_workload(self.spec)
        self.groups = [DecodeGroup(self, g) for g in range(self.cluster.decode_groups)]
        self.prefill_wake = [None] * self.cluster.prefill_nodes
        self.prefill_busy = [0.0] * self.cluster.prefill_nodes
        self.prefill_marks = [([], []) for _ in range(self.cluster.prefill_nodes)]
        self._timers = set()
        self.records = []
        self.inflight = 0
        self.injected = 0
        self.inflight_samples = []
        self.stopped = self.env.event()
        self.report = None

    def _check(self):
        c = self.cluster
        problems = []
        for name in ('layers', 'experts', 'top_k'):
            if getattr(self.spec, name) != getattr(c, name):
                problems.append('workload.%s = %s does not match cluster.%s = %s'
                                % (name, getattr(self.spec, name), name, getattr(c, name)))
        if len(self.attention.pattern) != c.layers:
            problems.append('attention.pattern has %d layers, the model %d' % (len(self.attention.pattern), c.layers))
        if c.ep_devices > c.experts:
            problems.append('cluster.ep_devices = %d leaves devices without experts (%d experts)'
                            % (c.ep_devices, c.experts))
        if problems:
            raise InvalidConfig('Inconsistent simulation configuration', problems)

    @property
    def method(self):
        return self.features.label

    # client side

    def _inject(self):
        if self.run_config.max_requests is not None and self.injected >= self.run_config.max_requests:
            return
        r = next(self.trace).arrive(self.env.now)
        self.injected += 1
        self.inflight += 1
        self.proxy.submit(r, self.env.now)
        self.dispatch_prefill()

    def _ramp(self):
        target = self.cluster.concurrency
        gap = self.run_config.ramp / float(target)
        for _ in range(target):
            self._inject()
            if gap:
                yield self.env.timeout(gap)

    def complete(self, r, now):
        self.proxy.decode_finished(r, now)
        record = RequestRecord.from_request(r, now)
        self.records.append(record)
        self.events.emit('request', now, request=r.id, arrival=r.arrival, ttft=r.ttft, tpot_sum=r.tpot_sum,
                         tpot_count=r.tpot_count, prompt_len=r.prompt_len, output_tokens=r.generated,
                         matched=r.matched_tokens)
        self.inflight -= 1
        self._inject()
        if now >= self.run_config.ramp:
            self.inflight_samples.append((now, self.inflight))
        budget = self.run_config.max_requests
        if budget is not None and len(self.records) >= budget and not self.stopped.triggered:
            self.stopped.succeed()

    # prefill side

    def prefill_time(self, new_tokens):
        return prefill_duration(self.costs, new_tokens, self.pattern, self.latency)

    def dispatch_prefill(self):
        now = self.env.now
        for r, node in self.proxy.dispatch_prefill(now):
            wake = self.prefill_wake[node]
            if wake is not None and not wake.triggered:
                wake.succeed()
        due = self.proxy.next_check(now)
        if due is not None:
            due = max(due, now + _EPSILON)
            if due not in self._timers:
                self._timers.add(due)
                self.env.process(self._timer(due))

    def _timer(self, due):
        yield self.env.timeout(due - self.env.now)
        self._timers.discard(due)
        self.dispatch_prefill()

    def _prefill(self, i):
        env = self.env
        proxy = self.proxy
        node = proxy.prefill[i]
        while True:
            if not node.queue:
                self.prefill_wake[i] = env.event()
                yield self.prefill_wake[i]
                self.prefill_wake[i] = None
                continue
            batch = proxy.take_batch(i, self.cluster.prefill_batch_tokens)
            proxy.prefill_started(i, batch, env.now)
            new_tokens = sum(r.prompt_len - r.matched_tokens for r in batch)
            duration = self.prefill_time(new_tokens)
            yield env.timeout(duration)
            proxy.prefill_finished(i, batch, env.now)
            self.prefill_busy[i] += duration
            self.prefill_marks[i][0].append(env.now)
            self.prefill_marks[i][1].append(self.prefill_busy[i])
            for r in batch:
                env.process(self._transfer(r))
            self.dispatch_prefill()

    def _transfer(self, r):
        yield self.env.timeout(self.costs.kv_transfer * r.prompt_len)
        self.proxy.decode_ready(r, self.env.now)
        self.dispatch_decode()

    # decode side

    def dispatch_decode(self):
        per_group = self.cluster.dies_per_group
        for r, die in self.proxy.dispatch_decode(self.env.now):
            self.groups[die // per_group].admit(r, die % per_group)

    def run(self):
        """
        :return: SimReport over the measurement window
        """
        if self.report is not None:
            return self.report
        env = self.env
        rc = self.run_config
        self.events.emit('run', 0.0, xpyd=self.cluster.xpyd, batch=self.cluster.per_die_batch,
                         method=self.method, seed=rc.seed, ramp=rc.ramp, warmup_fraction=rc.warmup_fraction,
                         concurrency=self.cluster.concurrency)
        for i in range(self.cluster.prefill_nodes):
            env.process(self._prefill(i))
        for group in self.groups:
            env.process(group.run())
            env.process(group.sample())
            if group.scheduler is not None:
                env.process(group.schedule())
        env.process(self._ramp())
        logger.info('Simulating %s at per-die batch %d (%d in flight), %s, seed %d',
                    self.cluster.xpyd, self.cluster.per_die_batch, self.cluster.concurrency, self.method, rc.seed)
        env.run(until=env.any_of([self.stopped, env.timeout(rc.duration)]))
        end = env.now

        since = rc.ramp if end > rc.ramp else 0.0
        utilization = {
            'prefill': [_busy_between(m, since, end) / (end - since) for m in self.prefill_marks],
            'decode': [_busy_between(g.marks, since, end) / (end - since) for g in self.groups],
        }
        imbalance = [g.imbalance for g in self.groups]
        rebalances = sum(g.scheduler.rebalances for g in self.groups if g.scheduler is not None)
        self.events.emit('end', end, utilization=utilization, imbalance=imbalance, hit_tokens=self.proxy.hit_tokens,
                         routed_prompt_tokens=self.proxy.prompt_tokens, rebalances=rebalances)
        self.report = aggregate(
            self.records, rc.ramp, end, rc.warmup_fraction,
            xpyd=self.cluster.xpyd, batch=self.cluster.per_die_batch, method=self.method, seed=rc.seed,
            hit_tokens=self.proxy.hit_tokens, routed_prompt_tokens=self.proxy.prompt_tokens,
            utilization=utilization, imbalance=imbalance, rebalances=rebalances)
        logger.info('%s: %.1f QPM, TTFT %.3f s, TPOT %.1f ms, hit rate %.3f', self.method, self.report.qpm,
                    self.report.ttft_mean, self.report.tpot_mean, self.proxy.hit_rate)
        return self.report


def run_simulation(cluster=None, spec=None, features=None, run=None, costs=None, proxy=None,
                   scheduler=None, attention=None, events=None):
    """
    Runs one closed-loop benchmark. The workload seed is taken from ``run.seed``.

    :raises InvalidConfig: on inconsistent configuration, before any event runs
    :return: SimReport
    """
    return ClusterSimulation(cluster, spec, features, run, costs, proxy, scheduler, attention, events).run()
