"""
Request routing between the benchmark client and the prefill/decode pools.

Prefill routing scores every prefill node by its cached prefix for the prompt minus a
weighted load penalty. Decode routing hands out requests longest-first to the decode
instance with the least outstanding work. Requests may be held back shortly so that
they reach a prefill node right before its next batch starts.
"""
import enum
import inspect
import logging
from dataclasses import dataclass, field

from .decorators import routing_policy
from .exceptions import InvalidParameter, NoCapacity, ProtocolViolation
from .logs import EventLog
from .radix import PrefixTree

logger = logging.getLogger(__name__)


class Phase(enum.IntEnum):
    TOKENIZE = 0
    APC_MATCHING = 1
    PREFILL_WAITING = 2
    PREFILL_SCHEDULED = 3
    PREFILL_RUNNING = 4
    DECODE_WAITING = 5
    DECODE_SCHEDULED = 6
    DECODE_RUNNING = 7
    DONE = 8


# phase -> (event that leaves it, next phase)
TRANSITIONS = {
    Phase.TOKENIZE: ('tokenized', Phase.APC_MATCHING),
    Phase.APC_MATCHING: ('matched', Phase.PREFILL_WAITING),
    Phase.PREFILL_WAITING: ('prefill_scheduled', Phase.PREFILL_SCHEDULED),
    Phase.PREFILL_SCHEDULED: ('prefill_started', Phase.PREFILL_RUNNING),
    Phase.PREFILL_RUNNING: ('prefill_done', Phase.DECODE_WAITING),
    Phase.DECODE_WAITING: ('decode_scheduled', Phase.DECODE_SCHEDULED),
    Phase.DECODE_SCHEDULED: ('decode_started', Phase.DECODE_RUNNING),
    Phase.DECODE_RUNNING: ('finished', Phase.DONE),
}

TOKEN_EVENTS = ('token', 'tokens')


@dataclass(eq=False)
class Request:
    id: int
    prompt: tuple
    prompt_len: int
    output_len: int = 1
    max_tokens: int = None
    arrival: float = 0.0
    # L x top_k expert ids, only used by the simulator
    routing: object = None
    phase: Phase = Phase.TOKENIZE
    timestamps: dict = field(default_factory=dict)
    ttft: float = None
    first_token: float = None
    last_token: float = None
    tpot_sum: float = 0.0
    tpot_count: int = 0
    generated: int = 0
    matched_tokens: int = 0
    prefill_node: int = None
    decode_instance: int = None
    workload: float = 0.0

    def __post_init__(self):
        self.prompt = tuple(self.prompt)
        if not self.timestamps:
            self.timestamps[Phase.TOKENIZE] = self.arrival

    def arrive(self, now):
        """restamps a fresh trace request with its injection time"""
        if self.phase != Phase.TOKENIZE or len(self.timestamps) > 1:
            raise ProtocolViolation('Request %s already entered the system' % self.id)
        self.arrival = now
        self.timestamps = {Phase.TOKENIZE: now}
        return self

    @property
    def tpot(self):
        """mean seconds between output tokens after the first, None before the second token"""
        if not self.tpot_count:
            return None
        return self.tpot_sum / self.tpot_count

    @property
    def e2e(self):
        if Phase.DONE not in self.timestamps:
            return None
        return self.timestamps[Phase.DONE] - self.arrival


def advance_lifecycle(r, event, now, count=1):
    """
    Moves ``r`` one phase forward on the matching event, or records output tokens while
    it is decoding. ``tokens`` records ``count`` tokens spread evenly up to ``now``.

    :raises ProtocolViolation: for an event the current phase does not accept
    """
    last = max(r.timestamps.values())
    if now < last:
        raise ProtocolViolation('Request %s: event %s at t=%r precedes its last transition at t=%r'
                                % (r.id, event, now, last))
    if event in TOKEN_EVENTS:
        if r.phase != Phase.DECODE_RUNNING:
            raise ProtocolViolation('Request %s emits tokens in phase %s' % (r.id, r.phase.name))
        if r.first_token is None:
            r.first_token = r.last_token = now
            r.ttft = now - r.arrival
            r.generated += 1
            count -= 1
            if event == 'token' or count == 0:
                return r
        if count < 1:
            raise ProtocolViolation('Request %s: token count must be positive, got %s' % (r.id, count))
        r.tpot_sum += now - r.last_token
        r.tpot_count += count
        r.generated += count
        r.last_token = now
        return r
    expected = TRANSITIONS.get(r.phase)
    if expected is None or expected[0] != event:
        raise ProtocolViolation('Request %s cannot handle %r in phase %s' % (r.id, event, r.phase.name))
    r.phase = expected[1]
    r.timestamps[r.phase] = now
    return r


@dataclass(eq=False)
class NodeState:
    id: int
    role: str
    running_requests: int = 0
    running_tokens: int = 0
    queue: list = field(default_factory=list)
    batch_cycle_est: float = 0.5
    last_batch_start: float = None
    busy: bool = False
    # decode slot limit, None for unlimited
    capacity: int = None
    # outstanding effective workload, decode instances only
    workload: float = 0.0

    @property
    def has_room(self):
        return self.capacity is None or self.running_requests < self.capacity

    def next_boundary(self, now):
        """predicted start of the next batch, now for an idle node"""
        if not self.busy or self.last_batch_start is None:
            return now
        return self.last_batch_start + self.batch_cycle_est

    def record_batch(self, start, end, decay):
        self.batch_cycle_est = (1.0 - decay) * self.batch_cycle_est + decay * (end - start)


def prefix_match_score(tree, prompt, node, batch=None, prompt_len=None):
    """
    Tokens of ``prompt`` already cached on prefill node ``node``.
    """
    node_id = getattr(node, 'id', node)
    matched = tree.match(prompt, node_id, batch=batch)
    if prompt_len is not None:
        matched = min(matched, prompt_len)
    return matched


def score_prefill_node(match, node, alpha, w_r=0.0, w_t=1.0):
    return match - alpha * (w_r * node.running_requests + w_t * node.running_tokens)


def _assign_prefill(r, node, match, tree, batch):
    node.running_requests += 1
    node.running_tokens += r.prompt_len - match
    tree.insert(r.prompt, node.id, batch=batch)
    r.matched_tokens = match
    r.prefill_node = node.id


def schedule_prefill(batch, nodes, tree, alpha=0.01, w_r=0.0, w_t=1.0):
    """
    Assigns every request to its best scoring prefill node, in arrival order. Each
    choice adds the request's uncached tokens to the node's load and its prompt to the
    tree before the next request is scored, and requests of the same call can reuse
    each other's prefixes.

    :return: dict request id -> node id, in assignment order
    """
    if not nodes:
        raise NoCapacity('No prefill nodes to schedule on')
    batch_id = tree.new_batch()
    ret = {}
    for r in sorted(batch, key=lambda r: (r.arrival, r.id)):
        best, best_score, best_match = None, None, 0
        for node in nodes:
            match = prefix_match_score(tree, r.prompt, node, batch_id, r.prompt_len)
            score = score_prefill_node(match, node, alpha, w_r, w_t)
            if best is None or score > best_score:
                best, best_score, best_match = node, score, match
        _assign_prefill(r, best, best_match, tree, batch_id)
        ret[r.id] = best.id
    return ret


def effective_workload(r, default_max=1000):
    return r.prompt_len + (r.max_tokens if r.max_tokens is not None else default_max)


def schedule_decode_lpt(requests, instances, default_max=1000):
    """
    Longest-processing-time-first: requests by descending effective workload (ties by
    arrival, then id) go to the instance with the least accumulated workload (ties by
    id). Full instances are skipped; requests that find no room stay unassigned.

    :return: dict request id -> instance id
    """
    if not instances:
        raise NoCapacity('No decode instances to schedule on')
    ordered = sorted(requests, key=lambda r: (-effective_workload(r, default_max), r.arrival, r.id))
    ret = {}
    for r in ordered:
        target = None
        for inst in instances:
            if inst.has_room and (target is None or inst.workload < target.workload):
                target = inst
        if target is None:
            break
        r.workload = effective_workload(r, default_max)
        target.workload += r.workload
        target.running_requests += 1
        r.decode_instance = target.id
        ret[r.id] = target.id
    return ret


def _best_prefill_node(r, nodes, tree, config):
    best, best_score = None, None
    for node in nodes:
        match = prefix_match_score(tree, r.prompt, node, prompt_len=r.prompt_len)
        score = score_prefill_node(match, node, config.alpha, config.w_requests, config.w_tokens)
        if best is None or score > best_score:
            best, best_score = node, score
    return best, best_score


def defer_and_resort(queue, nodes, now, config, tree, dues=None):
    """
    Splits the prefill waiting queue into requests to dispatch now and requests to keep.
    A request goes out when it has waited ``hold_max``, or when its best node starts the
    next batch within the look-ahead horizon. Kept requests are re-sorted by score.

    :param dues:    optional list that receives the time each kept request becomes due
    :return: (dispatch in queue order, retained by descending score)
    """
    if not config.deferral:
        return list(queue), []
    hold = resolve_hold_max(config, nodes)
    dispatch = []
    retained = []
    for r in queue:
        if now >= r.arrival + hold:
            dispatch.append(r)
            continue
        node, score = _best_prefill_node(r, nodes, tree, config)
        horizon = resolve_horizon(config, node)
        if node.next_boundary(now) <= now + horizon:
            dispatch.append(r)
        else:
            retained.append((-score, r.arrival, r.id, r))
            if dues is not None:
                dues.append(min(r.arrival + hold, node.next_boundary(now) - horizon))
    retained.sort(key=lambda item: item[:3])
    return dispatch, [item[-1] for item in retained]


def resolve_hold_max(config, nodes):
    if config.hold_max is not None:
        return config.hold_max
    return sum(n.batch_cycle_est for n in nodes) / len(nodes)


def resolve_horizon(config, node):
    if config.horizon is not None:
        return config.horizon
    return config.horizon_fraction * node.batch_cycle_est


@dataclass(frozen=True)
class ProxyConfig:
    policy: str = 'oas'
    alpha: float = 0.01
    w_requests: float = 0.0
    w_tokens: float = 1.0
    default_max_tokens: int = 1000
    deferral: bool = True
    # None: one predicted batch cycle, the mean over prefill nodes
    hold_max: float = None
    # None: horizon_fraction of the target node's predicted cycle
    horizon: float = None
    horizon_fraction: float = 0.1
    cycle_decay: float = 0.3
    initial_cycle: float = 0.5
    # cached tokens per prefill node, None for unlimited
    cache_capacity: int = None
    block_size: int = 64

    def __post_init__(self):
        if self.alpha < 0:
            raise InvalidParameter('alpha must be non-negative, got %s' % self.alpha)
        if self.w_requests < 0 or self.w_tokens < 0:
            raise InvalidParameter('Load weights must be non-negative')
        if self.default_max_tokens < 0:
            raise InvalidParameter('Default max tokens must be non-negative')
        for name in ('hold_max', 'horizon'):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise InvalidParameter('%s must be non-negative, got %s' % (name, value))
        if not 0 < self.cycle_decay <= 1:
            raise InvalidParameter('cycle_decay must be in (0, 1], got %s' % self.cycle_decay)
        if self.initial_cycle <= 0 or self.horizon_fraction < 0 or self.block_size < 1:
            raise InvalidParameter('initial_cycle and block_size must be positive, horizon_fraction non-negative')


class Proxy(object):
    """
    The single scheduling point of a simulated deployment. The simulator reports phase
    progress through the ``*_started``, ``*_finished`` and ``decode_ready`` hooks and
    asks for routing decisions through ``dispatch_prefill`` and ``dispatch_decode``.
    """

    def __init__(self, config=None, prefill_nodes=1, decode_instances=1, decode_capacity=None, events=None):
        self.config = config or ProxyConfig()
        if prefill_nodes < 1 or decode_instances < 1:
            raise NoCapacity('A proxy needs at least one prefill node and one decode instance')
        self.tree = PrefixTree(self.config.block_size, self.config.cache_capacity)
        self.prefill = [NodeState(i, 'prefill', batch_cycle_est=self.config.initial_cycle)
                        for i in range(prefill_nodes)]
        self.decode = [NodeState(i, 'decode', capacity=decode_capacity) for i in range(decode_instances)]
        self.prefill_queue = []
        self.decode_queue = []
        self.events = events or EventLog.null()
        self.hit_tokens = 0
        self.prompt_tokens = 0
        self.dispatched = 0
        self.max_hold = 0.0
        self._rotation = {'prefill': 0, 'decode': 0}
        self._submitted = 0
        # (time, submissions, earliest due) of the last deferral pass
        self._due = None
        definitions = self._policy_definitions()
        for stage in ('prefill', 'decode'):
            if (self.config.policy, stage) not in definitions:
                raise InvalidParameter('Unknown routing policy %r, known: %s'
                                       % (self.config.policy, ', '.join(sorted({n for n, _ in definitions}))))

    def _policy_definitions(self):
        if hasattr(self, '_policy_definitions_cache'):
            return self._policy_definitions_cache
        ret = {}
        for method_name, method in inspect.getmembers(self, inspect.ismethod):
            tag = getattr(method, 'routing_policy', None)
            if tag:
                ret[tag] = method
        self._policy_definitions_cache = ret
        return ret

    def _policy(self, stage):
        return self._policy_definitions()[(self.config.policy, stage)]

    # prefill side

    def submit(self, r, now):
        advance_lifecycle(r, 'tokenized', now)
        advance_lifecycle(r, 'matched', now)
        self.prefill_queue.append(r)
        self._submitted += 1

    def dispatch_prefill(self, now):
        """
        :return: list of (request, prefill node id) sent to node queues
        """
        dues = []
        dispatch, self.prefill_queue = defer_and_resort(self.prefill_queue, self.prefill, now,
                                                        self.config, self.tree, dues)
        self._due = (now, self._submitted, min(dues) if dues else None)
        if not dispatch:
            return []
        self._policy('prefill')(dispatch, now)
        ret = []
        for r in sorted(dispatch, key=lambda r: (r.arrival, r.id)):
            advance_lifecycle(r, 'prefill_scheduled', now)
            self.prefill[r.prefill_node].queue.append(r)
            self.hit_tokens += r.matched_tokens
            self.prompt_tokens += r.prompt_len
            self.dispatched += 1
            self.max_hold = max(self.max_hold, now - r.arrival)
            if self.events.enabled:
                self.events.emit('route', now, stage='prefill', request=r.id, node=r.prefill_node,
                                 match=r.matched_tokens)
            ret.append((r, r.prefill_node))
        return ret

    # noinspection PyUnusedLocal
    @routing_policy('oas', 'prefill')
    def _oas_prefill(self, requests, now):
        c = self.config
        return schedule_prefill(requests, self.prefill, self.tree, c.alpha, c.w_requests, c.w_tokens)

    # noinspection PyUnusedLocal
    @routing_policy('round_robin', 'prefill')
    def _round_robin_prefill(self, requests, now):
        batch_id = self.tree.new_batch()
        ret = {}
        for r in sorted(requests, key=lambda r: (r.arrival, r.id)):
            node = self.prefill[self._rotation['prefill'] % len(self.prefill)]
            self._rotation['prefill'] += 1
            match = prefix_match_score(self.tree, r.prompt, node, batch_id, r.prompt_len)
            _assign_prefill(r, node, match, self.tree, batch_id)
            ret[r.id] = node.id
        return ret

    def next_check(self, now):
        """earliest time a retained request becomes dispatchable, None for an empty queue"""
        if not self.prefill_queue:
            return None
        if self._due is not None and self._due[:2] == (now, self._submitted):
            return max(self._due[2], now)
        hold = resolve_hold_max(self.config, self.prefill)
        ret = None
        for r in self.prefill_queue:
            node, _ = _best_prefill_node(r, self.prefill, self.tree, self.config)
            due = min(r.arrival + hold, node.next_boundary(now) - resolve_horizon(self.config, node))
            due = max(due, now)
            ret = due if ret is None else min(ret, due)
        return ret

    def take_batch(self, node_id, max_tokens):
        """
        Pops queued requests of a prefill node up to ``max_tokens`` uncached tokens; the
        first request is always taken.
        """
        node = self.prefill[node_id]
        batch = []
        tokens = 0
        while node.queue:
            r = node.queue[0]
            new_tokens = r.prompt_len - r.matched_tokens
            if batch and tokens + new_tokens > max_tokens:
                break
            batch.append(node.queue.pop(0))
            tokens += new_tokens
        return batch

    def prefill_started(self, node_id, requests, now):
        node = self.prefill[node_id]
        node.busy = True
        node.last_batch_start = now
        for r in requests:
            advance_lifecycle(r, 'prefill_started', now)

    def prefill_finished(self, node_id, requests, now):
        node = self.prefill[node_id]
        node.busy = False
        node.record_batch(node.last_batch_start, now, self.config.cycle_decay)
        for r in requests:
            self.tree.commit(r.prompt, node_id)
            node.running_requests -= 1
            node.running_tokens -= r.prompt_len - r.matched_tokens

    # decode side

    def decode_ready(self, r, now):
        advance_lifecycle(r, 'prefill_done', now)
        self.decode_queue.append(r)

    def dispatch_decode(self, now):
        """
        :return: list of (request, decode instance id); requests that find no free slot
                 stay queued, longest first
        """
        if not self.decode_queue:
            return []
        default_max = self.config.default_max_tokens
        self.decode_queue.sort(key=lambda r: (-effective_workload(r, default_max), r.arrival, r.id))
        assignment = self._policy('decode')(self.decode_queue, now)
        ret = []
        retained = []
        for r in self.decode_queue:
            if r.id not in assignment:
                retained.append(r)
                continue
            advance_lifecycle(r, 'decode_scheduled', now)
            if self.events.enabled:
                self.events.emit('route', now, stage='decode', request=r.id, node=r.decode_instance,
                                 workload=r.workload)
            ret.append((r, r.decode_instance))
        self.decode_queue = retained
        return ret

    # noinspection PyUnusedLocal
    @routing_policy('oas', 'decode')
    def _lpt_decode(self, requests, now):
        return schedule_decode_lpt(requests, self.decode, self.config.default_max_tokens)

    # noinspection PyUnusedLocal
    @routing_policy('round_robin', 'decode')
    def _round_robin_decode(self, requests, now):
        ret = {}
        count = len(self.decode)
        for r in sorted(requests, key=lambda r: (r.arrival, r.id)):
            target = None
            for step in range(count):
                inst = self.decode[(self._rotation['decode'] + step) % count]
                if inst.has_room:
                    target = inst
                    self._rotation['decode'] += step + 1
                    break
            if target is None:
                break
            r.workload = effective_workload(r, self.config.default_max_tokens)
            target.workload += r.workload
            target.running_requests += 1
            r.decode_instance = target.id
            ret[r.id] = target.id
        return ret

    def decode_started(self, r, now):
        advance_lifecycle(r, 'decode_started', now)

    def decode_finished(self, r, now):
        advance_lifecycle(r, 'finished', now)
        inst = self.decode[r.decode_instance]
        inst.running_requests -= 1
        inst.workload -= r.workload

    @property
    def hit_rate(self):
        return self.hit_tokens / float(self.prompt_tokens) if self.prompt_tokens else 0.0
