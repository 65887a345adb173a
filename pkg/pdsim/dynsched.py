"""
Dynamic expert scheduler: tracks expert activations over a sliding window, forecasts
the next interval, and re-runs the static placement when the live layout has become
too unbalanced. Migrations transfer in the background and switch atomically.
"""
import collections
import logging
from dataclasses import dataclass, field

import numpy as np

from .core import LoadMatrix, PlacementTensor, max_imbalance
from .exceptions import EmptyInput, InvalidArgument, InvalidParameter, MigrationDeferred
from .logs import EventLog, LoggerDecorator
from .placement import static_expert_placement

logger = logging.getLogger(__name__)


class ActivationWindow(object):
    """
    Ring of the last ``window_len`` L x E activation snapshots, newest last.
    """

    def __init__(self, layers, experts, window_len=4, decay=0.5):
        if window_len < 1:
            raise InvalidParameter('Window length must be at least 1, got %s' % window_len)
        if not 0 < decay <= 1:
            raise InvalidParameter('Decay must be in (0, 1], got %s' % decay)
        self.layers = layers
        self.experts = experts
        self.window_len = window_len
        self.decay = decay
        self.snapshots = collections.deque(maxlen=window_len)

    @property
    def filled(self):
        return len(self.snapshots)

    def push(self, snapshot):
        snapshot = np.array(snapshot, dtype=float)
        if snapshot.shape != (self.layers, self.experts):
            raise InvalidArgument('Snapshot shape %s does not match window %s'
                                  % (snapshot.shape, (self.layers, self.experts)))
        if np.any(snapshot < 0):
            raise InvalidArgument('Activation counts must be non-negative')
        snapshot.setflags(write=False)
        self.snapshots.append(snapshot)

    def ewma(self):
        """
        Weighted average with weight decay * (1 - decay) ** age, normalized over the
        filled entries; age 0 is the newest snapshot.
        """
        if not self.snapshots:
            raise EmptyInput('Activation window is empty')
        ages = np.arange(self.filled)[::-1]
        weights = self.decay * (1.0 - self.decay) ** ages
        stacked = np.stack(self.snapshots)
        return np.tensordot(weights, stacked, axes=1) / weights.sum()


def update_activation_window(w, snapshot):
    """
    Pushes a snapshot (evicting the oldest when full) and returns the smoothed loads.

    :return: LoadMatrix D
    """
    w.push(snapshot)
    return LoadMatrix(w.ewma())


def predict_future_activations(w):
    """
    Least-squares line through the window per (layer, expert), evaluated one interval
    past the newest snapshot and clamped at zero. Constant histories predict themselves.
    """
    if not w.snapshots:
        raise EmptyInput('Cannot forecast from an empty activation window')
    ys = np.stack(w.snapshots)
    if len(ys) == 1:
        return LoadMatrix(ys[0])
    n = len(ys)
    xs = np.arange(n, dtype=float)
    x_mean = xs.mean()
    y_mean = ys.mean(axis=0)
    slope = np.tensordot(xs - x_mean, ys - y_mean, axes=1) / np.sum((xs - x_mean) ** 2)
    predicted = y_mean + slope * (n - x_mean)
    constant = np.all(ys == ys[0], axis=0)
    predicted = np.where(constant, ys[0], predicted)
    return LoadMatrix(np.maximum(predicted, 0.0))


@dataclass(frozen=True)
class SchedulerConfig:
    trigger: float = 1.2
    margin: float = 0.05
    interval: float = 10.0
    # redundant instances across all layers, None means one extra slot per device per layer
    budget: int = None
    window_len: int = 4
    decay: float = 0.5
    expert_bytes: float = 1.0
    link_bandwidth: float = 1.0

    def __post_init__(self):
        if self.trigger < 1:
            raise InvalidParameter('Imbalance trigger must be at least 1, got %s' % self.trigger)
        if self.margin < 0:
            raise InvalidParameter('Margin must be non-negative, got %s' % self.margin)
        if self.interval <= 0:
            raise InvalidParameter('Scheduling interval must be positive, got %s' % self.interval)
        if self.budget is not None and self.budget < 0:
            raise InvalidParameter('Budget must be non-negative, got %s' % self.budget)
        if self.window_len < 1:
            raise InvalidParameter('Window length must be at least 1, got %s' % self.window_len)
        if not 0 < self.decay <= 1:
            raise InvalidParameter('Decay must be in (0, 1], got %s' % self.decay)
        if self.expert_bytes < 0 or self.link_bandwidth <= 0:
            raise InvalidParameter('Expert size must be non-negative and bandwidth positive')


@dataclass(frozen=True)
class Move:
    layer: int
    expert: int
    source: int
    destination: int
    bytes: float

    def __post_init__(self):
        if self.source == self.destination:
            raise InvalidArgument('Move of expert %d in layer %d has the same source and destination'
                                  % (self.expert, self.layer))


@dataclass(frozen=True)
class MigrationPlan:
    moves: tuple
    duration: float
    start: float = 0.0
    candidate: PlacementTensor = None

    @property
    def switch_time(self):
        return self.start + self.duration

    @property
    def total_bytes(self):
        return sum(m.bytes for m in self.moves)

    @classmethod
    def from_moves(cls, moves, bandwidth, start=0.0, candidate=None):
        """
        Links transfer in parallel, so the plan takes as long as its busiest link.
        """
        per_link = collections.defaultdict(float)
        for m in moves:
            per_link[(m.source, m.destination)] += m.bytes
        duration = max(per_link.values()) / bandwidth if per_link else 0.0
        return cls(tuple(moves), duration, start, candidate)

    def summary(self):
        return {'moves': len(self.moves), 'bytes': self.total_bytes, 'duration': self.duration}


def plan_migration(old, new, expert_bytes, bandwidth, start=0.0):
    """
    Moves needed to turn ``old`` into ``new``. Every new replica is copied from the
    lowest-index device that hosts the expert in the old layout; dropped replicas need
    no transfer and disappear at the switch.
    """
    if old.layers != new.layers or old.experts != new.experts or old.devices != new.devices:
        raise InvalidArgument('Cannot migrate between placements of shapes %s and %s' % (old.shape, new.shape))
    moves = []
    for l, r, e in np.argwhere(new.bits & ~old.bits):
        source = int(np.flatnonzero(old.bits[l, :, e])[0])
        moves.append(Move(int(l), int(e), source, int(r), float(expert_bytes)))
    return MigrationPlan.from_moves(moves, bandwidth, start, new)


@dataclass(frozen=True)
class NoAction:
    b_current: float
    b_sim: float = None

    decision = 'no_action'


@dataclass(frozen=True)
class Rebalance:
    b_current: float
    b_sim: float
    plan: MigrationPlan
    candidate: PlacementTensor
    slots: tuple = field(default=())

    decision = 'rebalance'


@dataclass(frozen=True)
class SchedulerEvent:
    kind: str
    time: float
    plan: MigrationPlan


def should_rebalance(b_current, b_sim, config):
    return b_sim < b_current - config.margin


class DynamicExpertScheduler(object):
    """
    State machine advanced by the simulator: ``observe`` feeds activation snapshots,
    ``tick`` runs one scheduling step and starts or completes migrations.

    The routing-visible placement only ever changes inside complete_migration, in one
    assignment, so no caller can observe a half-applied layout.
    """

    def __init__(self, placement, slots, config=None, topology=None, events=None, name='moe'):
        self.config = config or SchedulerConfig()
        self.placement = placement
        self.slots = tuple(int(s) for s in slots)
        placement.validate(self.slots)
        self.topology = topology
        self.window = ActivationWindow(placement.layers, placement.experts,
                                       self.config.window_len, self.config.decay)
        self.loads = None
        self.in_flight = None
        self.events = events or EventLog.null()
        self.name = name
        self.rebalances = 0
        self.deferred = 0

    @property
    def visible_placement(self):
        return self.placement

    @property
    def budget(self):
        if self.config.budget is not None:
            return self.config.budget
        return self.placement.layers * self.placement.devices

    def observe(self, snapshot):
        self.loads = update_activation_window(self.window, snapshot)
        return self.loads

    @LoggerDecorator.log()
    def step(self, now):
        """
        One scheduling decision on the current window.

        :return: NoAction or Rebalance
        """
        if self.loads is None:
            raise EmptyInput('Scheduler stepped before any activations were observed')
        b_current = max_imbalance(self.placement, self.loads)
        if b_current <= self.config.trigger:
            return NoAction(b_current)

        predicted = predict_future_activations(self.window)
        P = self.placement
        candidate, budget = static_expert_placement(predicted, P.layers, P.devices, self.budget, self.topology)
        b_sim = max_imbalance(candidate, predicted)
        if not should_rebalance(b_current, b_sim, self.config):
            return NoAction(b_current, b_sim)
        plan = plan_migration(P, candidate, self.config.expert_bytes, self.config.link_bandwidth, now)
        return Rebalance(b_current, b_sim, plan, candidate, budget.slots)

    def apply_migration(self, decision, now):
        """
        Starts the background transfer of a Rebalance decision.

        :return: the transfer and switch events, in time order
        :raises MigrationDeferred: while another migration is in flight
        """
        if self.in_flight is not None:
            raise MigrationDeferred('Migration in flight until t=%.3f' % self.in_flight[0].switch_time)
        plan = decision.plan
        if plan.start != now:
            plan = MigrationPlan(plan.moves, plan.duration, now, plan.candidate)
        slots = decision.slots
        if not slots and plan.candidate is not None and plan.candidate.slots is not None:
            slots = tuple(int(s) for s in plan.candidate.slots)
        self.in_flight = (plan, slots or self.slots)
        ret = []
        if plan.moves:
            ret.append(SchedulerEvent('transfer', now, plan))
        ret.append(SchedulerEvent('switch', plan.switch_time, plan))
        return ret

    def complete_migration(self, now):
        """
        Atomically switches to the candidate once the transfer is over.

        :return: True when a switch happened
        """
        if self.in_flight is None:
            return False
        plan, slots = self.in_flight
        if now < plan.switch_time:
            return False
        if plan.candidate is not None:
            self.placement = plan.candidate
        self.slots = tuple(slots)
        self.in_flight = None
        self.events.emit('switch', now, group=self.name, **plan.summary())
        logger.info('%s: switched to new placement at t=%.3f (%d moves)', self.name, now, len(plan.moves))
        return True

    def tick(self, now):
        """
        Completes a due migration, decides, and starts the new migration if any.

        :return: (decision, events) - events is empty unless a migration started
        """
        self.complete_migration(now)
        decision = self.step(now)
        record = {'group': self.name, 'b_current': decision.b_current, 'b_sim': decision.b_sim}
        if isinstance(decision, NoAction):
            self.events.emit('scheduler', now, decision=decision.decision, **record)
            return decision, []
        try:
            events = self.apply_migration(decision, now)
        except MigrationDeferred as e:
            self.deferred += 1
            logger.debug('%s: %s', self.name, e)
            self.events.emit('scheduler', now, decision='deferred', **record)
            return decision, []
        self.rebalances += 1
        self.events.emit('scheduler', now, decision=decision.decision, plan=decision.plan.summary(), **record)
        logger.info('%s: rebalance at t=%.3f, imbalance %.3f -> %.3f', self.name, now,
                    decision.b_current, decision.b_sim)
        return decision, events


def scheduler_step(scheduler, now):
    return scheduler.step(now)


def apply_migration(scheduler, plan, now):
    """
    Starts ``plan`` on ``scheduler``; a plain plan is wrapped as a Rebalance towards
    its candidate.
    """
    if isinstance(plan, MigrationPlan):
        plan = Rebalance(float('nan'), float('nan'), plan,
                         plan.candidate if plan.candidate is not None else scheduler.placement)
    return scheduler.apply_migration(plan, now)
