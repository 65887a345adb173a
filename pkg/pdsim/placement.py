"""
Static expert placement: per-layer redundancy budget, replica counts, greedy device
assignment with a topology-aware remap, and an exhaustive oracle for small layers.

Layers are handled as R x E boolean occupancy arrays while they are being built and
stacked into a PlacementTensor at the end.
"""
import heapq
import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import LoadMatrix, PlacementTensor, imbalance_of, layer_device_loads
from .exceptions import InfeasiblePlacement, InvalidArgument, SearchSpaceTooLarge
from .logs import LoggerDecorator

logger = logging.getLogger(__name__)

REMAP_PASSES = 3
BRUTE_FORCE_LIMIT = 10 ** 7


@dataclass(frozen=True)
class BudgetVector:
    """
    Per-layer slot count s_l. Every layer has at least ceil(E/R) slots; slots above
    that minimum are paid from the redundant budget M, R instances per extra slot.
    """
    slots: tuple

    def __len__(self):
        return len(self.slots)

    def __getitem__(self, item):
        return self.slots[item]

    def __iter__(self):
        return iter(self.slots)

    def redundant(self, experts, devices):
        """number of redundant instances each layer can hold"""
        return tuple(s * devices - experts for s in self.slots)


class ReplicaCounts(tuple):
    """
    Number of replicas of every expert in one layer, each between 1 and R.
    """

    def __new__(cls, counts, devices=None):
        counts = tuple(int(c) for c in counts)
        if any(c < 1 for c in counts):
            raise InvalidArgument('Every expert needs at least one replica, got %s' % (counts,))
        if devices is not None and any(c > devices for c in counts):
            raise InvalidArgument('An expert cannot have more replicas than the %d devices, got %s'
                                  % (devices, counts))
        return super(ReplicaCounts, cls).__new__(cls, counts)

    @property
    def total(self):
        return sum(self)


class Topology(object):
    """
    Symmetric R x R inter-device communication cost with a zero diagonal.
    """

    def __init__(self, comm_cost):
        comm_cost = np.array(comm_cost, dtype=float)
        if comm_cost.ndim != 2 or comm_cost.shape[0] != comm_cost.shape[1] or comm_cost.shape[0] < 1:
            raise InvalidArgument('Topology must be a square matrix, got shape %s' % (comm_cost.shape,))
        if np.any(comm_cost < 0) or not np.all(np.isfinite(comm_cost)):
            raise InvalidArgument('Topology costs must be finite and non-negative')
        if not np.array_equal(comm_cost, comm_cost.T):
            raise InvalidArgument('Topology cost matrix must be symmetric')
        if np.any(np.diag(comm_cost) != 0):
            raise InvalidArgument('Topology cost matrix must have a zero diagonal')
        comm_cost.setflags(write=False)
        self.comm_cost = comm_cost

    @property
    def devices(self):
        return self.comm_cost.shape[0]

    @property
    def is_zero(self):
        return not np.any(self.comm_cost)

    @classmethod
    def zeros(cls, devices):
        return cls(np.zeros((devices, devices)))

    @classmethod
    def ring(cls, devices):
        """hop distance on a ring of devices"""
        idx = np.arange(devices)
        hops = np.abs(idx[:, None] - idx[None, :])
        return cls(np.minimum(hops, devices - hops))


def topology_cost(layer_bits, topo):
    """
    Sum over replicated experts of the communication cost between every pair of devices
    hosting that expert.

    :param layer_bits:  R x E occupancy of one layer
    :param topo:        Topology over the same R devices
    """
    hosting = np.asarray(layer_bits, dtype=float)
    # pairs counted once: x^T C x / 2 per expert column
    return float(np.einsum('re,rs,se->', hosting, topo.comm_cost, hosting) / 2.0)


def minimum_slots(experts, devices):
    return int(math.ceil(experts / float(devices)))


def _check_loads(loads):
    loads = np.asarray(loads, dtype=float)
    if loads.ndim != 1 or loads.size < 1:
        raise InvalidArgument('Layer loads must be a non-empty vector')
    if np.any(loads < 0) or not np.all(np.isfinite(loads)):
        raise InvalidArgument('Layer loads must be finite and non-negative')
    return loads


def layer_imbalance_without_redundancy(loads, devices):
    """
    B_l of the greedy placement with one replica per expert and the minimum slot count.
    """
    loads = _check_loads(loads)
    counts = ReplicaCounts([1] * loads.size, devices)
    placed = generate_placement(counts, loads, devices, slots=minimum_slots(loads.size, devices))
    return imbalance_of(layer_device_loads(placed.bits[0], loads))


def _apportion(units, weights, room):
    """
    Largest-remainder apportionment of ``units`` over layers with positive weight,
    never giving a layer more than its ``room``. Remainder ties go to the lower index.
    """
    given = [0] * len(weights)
    remaining = units
    while remaining > 0:
        active = [l for l, w in enumerate(weights) if w > 0 and given[l] < room[l]]
        if not active:
            break
        total = math.fsum(weights[l] for l in active)
        quotas = {l: remaining * weights[l] / total for l in active}
        handed = 0
        for l in active:
            take = min(int(math.floor(quotas[l])), room[l] - given[l])
            given[l] += take
            handed += take
        leftover = remaining - handed
        by_remainder = sorted(active, key=lambda l: (-(quotas[l] - math.floor(quotas[l])), l))
        for l in by_remainder:
            if leftover == 0:
                break
            if given[l] < room[l]:
                given[l] += 1
                leftover -= 1
        remaining = leftover
    return given, remaining


def allocate_budget_by_imbalance(D, L, R, M):
    """
    Splits the redundant slot budget M over layers.

    Every layer starts at ceil(E/R) slots. Budget is spent in units of one extra slot on
    every device of a layer (R instances), so floor(M/R) units are available. Units go to
    layers proportionally to (B_l - 1), B_l being the imbalance of the layer placed
    without redundancy, using largest-remainder rounding. Balanced layers only receive
    units once every imbalanced layer is saturated at E slots.

    :param D:   LoadMatrix
    :param L:   number of layers, must match D
    :param R:   number of devices
    :param M:   total redundant instances available
    :return:    BudgetVector
    """
    if M < 0:
        raise InvalidArgument('Redundant slot budget must be non-negative, got %s' % M)
    if R < 1:
        raise InvalidArgument('Device count must be at least 1, got %s' % R)
    if not isinstance(D, LoadMatrix):
        D = LoadMatrix(D)
    if D.layers != L:
        raise InvalidArgument('Load matrix has %d layers, expected %d' % (D.layers, L))

    experts = D.experts
    base = minimum_slots(experts, R)
    room = [experts - base] * L
    units = int(M) // R

    excess = [layer_imbalance_without_redundancy(D.row(l), R) - 1.0 for l in range(L)]
    given, remaining = _apportion(units, excess, room)
    if remaining:
        # imbalanced layers saturated, spread what is left evenly
        extra, remaining = _apportion(remaining, [1.0] * L, [room[l] - given[l] for l in range(L)])
        given = [g + x for g, x in zip(given, extra)]
    if remaining:
        logger.info('%d budget units left unused, every layer is at %d slots', remaining, experts)

    budget = BudgetVector(tuple(base + g for g in given))
    logger.debug('Budget %s from per-layer excess imbalance %s', budget.slots, excess)
    return budget


def determine_replicas(D_l, k, R, full=()):
    """
    Heap-based greedy: starting from one replica each, hands out k extra replicas, each
    to the expert with the highest per-replica load that is not yet on every device.

    :param D_l:  E loads of one layer
    :param k:    number of redundant instances to place, on top of those of ``full``
    :param R:    number of devices
    :param full: experts that start out replicated on every device
    :return:     ReplicaCounts
    """
    loads = _check_loads(D_l)
    experts = loads.size
    full = frozenset(full)
    room = (experts - len(full)) * (R - 1)
    if k < 0 or k > room:
        raise InvalidArgument('Redundancy %s outside 0..%d for %d experts on %d devices'
                              % (k, room, experts, R))
    counts = [R if e in full else 1 for e in range(experts)]
    heap = [(-loads[e], e) for e in range(experts) if e not in full] if R > 1 else []
    heapq.heapify(heap)
    for _ in range(k):
        _, e = heapq.heappop(heap)
        counts[e] += 1
        if counts[e] < R:
            heapq.heappush(heap, (-loads[e] / counts[e], e))
    return ReplicaCounts(counts, R)


def replica_candidates(D_l, R, slots):
    """
    Replica count vectors place_layer evaluates: the heap greedy at every redundancy
    level, once more for every number j of heaviest experts pinned to all devices.
    Pinned experts load every device evenly, which the heap alone never reaches when
    an expert needs more replicas than a heavier one.

    :return: distinct ReplicaCounts, fewest replicas first
    """
    loads = _check_loads(D_l)
    experts = loads.size
    extra = min(slots * R - experts, experts * (R - 1))
    order = sorted(range(experts), key=lambda e: (-loads[e], e))
    seen = set()
    ret = []
    for j in range(experts + 1 if R > 1 else 1):
        spent = j * (R - 1)
        if spent > extra:
            break
        for k in range(min(extra - spent, (experts - j) * (R - 1)) + 1):
            counts = determine_replicas(loads, k, R, order[:j])
            if counts not in seen:
                seen.add(counts)
                ret.append(counts)
    ret.sort(key=lambda c: c.total)
    return ret


def _greedy_assign(counts, loads, R, slots):
    experts = loads.size
    instances = sorted(((-loads[e] / counts[e], e) for e in range(experts) for _ in range(counts[e])))
    bits = np.zeros((R, experts), dtype=bool)
    used = np.zeros(R, dtype=int)
    device_load = np.zeros(R)
    for neg_share, e in instances:
        best = None
        for r in range(R):
            if used[r] >= slots or bits[r, e]:
                continue
            if best is None or device_load[r] < device_load[best]:
                best = r
        if best is None:
            raise InfeasiblePlacement('No device with a free slot left for a replica of expert %d '
                                      '(counts %s, %d slots)' % (e, tuple(counts), slots))
        bits[best, e] = True
        used[best] += 1
        device_load[best] -= neg_share
    return bits


def _remap(bits, loads, topo, passes):
    """
    First-improvement swaps of two replicas between devices, accepted when the
    topology cost drops and the imbalance does not grow.
    """
    R, experts = bits.shape
    cost = topology_cost(bits, topo)
    balance = imbalance_of(layer_device_loads(bits, loads))
    for _ in range(passes):
        improved = False
        for a in range(R):
            for b in range(a + 1, R):
                for ea in np.flatnonzero(bits[a] & ~bits[b]):
                    for eb in np.flatnonzero(bits[b] & ~bits[a]):
                        if not (bits[a, ea] and bits[b, eb]) or bits[b, ea] or bits[a, eb]:
                            continue
                        trial = bits.copy()
                        trial[a, ea], trial[b, ea] = False, True
                        trial[b, eb], trial[a, eb] = False, True
                        trial_cost = topology_cost(trial, topo)
                        if trial_cost >= cost:
                            continue
                        trial_balance = imbalance_of(layer_device_loads(trial, loads))
                        if trial_balance > balance:
                            continue
                        bits, cost, balance = trial, trial_cost, trial_balance
                        improved = True
        if not improved:
            break
    return bits


def generate_placement(C, D_l, R, topo=None, slots=None, passes=REMAP_PASSES):
    """
    Places the replicas of one layer onto devices.

    Phase 1 hands out replicas in order of descending per-replica load to the least
    loaded device that has a free slot and does not host the expert yet. Phase 2 runs
    at most ``passes`` rounds of swaps lowering the topology cost.

    :param C:       ReplicaCounts (or a plain sequence) for the layer
    :param D_l:     E loads
    :param R:       number of devices
    :param topo:    Topology, None is the zero topology
    :param slots:   slots per device, defaults to the fewest that fit all replicas
    :return:        single-layer PlacementTensor
    """
    loads = _check_loads(D_l)
    counts = ReplicaCounts(C, R)
    if len(counts) != loads.size:
        raise InvalidArgument('Got %d replica counts for %d experts' % (len(counts), loads.size))
    if slots is None:
        slots = minimum_slots(counts.total, R)
    if counts.total > slots * R:
        raise InfeasiblePlacement('%d replicas do not fit into %d devices x %d slots' % (counts.total, R, slots))

    bits = _greedy_assign(counts, loads, R, slots)
    if topo is not None and not topo.is_zero:
        if topo.devices != R:
            raise InvalidArgument('Topology has %d devices, placement has %d' % (topo.devices, R))
        bits = _remap(bits, loads, topo, passes)
    return PlacementTensor(bits[None, :, :], slots=[slots])


def _balance_key(bits, loads):
    dev = layer_device_loads(bits, loads)
    return float(dev.max()), float(np.dot(dev, dev)), dev


def _shave_moves(bits, p, slots):
    """occupancies one replica move away that take load off device p"""
    R = bits.shape[0]
    counts = bits.sum(axis=0)
    free = bits.sum(axis=1) < slots
    for e in np.flatnonzero(bits[p]):
        if counts[e] > 1:
            trial = bits.copy()
            trial[p, e] = False
            yield trial
        for r in range(R):
            if r == p or bits[r, e]:
                continue
            if free[r]:
                trial = bits.copy()
                trial[r, e] = True
                yield trial
                trial = trial.copy()
                trial[p, e] = False
                yield trial
            for f in np.flatnonzero(bits[r] & ~bits[p]):
                trial = bits.copy()
                trial[p, e], trial[r, e] = False, True
                trial[r, f], trial[p, f] = False, True
                yield trial


def refine_balance(bits, loads, slots, max_moves=None):
    """
    Best-improvement hill climbing on the most loaded device: adds, drops, relocates or
    swaps one of its replicas while that lowers the peak device load, or keeps the peak
    and lowers the sum of squared device loads.

    :param bits:    R x E occupancy
    :return:        refined R x E occupancy
    """
    loads = _check_loads(loads)
    bits = np.array(bits, dtype=bool)
    R, experts = bits.shape
    if R < 2:
        return bits
    max_moves = max_moves if max_moves is not None else 2 * R * experts
    peak, square, dev = _balance_key(bits, loads)
    for _ in range(max_moves):
        eps = 1e-12 * max(1.0, square)
        best = None
        for trial in _shave_moves(bits, int(np.argmax(dev)), slots):
            key = _balance_key(trial, loads)
            if best is None or key[:2] < best[1][:2]:
                best = (trial, key)
        if best is None:
            break
        t_peak, t_square, t_dev = best[1]
        if not (t_peak < peak - 1e-12 * max(1.0, peak) or (t_peak <= peak and t_square < square - eps)):
            break
        bits, peak, square, dev = best[0], t_peak, t_square, t_dev
    return bits


@LoggerDecorator.log()
def place_layer(D_l, R, slots, topo=None):
    """
    Tries every candidate of replica_candidates, keeps the most balanced placement
    (ties go to fewer replicas), shaves its peak with refine_balance and finally runs
    the topology remap.

    :return: (R x E occupancy, imbalance, redundancy level)
    """
    loads = _check_loads(D_l)
    experts = loads.size
    best = None
    for counts in replica_candidates(loads, R, slots):
        try:
            placed = generate_placement(counts, loads, R, None, slots)
        except InfeasiblePlacement as e:
            logger.debug('Skipping replica counts %s: %s', tuple(counts), e)
            continue
        balance = imbalance_of(layer_device_loads(placed.bits[0], loads))
        if best is None or balance < best[1]:
            best = (placed.bits[0], balance)
    if best is None:
        raise InfeasiblePlacement('No redundancy level yields a legal placement with %d slots' % slots)
    bits = refine_balance(best[0], loads, slots)
    if topo is not None and not topo.is_zero:
        if topo.devices != R:
            raise InvalidArgument('Topology has %d devices, placement has %d' % (topo.devices, R))
        bits = _remap(bits, loads, topo, REMAP_PASSES)
    return bits, imbalance_of(layer_device_loads(bits, loads)), int(bits.sum()) - experts


def static_expert_placement(D, L, R, M, topo=None):
    """
    Static placement of every layer: budget allocation followed by a per-layer search
    over redundancy levels.

    :param D:       LoadMatrix
    :param L:       number of layers
    :param R:       number of devices
    :param M:       redundant instance budget
    :param topo:    optional Topology
    :return:        (PlacementTensor, BudgetVector)
    """
    if not isinstance(D, LoadMatrix):
        D = LoadMatrix(D)
    budget = allocate_budget_by_imbalance(D, L, R, M)
    layers = []
    for l in range(L):
        bits, balance, k = place_layer(D.row(l), R, budget[l], topo)
        logger.debug('Layer %d: %d slots, redundancy %d, imbalance %.4f', l, budget[l], k, balance)
        layers.append(bits)
    return PlacementTensor(np.stack(layers), slots=budget.slots), budget


def brute_force_layer(D_l, R, s_l):
    """
    Exhaustive search over every legal occupancy of one layer, for testing the greedy.

    Experts are visited in descending load, each taking a non-empty set of devices with
    free slots; branches whose partial peak already reaches the best peak are cut.

    :return: (single-layer PlacementTensor, optimal imbalance)
    """
    loads = _check_loads(D_l)
    experts = loads.size
    if s_l * R < experts:
        raise InfeasiblePlacement('%d experts do not fit into %d devices x %d slots' % (experts, R, s_l))
    space = (2 ** R - 1) ** experts
    if space > BRUTE_FORCE_LIMIT:
        raise SearchSpaceTooLarge('Exhaustive search over %d candidates exceeds the limit of %d'
                                  % (space, BRUTE_FORCE_LIMIT))

    order = sorted(range(experts), key=lambda e: (-loads[e], e))
    subsets = [[r for r in range(R) if mask >> r & 1] for mask in range(1, 2 ** R)]
    floor_peak = loads.sum() / R
    device_load = [0.0] * R
    used = [0] * R
    chosen = [None] * experts
    best = {'peak': math.inf, 'choice': None}

    def search(i):
        if i == experts:
            peak = max(device_load)
            if peak < best['peak']:
                best['peak'] = peak
                best['choice'] = list(chosen)
            return
        e = order[i]
        for devs in subsets:
            if any(used[r] >= s_l for r in devs):
                continue
            share = loads[e] / len(devs)
            for r in devs:
                device_load[r] += share
                used[r] += 1
            if max(device_load) < best['peak']:
                chosen[e] = devs
                search(i + 1)
            for r in devs:
                device_load[r] -= share
                used[r] -= 1
            if best['peak'] <= floor_peak:
                return

    search(0)
    bits = np.zeros((R, experts), dtype=bool)
    for e, devs in enumerate(best['choice']):
        bits[devs, e] = True
    return PlacementTensor(bits[None, :, :], slots=[s_l]), imbalance_of(layer_device_loads(bits, loads))


def load_matrix_from_json(data):
    """
    {"layers": L, "experts": E, "loads": [[...], ...]}; layers and experts are optional
    and checked when present.
    """
    D = LoadMatrix(data['loads'])
    for key, value in (('layers', D.layers), ('experts', D.experts)):
        if key in data and data[key] != value:
            raise InvalidArgument('Load file declares %s=%s but the matrix has %s' % (key, data[key], value))
    return D


def placement_to_json(P, slots=None):
    data = {
        'layers': P.layers,
        'devices': P.devices,
        'experts': P.experts,
        'bits': P.to_device_lists(),
    }
    slots = slots if slots is not None else P.slots
    if slots is not None:
        data['slots'] = [int(s) for s in slots]
    return data


def placement_from_json(data):
    P = PlacementTensor.from_device_lists(data['bits'], data['experts'], slots=data.get('slots'))
    if P.layers != data.get('layers', P.layers) or P.devices != data.get('devices', P.devices):
        raise InvalidArgument('Placement file dimensions do not match its bits')
    return P


def topology_from_json(data):
    """{"devices": R, "comm_cost": [[...]]} or {"ring": R}"""
    if 'ring' in data:
        return Topology.ring(int(data['ring']))
    topo = Topology(data['comm_cost'])
    if 'devices' in data and data['devices'] != topo.devices:
        raise InvalidArgument('Topology declares %s devices but the matrix has %d' % (data['devices'], topo.devices))
    return topo
