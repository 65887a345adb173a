"""
Shared domain types: expert placements, load matrices, per-device loads and metric
series, with the load and imbalance arithmetic every other module builds on.
"""
import enum
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import EmptyInput, InvalidArgument

# imbalance of a layer without any load, nothing to balance
BALANCED = 1.0


def _frozen(array):
    array.setflags(write=False)
    return array


class PlacementTensor(object):
    """
    Binary L x R x E occupancy: ``bits[l, r, e]`` is true when device r hosts a replica
    of expert e in layer l.

    Every expert of every layer lives on at least one device. When ``slots`` is given,
    no device of layer l hosts more than ``slots[l]`` experts.
    """

    def __init__(self, bits, slots=None):
        bits = np.array(bits, dtype=bool)
        if bits.ndim != 3:
            raise InvalidArgument('Placement must be a L x R x E array, got shape %s' % (bits.shape,))
        if min(bits.shape) < 1:
            raise InvalidArgument('Placement dimensions must be at least 1, got %s' % (bits.shape,))
        self.bits = _frozen(bits)
        self.slots = None
        missing = np.argwhere(~bits.any(axis=1))
        if len(missing):
            l, e = missing[0]
            raise InvalidArgument('Existence violated: expert %d of layer %d is not placed on any device' % (e, l))
        if slots is not None:
            self.validate(slots)
            self.slots = _frozen(np.array(slots, dtype=int))

    @property
    def layers(self):
        return self.bits.shape[0]

    @property
    def devices(self):
        return self.bits.shape[1]

    @property
    def experts(self):
        return self.bits.shape[2]

    @property
    def shape(self):
        return self.bits.shape

    def validate(self, slots):
        """
        Checks the capacity constraint against a per-layer slot vector.

        :param slots:   sequence of L slot counts
        :raises InvalidArgument: naming the first layer and device over capacity
        """
        slots = np.asarray(slots, dtype=int)
        if slots.shape != (self.layers,):
            raise InvalidArgument('Slot vector must have %d entries, got %d' % (self.layers, slots.size))
        used = self.bits.sum(axis=2)
        over = np.argwhere(used > slots[:, None])
        if len(over):
            l, r = over[0]
            raise InvalidArgument('Capacity violated: device %d of layer %d hosts %d experts, %d slots available'
                                  % (r, l, used[l, r], slots[l]))
        return True

    def replica_counts(self, l):
        return self.bits[l].sum(axis=0)

    def hosted(self, l, r):
        return [int(e) for e in np.flatnonzero(self.bits[l, r])]

    def share_matrix(self, literal=False):
        """
        L x E x R weights of how much of D[l, e] lands on device r. Split mode divides
        the load evenly over the replicas, literal mode charges every replica fully.
        """
        hosting = self.bits.transpose(0, 2, 1).astype(float)
        if literal:
            return hosting
        return hosting / hosting.sum(axis=2, keepdims=True)

    def to_device_lists(self):
        return [[self.hosted(l, r) for r in range(self.devices)] for l in range(self.layers)]

    @classmethod
    def from_device_lists(cls, layers, experts, slots=None):
        """
        Builds a placement from per-layer lists of device -> expert ids.

        :param layers:  ``layers[l][r]`` is the list of experts device r hosts in layer l
        :param experts: E, number of experts per layer
        """
        devices = {len(devs) for devs in layers}
        if len(devices) != 1:
            raise InvalidArgument('All layers must list the same number of devices')
        bits = np.zeros((len(layers), devices.pop(), experts), dtype=bool)
        for l, devs in enumerate(layers):
            for r, hosted in enumerate(devs):
                for e in hosted:
                    if not 0 <= e < experts:
                        raise InvalidArgument('Expert id %s out of range 0..%d' % (e, experts - 1))
                    if bits[l, r, e]:
                        raise InvalidArgument('Device %d of layer %d lists expert %d twice' % (r, l, e))
                    bits[l, r, e] = True
        return cls(bits, slots=slots)

    def with_layer(self, l, layer_bits, slots=None):
        bits = self.bits.copy()
        bits[l] = layer_bits
        return PlacementTensor(bits, slots=slots if slots is not None else self.slots)

    def __eq__(self, other):
        return isinstance(other, PlacementTensor) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash(self.bits.tobytes())

    def __repr__(self):
        return 'PlacementTensor(L=%d, R=%d, E=%d)' % self.shape


class LoadMatrix(object):
    """
    Per-layer, per-expert load D, in abstract token activations per window.
    """

    def __init__(self, values):
        values = np.array(values, dtype=float)
        if values.ndim != 2 or min(values.shape) < 1:
            raise InvalidArgument('Load matrix must be a non-empty L x E array, got shape %s' % (values.shape,))
        if not np.all(np.isfinite(values)):
            raise InvalidArgument('Load matrix contains non-finite values')
        if np.any(values < 0):
            raise InvalidArgument('Load matrix contains negative loads')
        self.values = _frozen(values)

    @property
    def layers(self):
        return self.values.shape[0]

    @property
    def experts(self):
        return self.values.shape[1]

    def row(self, l):
        return self.values[l]

    def scaled(self, factor):
        return LoadMatrix(self.values * factor)

    def __eq__(self, other):
        return isinstance(other, LoadMatrix) and np.array_equal(self.values, other.values)

    def __repr__(self):
        return 'LoadMatrix(L=%d, E=%d)' % self.values.shape


@dataclass(frozen=True)
class DeviceLoadVector:
    loads: tuple

    def __len__(self):
        return len(self.loads)

    def __getitem__(self, item):
        return self.loads[item]

    def __iter__(self):
        return iter(self.loads)

    def as_array(self):
        return np.array(self.loads, dtype=float)


def _check_layer(P, D, l):
    if P.layers != D.layers or P.experts != D.experts:
        raise InvalidArgument('Dimension mismatch: placement is L=%d E=%d, loads are L=%d E=%d'
                              % (P.layers, P.experts, D.layers, D.experts))
    if not 0 <= l < P.layers:
        raise InvalidArgument('Layer %s out of range 0..%d' % (l, P.layers - 1))


def layer_device_loads(layer_bits, loads, literal=False):
    """
    Device loads of a single layer given as an R x E occupancy array and E loads.
    The building block of device_loads, used directly by the placement search.
    """
    hosting = np.asarray(layer_bits, dtype=float)
    loads = np.asarray(loads, dtype=float)
    if literal:
        return hosting @ loads
    counts = hosting.sum(axis=0)
    per_replica = np.divide(loads, counts, out=np.zeros_like(loads), where=counts > 0)
    return hosting @ per_replica


def device_loads(P, D, l, literal=False):
    """
    Aggregate load of every device in layer l.

    :param P:       PlacementTensor
    :param D:       LoadMatrix with matching L and E
    :param l:       layer index
    :param literal: charge the full D[l, e] on every replica instead of splitting it
    :return:        DeviceLoadVector of R entries
    """
    _check_layer(P, D, l)
    return DeviceLoadVector(tuple(float(x) for x in layer_device_loads(P.bits[l], D.row(l), literal)))


def all_device_loads(P, D, literal=False):
    """
    L x R array of device loads for every layer at once.
    """
    if P.layers != D.layers or P.experts != D.experts:
        raise InvalidArgument('Dimension mismatch: placement is L=%d E=%d, loads are L=%d E=%d'
                              % (P.layers, P.experts, D.layers, D.experts))
    return np.einsum('le,ler->lr', D.values, P.share_matrix(literal))


def imbalance_of(loads):
    """
    Peak over mean of a load vector; 1.0 for equal or all-zero loads.
    """
    loads = np.asarray(loads, dtype=float)
    if loads.size == 0:
        raise EmptyInput('Cannot compute imbalance of an empty load vector')
    if np.all(loads == loads[0]):
        return BALANCED
    mean = loads.mean()
    if mean <= 0:
        return BALANCED
    return max(1.0, float(loads.max() / mean))


def imbalance_ratio(P, D, l, literal=False):
    """
    Max over mean device load of layer l. Layers without load count as balanced.
    """
    return imbalance_of(device_loads(P, D, l, literal).as_array())


def max_imbalance(P, D, literal=False):
    """
    Worst layer imbalance, the scalar the dynamic scheduler compares to its trigger.
    """
    return max(imbalance_of(row) for row in all_device_loads(P, D, literal))


def baseline_placement(layers, devices, experts):
    """
    Contiguous expert-parallel layout without redundancy: expert e goes to device
    e // ceil(E / R). This is the deployment used when expert placement is turned off.

    :return:    (PlacementTensor, slots)
    """
    per_device = int(math.ceil(experts / float(devices)))
    bits = np.zeros((layers, devices, experts), dtype=bool)
    for e in range(experts):
        bits[:, e // per_device, e] = True
    slots = [per_device] * layers
    return PlacementTensor(bits, slots=slots), slots


class MetricKind(enum.Enum):
    TTFT = 'ttft_s'
    TPOT = 'tpot_ms'
    E2E = 'e2e_s'
    TOKENS = 'tokens'


class MetricSeries(object):
    """
    Ordered non-negative samples of one reported metric.
    """

    def __init__(self, samples=(), kind=MetricKind.TOKENS):
        self.kind = kind
        self.samples = []
        for s in samples:
            self.append(s)

    def append(self, sample):
        sample = float(sample)
        if not sample >= 0:
            raise InvalidArgument('Metric samples must be non-negative, got %r' % sample)
        self.samples.append(sample)

    def __len__(self):
        return len(self.samples)

    def mean(self):
        if not self.samples:
            raise EmptyInput('Mean of an empty %s series' % self.kind.value)
        return math.fsum(self.samples) / len(self.samples)

    def percentile(self, q):
        return percentile(self, q)


def percentile(series, q):
    """
    Nearest-rank percentile: the sample at index ceil(q * n) - 1 of the ascending
    order, so q=0 gives the minimum and q=1 the maximum. No interpolation.

    :param series:  MetricSeries or any sequence of numbers
    :param q:       fraction in [0, 1]
    """
    samples = series.samples if isinstance(series, MetricSeries) else list(series)
    if not samples:
        raise EmptyInput('Percentile of an empty series')
    if not 0.0 <= q <= 1.0:
        raise InvalidArgument('Percentile fraction must be in [0, 1], got %r' % q)
    ordered = sorted(samples)
    # 1e-9 keeps 0.99 * 100 from rounding up to rank 100
    rank = int(math.ceil(q * len(ordered) - 1e-9))
    return ordered[min(max(rank, 1), len(ordered)) - 1]
