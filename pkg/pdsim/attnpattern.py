"""
Layer-wise KV-cache compression: sink + recent token selection, reference attention,
an additive per-layer latency model and a genetic search for the compression pattern
that minimizes latency while keeping accuracy above a threshold.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .decorators import ORACLES, fitness_oracle
from .exceptions import InvalidArgument, InvalidParameter, SearchSpaceTooLarge

logger = logging.getLogger(__name__)

EXHAUSTIVE_LIMIT = 20


@dataclass(frozen=True)
class SparseIndexSet:
    total: int
    sink: int
    recent: int
    indices: tuple

    def __len__(self):
        return len(self.indices)

    def __contains__(self, item):
        return item in self.indices

    def positions(self):
        """zero-based row positions for indexing K and V"""
        return np.array(self.indices, dtype=int) - 1


def build_sparse_index_set(M, N_sink, N_recent):
    """
    Token positions kept by a compressed layer: the first N_sink tokens and the last
    N_recent tokens out of M, 1-based, deduplicated where the two regions overlap.
    """
    if M < 1:
        raise InvalidArgument('Token count must be at least 1, got %s' % M)
    if N_sink < 0 or N_recent < 0:
        raise InvalidArgument('Sink and recent sizes must be non-negative, got %s and %s' % (N_sink, N_recent))
    sink = range(1, min(N_sink, M) + 1)
    recent = range(max(1, M - N_recent + 1), M + 1) if N_recent else range(0)
    return SparseIndexSet(M, N_sink, N_recent, tuple(sorted(set(sink) | set(recent))))


def _softmax_rows(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=1, keepdims=True)


def dense_attention(Q, K, V, scale=None):
    """
    softmax(Q K^T * scale) V row by row, scale defaults to 1/sqrt(d).

    :param Q:   K x d queries
    :param K:   M x d keys
    :param V:   M x d values
    """
    Q, K, V = (np.asarray(a, dtype=float) for a in (Q, K, V))
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise InvalidArgument('Attention inputs must be 2-d arrays')
    d = Q.shape[1]
    if d < 1 or K.shape[1] != d or V.shape[1] != d:
        raise InvalidArgument('Feature dimensions disagree: Q %s, K %s, V %s' % (Q.shape, K.shape, V.shape))
    if K.shape[0] != V.shape[0] or K.shape[0] < 1:
        raise InvalidArgument('Keys and values must have the same non-zero number of rows')
    if scale is None:
        scale = 1.0 / math.sqrt(d)
    return _softmax_rows(Q @ K.T * scale) @ V


def sparse_attention(Q, K, V, idx, scale=None):
    """
    dense_attention restricted to the key/value rows selected by ``idx``.
    """
    if isinstance(idx, SparseIndexSet):
        positions = idx.positions()
    else:
        positions = np.array(sorted(idx), dtype=int) - 1
    if positions.size == 0:
        raise InvalidArgument('Sparse index set is empty')
    K = np.asarray(K, dtype=float)
    V = np.asarray(V, dtype=float)
    if positions.min() < 0 or positions.max() >= K.shape[0]:
        raise InvalidArgument('Index set reaches outside 1..%d' % K.shape[0])
    if scale is None:
        scale = 1.0 / math.sqrt(np.asarray(Q).shape[1])
    return dense_attention(Q, K[positions], V[positions], scale)


class CompressionPattern(tuple):
    """
    One boolean per layer, true for layers running on the sink + recent KV cache.
    Serialized as a bit string such as ``11000100``.
    """

    def __new__(cls, bits):
        bits = tuple(bool(b) for b in bits)
        if not bits:
            raise InvalidArgument('Compression pattern needs at least one layer')
        return super(CompressionPattern, cls).__new__(cls, bits)

    @classmethod
    def from_bits(cls, text):
        text = text.strip()
        if not text or set(text) - {'0', '1'}:
            raise InvalidArgument('Pattern must be a string of 0 and 1, got %r' % text)
        return cls(c == '1' for c in text)

    @classmethod
    def full(cls, layers):
        return cls([False] * layers)

    @property
    def layers(self):
        return len(self)

    @property
    def compressed(self):
        return sum(self)

    def compressed_layers(self):
        return [l for l, b in enumerate(self) if b]

    def __str__(self):
        return ''.join('1' if b else '0' for b in self)

    def __repr__(self):
        return 'CompressionPattern(%r)' % str(self)


class LatencyModel(object):
    """
    Additive per-layer latency: a compressed layer costs ``compressed[l]``, any other
    layer ``full[l]``.
    """

    def __init__(self, full, compressed):
        self.full = np.array(full, dtype=float)
        self.compressed = np.array(compressed, dtype=float)
        if self.full.ndim != 1 or self.full.shape != self.compressed.shape or self.full.size < 1:
            raise InvalidParameter('Full and compressed costs must be equal-length non-empty vectors')
        if np.any(self.compressed < 0):
            raise InvalidParameter('Layer costs must be non-negative')
        bad = np.flatnonzero(self.compressed >= self.full)
        if bad.size:
            l = bad[0]
            raise InvalidParameter('Compressed cost %s of layer %d is not below its full cost %s'
                                   % (self.compressed[l], l, self.full[l]))

    @classmethod
    def uniform(cls, layers, full=2.0, compressed=1.0):
        return cls([full] * layers, [compressed] * layers)

    @property
    def layers(self):
        return self.full.size

    @property
    def lower_bound(self):
        return float(self.compressed.sum())

    def latency(self, pattern):
        if len(pattern) != self.layers:
            raise InvalidArgument('Pattern has %d layers, latency model %d' % (len(pattern), self.layers))
        mask = np.array(pattern, dtype=bool)
        return float(np.where(mask, self.compressed, self.full).sum())

    def cost_factor(self, pattern):
        """latency relative to running every layer in full"""
        return self.latency(pattern) / float(self.full.sum())


def pattern_latency(p, model):
    return model.latency(p)


def kv_factor(pattern, kv_len, sink, recent, requests=1):
    """
    Average over layers of the fraction of KV entries a decode step reads: compressed
    layers read at most sink + recent entries per request.

    :param kv_len:      KV entries held by ``requests`` requests together; scalar or one
                        entry per die, ``requests`` then matching elementwise
    :return:            float for a scalar ``kv_len``, else an array
    """
    scalar = np.ndim(kv_len) == 0
    kv_len = np.atleast_1d(np.asarray(kv_len, dtype=float))
    cap = np.asarray(requests, dtype=float) * (sink + recent)
    kept = np.divide(np.minimum(kv_len, cap), kv_len, out=np.ones_like(kv_len), where=kv_len > 0)
    ret = (pattern.compressed * kept + (pattern.layers - pattern.compressed)) / float(pattern.layers)
    return float(ret[0]) if scalar else ret


class FitnessOracle(object):
    """
    Accuracy of a compression pattern in [0, 1]. Results are memoized per pattern, so a
    GA run evaluates every distinct pattern once.
    """

    def __init__(self, fn, name='custom'):
        self.fn = fn
        self.name = name
        self._cache = {}

    def evaluate(self, pattern):
        key = tuple(pattern)
        if key not in self._cache:
            value = float(self.fn(CompressionPattern(key)))
            if not 0.0 <= value <= 1.0:
                raise InvalidParameter('Oracle %s returned accuracy %r outside [0, 1]' % (self.name, value))
            self._cache[key] = value
        return self._cache[key]

    __call__ = evaluate

    @property
    def evaluations(self):
        return len(self._cache)


@fitness_oracle('constant')
def constant_oracle(layers, value=1.0):
    return FitnessOracle(lambda p: value, 'constant')


@fitness_oracle('allowed_layers')
def allowed_layers_oracle(layers, allowed=()):
    """
    Accuracy drops by 1/L for every compressed layer outside ``allowed``; with tau=1
    exactly the subsets of ``allowed`` are feasible.
    """
    allowed = frozenset(int(l) for l in allowed)

    def evaluate(p):
        return 1.0 - sum(1 for l in p.compressed_layers() if l not in allowed) / float(layers)
    return FitnessOracle(evaluate, 'allowed_layers')


@fitness_oracle('additive')
def additive_oracle(layers, sensitivity=()):
    sensitivity = np.array(sensitivity, dtype=float)
    if sensitivity.shape != (layers,):
        raise InvalidParameter('Additive oracle needs %d sensitivities, got %d' % (layers, sensitivity.size))

    def evaluate(p):
        return float(np.clip(1.0 - sensitivity[np.array(p, dtype=bool)].sum(), 0.0, 1.0))
    return FitnessOracle(evaluate, 'additive')


def make_oracle(kind, layers, **params):
    """
    Builds a registered oracle by name, e.g. ``make_oracle('allowed_layers', 8, allowed=[0, 1])``.
    """
    try:
        factory = ORACLES[kind]
    except KeyError:
        raise InvalidParameter('Unknown fitness oracle %r, known: %s' % (kind, ', '.join(sorted(ORACLES))))
    return factory(layers, **params)


@dataclass(frozen=True)
class GAConfig:
    population: int = 32
    generations: int = 200
    crossover_rate: float = 0.9
    # None means 1/L
    mutation_rate: float = None
    elitism: int = 2
    tau: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise InvalidParameter('Population must be at least 2, got %s' % self.population)
        if self.generations < 1:
            raise InvalidParameter('Generations must be at least 1, got %s' % self.generations)
        if not 1 <= self.elitism < self.population:
            raise InvalidParameter('Elitism must be between 1 and population - 1, got %s' % self.elitism)
        if not 0.0 <= self.crossover_rate <= 1.0:
            raise InvalidParameter('Crossover rate must be in [0, 1], got %s' % self.crossover_rate)
        if self.mutation_rate is not None and not 0.0 <= self.mutation_rate <= 1.0:
            raise InvalidParameter('Mutation rate must be in [0, 1], got %s' % self.mutation_rate)


@dataclass(frozen=True)
class CurvePoint:
    generation: int
    best_acc: float
    best_latency: float
    feasible_count: int


@dataclass(frozen=True)
class GAResult:
    pattern: CompressionPattern
    accuracy: float
    latency: float
    curve: tuple = field(default=())
    evaluations: int = 0

    @property
    def feasible(self):
        return self.pattern is not None

    @property
    def infeasible(self):
        return self.pattern is None

    def as_dict(self):
        return {
            'pattern': str(self.pattern) if self.feasible else 'infeasible',
            'feasible': self.feasible,
            'accuracy': self.accuracy,
            'latency': self.latency,
            'generations': len(self.curve),
            'evaluations': self.evaluations,
        }


def _rank_key(bits, accuracy, latency, tau):
    # feasible first, then lower latency; infeasible ones by higher accuracy
    if accuracy >= tau:
        return (0, latency, -accuracy, bits)
    return (1, -accuracy, latency, bits)


def _tournament(rng, ranked):
    a, b = rng.integers(0, len(ranked), size=2)
    return ranked[min(a, b)]


def ga_search(oracle, lat, cfg, L):
    """
    Genetic search for the fastest compression pattern with accuracy >= tau.

    Every generation is ranked feasible-first; the ``elitism`` best survive, the rest is
    bred with 2-way tournaments, uniform crossover and per-bit mutation. Each child has
    its own RNG stream derived from (seed, generation, slot). The search stops early once
    a feasible pattern reaches the latency lower bound.

    :param oracle:  FitnessOracle (or callable pattern -> accuracy)
    :param lat:     LatencyModel over L layers
    :param cfg:     GAConfig
    :param L:       number of layers
    :return:        GAResult, ``infeasible`` when no pattern met tau
    """
    if not isinstance(oracle, FitnessOracle):
        oracle = FitnessOracle(oracle)
    if lat.layers != L:
        raise InvalidArgument('Latency model has %d layers, search has %d' % (lat.layers, L))
    mutation = cfg.mutation_rate if cfg.mutation_rate is not None else 1.0 / L

    def score(bits):
        accuracy = oracle.evaluate(bits)
        latency = lat.latency(bits)
        return _rank_key(bits, accuracy, latency, cfg.tau), accuracy, latency

    population = [tuple(bool(b) for b in np.random.default_rng([cfg.seed, 0, i]).integers(0, 2, L))
                  for i in range(cfg.population)]
    best = None
    best_feasible = None
    curve = []
    for generation in range(cfg.generations):
        scored = sorted(score(bits) for bits in population)
        if best is None or scored[0][0] < best[0]:
            best = scored[0]
        feasible = [s for s in scored if s[0][0] == 0]
        if feasible and (best_feasible is None or feasible[0][0] < best_feasible[0]):
            best_feasible = feasible[0]
        curve.append(CurvePoint(generation, best[1], best[2], len(feasible)))

        if best_feasible is not None and math.isclose(best_feasible[2], lat.lower_bound, rel_tol=1e-12):
            logger.debug('Latency lower bound reached in generation %d', generation)
            break
        if generation == cfg.generations - 1:
            break

        ranked = [s[0][-1] for s in scored]
        children = ranked[:cfg.elitism]
        for slot in range(cfg.elitism, cfg.population):
            rng = np.random.default_rng([cfg.seed, generation + 1, slot])
            first = np.array(_tournament(rng, ranked))
            second = np.array(_tournament(rng, ranked))
            if rng.random() < cfg.crossover_rate:
                child = np.where(rng.random(L) < 0.5, first, second)
            else:
                child = first
            child = child ^ (rng.random(L) < mutation)
            children.append(tuple(bool(b) for b in child))
        population = children

    logger.info('GA finished after %d generations, %d distinct patterns evaluated', len(curve), oracle.evaluations)
    if best_feasible is None:
        return GAResult(None, best[1], best[2], tuple(curve), oracle.evaluations)
    return GAResult(CompressionPattern(best_feasible[0][-1]), best_feasible[1], best_feasible[2],
                    tuple(curve), oracle.evaluations)


def exhaustive_search(oracle, lat, tau, L):
    """
    Scans all 2^L patterns with the same ranking as ga_search; the reference optimum
    for small L.
    """
    if L > EXHAUSTIVE_LIMIT:
        raise SearchSpaceTooLarge('Exhaustive pattern scan over 2^%d patterns is too large' % L)
    if not isinstance(oracle, FitnessOracle):
        oracle = FitnessOracle(oracle)
    best = None
    for bits in itertools.product((False, True), repeat=L):
        accuracy = oracle.evaluate(bits)
        latency = lat.latency(bits)
        key = _rank_key(bits, accuracy, latency, tau)
        if best is None or key < best[0]:
            best = (key, accuracy, latency)
    if best[0][0] != 0:
        return GAResult(None, best[1], best[2], (), oracle.evaluations)
    return GAResult(CompressionPattern(best[0][-1]), best[1], best[2], (), oracle.evaluations)
