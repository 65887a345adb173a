"""
Synthetic benchmark traces: long-tailed prompt and output lengths, prompts drawn partly
from a pool of shared prefixes, and per-request MoE routing labels with Zipf-skewed
expert popularity.
"""
import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidArgument, InvalidSpec
from .proxy import Request

logger = logging.getLogger(__name__)

# prompt blocks of one request never exceed cap / block_size, ids are spaced by this
_BLOCK_STRIDE = 1 << 12


@dataclass(frozen=True)
class WorkloadSpec:
    mean_in: float = 3500.0
    mean_out: float = 1000.0
    # in + out must stay below cap
    cap: int = 16384
    sigma_in: float = 0.6
    sigma_out: float = 0.8
    shared_fraction: float = 0.3
    prefix_pool: int = 64
    prefix_tokens: int = 1024
    block_size: int = 64
    # share of requests whose client sends max_tokens
    max_tokens_fraction: float = 0.5
    layers: int = 8
    experts: int = 16
    top_k: int = 2
    expert_skew: float = 1.2
    # skew of layer l is expert_skew * (1 + layer_spread * (l / (L - 1) - 0.5))
    layer_spread: float = 1.0
    seed: int = 0
    chunk: int = 1024

    def __post_init__(self):
        if self.mean_in <= 0 or self.mean_out <= 0:
            raise InvalidSpec('Mean lengths must be positive, got %s and %s' % (self.mean_in, self.mean_out))
        if self.mean_in + self.mean_out >= self.cap:
            raise InvalidSpec('Mean input %s plus mean output %s cannot stay below the cap of %s tokens'
                              % (self.mean_in, self.mean_out, self.cap))
        if self.sigma_in < 0 or self.sigma_out < 0:
            raise InvalidSpec('Log-normal shapes must be non-negative')
        if not 0.0 <= self.shared_fraction <= 1.0 or not 0.0 <= self.max_tokens_fraction <= 1.0:
            raise InvalidSpec('Fractions must lie in [0, 1]')
        if self.prefix_pool < 1 or self.block_size < 1 or self.chunk < 1:
            raise InvalidSpec('prefix_pool, block_size and chunk must be positive')
        if self.prefix_tokens % self.block_size:
            raise InvalidSpec('prefix_tokens must be a multiple of block_size')
        if self.prefix_tokens + self.block_size + 1 >= self.cap:
            raise InvalidSpec('Shared prefix does not fit under the cap')
        if self.layers < 1 or self.experts < 1 or not 1 <= self.top_k <= self.experts:
            raise InvalidSpec('Need layers >= 1 and 1 <= top_k <= experts')
        if self.expert_skew < 0 or not 0.0 <= self.layer_spread < 2.0:
            raise InvalidSpec('expert_skew must be non-negative and layer_spread in [0, 2)')
        if self.cap // self.block_size >= _BLOCK_STRIDE:
            raise InvalidSpec('cap / block_size too large for block ids')


def layer_skews(spec):
    if spec.layers == 1:
        return np.array([spec.expert_skew])
    position = np.arange(spec.layers) / float(spec.layers - 1) - 0.5
    return spec.expert_skew * (1.0 + spec.layer_spread * position)


def expert_probabilities(spec):
    """
    L x E routing probabilities: Zipf over a per-layer random ranking of experts.
    """
    rng = np.random.default_rng([spec.seed, 0x5eed])
    ret = np.empty((spec.layers, spec.experts))
    for l, skew in enumerate(layer_skews(spec)):
        ranks = rng.permutation(spec.experts)
        weights = 1.0 / (ranks + 1.0) ** skew
        ret[l] = weights / weights.sum()
    return ret


def expected_loads(spec):
    """expected expert activations per decoded token, the input of static placement"""
    return expert_probabilities(spec) * spec.top_k


def _lognormal(rng, mean, sigma, size):
    mu = math.log(mean) - sigma ** 2 / 2.0
    return np.maximum(np.rint(rng.lognormal(mu, sigma, size)), 1).astype(int)


def _lengths(rng, spec, shared, size):
    prompt = _lognormal(rng, spec.mean_in, spec.sigma_in, size)
    output = _lognormal(rng, spec.mean_out, spec.sigma_out, size)
    prompt = np.where(shared, np.maximum(prompt, spec.prefix_tokens + spec.block_size), prompt)
    bad = prompt + output >= spec.cap
    while bad.any():
        count = int(bad.sum())
        redraw_in = _lognormal(rng, spec.mean_in, spec.sigma_in, count)
        prompt[bad] = np.where(shared[bad], np.maximum(redraw_in, spec.prefix_tokens + spec.block_size),
                               redraw_in)
        output[bad] = _lognormal(rng, spec.mean_out, spec.sigma_out, count)
        bad = prompt + output >= spec.cap
    return prompt, output


def _routing(rng, log_p, top_k, size):
    # Gumbel top-k samples k distinct experts per layer with probability proportional to p
    keys = log_p[None, :, :] + rng.gumbel(size=(size,) + log_p.shape)
    return np.argsort(-keys, axis=2, kind='stable')[:, :, :top_k].astype(np.int16)


def _chunk(spec, index, log_p):
    rng = np.random.default_rng([spec.seed, index])
    size = spec.chunk
    shared = rng.random(size) < spec.shared_fraction
    pool = rng.integers(0, spec.prefix_pool, size)
    prompt_len, output_len = _lengths(rng, spec, shared, size)
    has_max = rng.random(size) < spec.max_tokens_fraction
    routing = _routing(rng, log_p, spec.top_k, size)

    prefix_blocks = spec.prefix_tokens // spec.block_size
    ret = []
    for i in range(size):
        rid = index * size + i
        blocks = int(math.ceil(prompt_len[i] / float(spec.block_size)))
        if shared[i]:
            head = [-(int(pool[i]) * prefix_blocks + b + 1) for b in range(prefix_blocks)]
        else:
            head = []
        own = range(len(head), blocks)
        prompt = tuple(head) + tuple((rid + 1) * _BLOCK_STRIDE + b for b in own)
        ret.append(Request(
            id=rid,
            prompt=prompt,
            prompt_len=int(prompt_len[i]),
            output_len=int(output_len[i]),
            max_tokens=int(output_len[i]) if has_max[i] else None,
            routing=routing[i],
        ))
    return ret


def iter_workload(spec):
    """
    Endless trace in deterministic chunks of ``spec.chunk`` requests; chunk i only
    depends on (seed, i).
    """
    log_p = np.log(expert_probabilities(spec))
    for index in itertools.count():
        for r in _chunk(spec, index, log_p):
            yield r


def generate_workload(spec, n):
    """
    :return: list of the first n requests of the trace
    """
    if n < 1:
        raise InvalidArgument('Request count must be at least 1, got %s' % n)
    return list(itertools.islice(iter_workload(spec), n))
