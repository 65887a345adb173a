"""
YAML scenario and GA search files.

Every top level section maps to one configuration dataclass. Loading collects all
problems (unknown keys, wrong types, rejected values) before failing, each anchored to
the line of the offending node, so a broken file is fixed in one round.
"""
import io
import logging
import os
from dataclasses import MISSING, dataclass, field, fields, replace

import yaml

from .attnpattern import GAConfig, LatencyModel, make_oracle
from .dynsched import SchedulerConfig
from .exceptions import InvalidConfig, PdsimError
from .proxy import ProxyConfig
from .simcluster import AttentionConfig, ClusterConfig, CostModel, FeatureSet, RunConfig
from .workload import WorkloadSpec

logger = logging.getLogger(__name__)

THREADS_ENV = 'PDSIM_THREADS'

SCENARIO_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'scenarios')


def scenario_path(name):
    """path of a scenario file shipped with the package"""
    return os.path.join(SCENARIO_DIR, name)


@dataclass(frozen=True)
class SweepConfig:
    per_die_batch: list = None
    xpyd: list = None
    ablation: bool = False
    seeds: list = None


@dataclass(frozen=True)
class OutputConfig:
    out_dir: str = 'pdsim-out'
    events: bool = False


SCENARIO_SECTIONS = {
    'cluster': ClusterConfig,
    'costs': CostModel,
    'workload': WorkloadSpec,
    'features': FeatureSet,
    'proxy': ProxyConfig,
    'scheduler': SchedulerConfig,
    'attention': AttentionConfig,
    'run': RunConfig,
    'sweep': SweepConfig,
    'output': OutputConfig,
}

# keys that exist on the dataclass but are owned by another section
DERIVED_KEYS = {
    'workload': {'layers': 'cluster.layers', 'experts': 'cluster.experts', 'top_k': 'cluster.top_k',
                 'seed': 'run.seed'},
    'proxy': {'policy': 'features.proxy', 'block_size': 'workload.block_size',
              'cache_capacity': 'cluster.cache_capacity'},
}


@dataclass(frozen=True)
class SearchConfig:
    layers: int = 8
    full_cost: float = 2.0
    compressed_cost: float = 1.0
    # 'exhaustive' additionally scans all patterns and reports the optimum
    exhaustive: bool = False


@dataclass(frozen=True)
class OracleConfig:
    kind: str = 'constant'
    params: dict = field(default_factory=dict)


GA_SECTIONS = {
    'search': SearchConfig,
    'ga': GAConfig,
    'oracle': OracleConfig,
}


class _Source(object):
    """
    Line numbers of the mapping nodes of a parsed YAML document, keyed by path.
    """

    def __init__(self, name):
        self.name = name
        self.lines = {}
        self.diagnostics = []

    def line(self, *path):
        while path:
            if path in self.lines:
                return self.lines[path]
            path = path[:-1]
        return self.lines.get((), 1)

    def error(self, message, *path, origin=None):
        self.diagnostics.append('%s:%s: %s' % (origin or self.name, self.line(*path), message))


def _parse(text, source):
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as e:
        mark = getattr(e, 'problem_mark', None)
        line = mark.line + 1 if mark is not None else 1
        source.diagnostics.append('%s:%s: %s' % (source.name, line, getattr(e, 'problem', None) or e))
        return None
    if root is None:
        return {}
    source.lines[()] = root.start_mark.line + 1
    if not isinstance(root, yaml.MappingNode):
        source.error('top level must be a mapping of sections')
        return None
    for key_node, value_node in root.value:
        source.lines[(key_node.value,)] = key_node.start_mark.line + 1
        if isinstance(value_node, yaml.MappingNode):
            for k, _ in value_node.value:
                source.lines[(key_node.value, k.value)] = k.start_mark.line + 1
    return yaml.safe_load(text)


def _type_ok(value, annotation, default):
    if value is None:
        return default is None
    if annotation is bool:
        return isinstance(value, bool)
    if annotation is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if annotation is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if annotation in (str, list, dict):
        return isinstance(value, annotation)
    return True


def _default(f):
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return MISSING


def _apply_overrides(data, overrides, source):
    for item in overrides or ():
        origin = '--set %s' % item
        key, sep, raw = item.partition('=')
        section, dot, name = key.strip().partition('.')
        if not sep or not dot or not section or not name:
            source.diagnostics.append('%s: expected section.key=value' % origin)
            continue
        try:
            value = yaml.safe_load(raw) if raw.strip() else None
        except yaml.YAMLError as e:
            source.diagnostics.append('%s: cannot parse value: %s' % (origin, e))
            continue
        target = data.setdefault(section, {})
        if not isinstance(target, dict):
            source.diagnostics.append('%s: section %s is not a mapping' % (origin, section))
            continue
        target[name] = value
        source.lines[(section, name)] = '<override>'


def _build_section(section, cls, values, source, extra=None):
    """
    :return: the dataclass instance or None when the section has problems
    """
    if values is None:
        values = {}
    if not isinstance(values, dict):
        source.error('section %s must be a mapping' % section, section)
        return None
    known = {f.name: f for f in fields(cls)}
    derived = DERIVED_KEYS.get(section, {})
    kwargs = dict(extra or {})
    ok = True
    for key, value in values.items():
        if key in derived:
            source.error('%s.%s is set through %s' % (section, key, derived[key]), section, key)
            ok = False
            continue
        if key not in known:
            source.error('unknown key %s.%s, known keys: %s' % (section, key, ', '.join(sorted(known))),
                         section, key)
            ok = False
            continue
        f = known[key]
        if not _type_ok(value, f.type, _default(f)):
            source.error('%s.%s must be of type %s, got %r' % (section, key, getattr(f.type, '__name__', f.type),
                                                               value), section, key)
            ok = False
            continue
        kwargs[key] = value
    if not ok:
        return None
    try:
        return cls(**kwargs)
    except (PdsimError, ValueError, TypeError) as e:
        source.error('invalid %s section: %s' % (section, e), section)
        return None


def _read(path_or_text, name):
    if hasattr(path_or_text, 'read'):
        return path_or_text.read(), name or getattr(path_or_text, 'name', '<stream>')
    if os.path.exists(str(path_or_text)):
        with io.open(path_or_text, encoding='utf-8') as f:
            return f.read(), name or str(path_or_text)
    return str(path_or_text), name or '<string>'


def _load(path_or_text, overrides, name, sections):
    text, name = _read(path_or_text, name)
    source = _Source(name)
    data = _parse(text, source)
    if data is None:
        raise InvalidConfig('Cannot parse %s' % name, source.diagnostics)
    _apply_overrides(data, overrides, source)
    for section in data:
        if section not in sections:
            source.error('unknown section %s, known sections: %s' % (section, ', '.join(sorted(sections))), section)
    return data, source


@dataclass(frozen=True)
class SweepPoint:
    index: int
    cluster: ClusterConfig
    features: FeatureSet
    run: RunConfig

    @property
    def name(self):
        return '%s/b%d/%s/s%d' % (self.cluster.xpyd, self.cluster.per_die_batch, self.features.label, self.run.seed)


@dataclass(frozen=True)
class ScenarioFile:
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    costs: CostModel = field(default_factory=CostModel)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    features: FeatureSet = field(default_factory=FeatureSet)
    proxy: ProxyConfig = field(default_factory=ProxyConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    run: RunConfig = field(default_factory=RunConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    name: str = '<string>'

    def points(self):
        """
        Expands the sweep axes in the order xPyD, per-die batch, seed, feature variant.
        """
        ret = []
        shapes = self.sweep.xpyd or [None]
        batches = self.sweep.per_die_batch or [self.cluster.per_die_batch]
        seeds = self.sweep.seeds or [self.run.seed]
        variants = self.features.ablation() if self.sweep.ablation else [self.features]
        for shape in shapes:
            cluster = self.cluster.with_xpyd(shape) if shape else self.cluster
            for batch in batches:
                for seed in seeds:
                    for features in variants:
                        ret.append(SweepPoint(len(ret), replace(cluster, per_die_batch=batch), features,
                                              replace(self.run, seed=seed)))
        return ret


def load_scenario(path_or_text, overrides=(), name=None):
    """
    Parses a scenario file.

    :param path_or_text:    a path, an open stream or the YAML text itself
    :param overrides:       ``section.key=value`` strings applied before validation
    :raises InvalidConfig:  listing every problem found
    """
    data, source = _load(path_or_text, overrides, name, SCENARIO_SECTIONS)
    built = {}
    for section in ('cluster', 'costs', 'features', 'proxy', 'scheduler', 'attention', 'run', 'sweep', 'output'):
        built[section] = _build_section(section, SCENARIO_SECTIONS[section], data.get(section), source)
    cluster = built['cluster']
    if cluster is not None:
        extra = {'layers': cluster.layers, 'experts': cluster.experts, 'top_k': cluster.top_k}
        built['workload'] = _build_section('workload', WorkloadSpec, data.get('workload'), source, extra)
    else:
        built['workload'] = None

    attention = built['attention']
    if cluster is not None and attention is not None and len(attention.pattern) != cluster.layers:
        source.error('attention.pattern has %d layers, cluster.layers is %d' % (len(attention.pattern), cluster.layers),
                     'attention', 'pattern')
    if cluster is not None and cluster.ep_devices > cluster.experts:
        source.error('cluster.ep_devices %d exceeds cluster.experts %d' % (cluster.ep_devices, cluster.experts),
                     'cluster', 'ep_devices')
    sweep = built['sweep']
    if sweep is not None and cluster is not None:
        for shape in sweep.xpyd or ():
            try:
                cluster.with_xpyd(str(shape))
            except PdsimError as e:
                source.error(str(e), 'sweep', 'xpyd')
        for batch in sweep.per_die_batch or ():
            if not isinstance(batch, int) or isinstance(batch, bool) or batch < 1:
                source.error('sweep.per_die_batch entries must be positive integers, got %r' % batch,
                             'sweep', 'per_die_batch')
        for seed in sweep.seeds or ():
            if not isinstance(seed, int) or isinstance(seed, bool):
                source.error('sweep.seeds entries must be integers, got %r' % seed, 'sweep', 'seeds')

    if source.diagnostics or any(v is None for v in built.values()):
        raise InvalidConfig('Invalid scenario %s' % source.name, source.diagnostics)
    logger.debug('Loaded scenario %s', source.name)
    return ScenarioFile(name=source.name, **built)


@dataclass(frozen=True)
class GASearchFile:
    search: SearchConfig
    ga: GAConfig
    oracle: OracleConfig
    name: str = '<string>'

    def latency_model(self):
        return LatencyModel.uniform(self.search.layers, self.search.full_cost, self.search.compressed_cost)

    def make_oracle(self):
        return make_oracle(self.oracle.kind, self.search.layers, **self.oracle.params)


def load_ga_config(path_or_text, overrides=(), name=None):
    """
    Parses a pattern search file with ``search``, ``ga`` and ``oracle`` sections.

    :raises InvalidConfig:  listing every problem found
    """
    data, source = _load(path_or_text, overrides, name, GA_SECTIONS)
    built = {section: _build_section(section, cls, data.get(section), source)
             for section, cls in GA_SECTIONS.items()}
    if not source.diagnostics and all(v is not None for v in built.values()):
        ret = GASearchFile(name=source.name, **built)
        try:
            ret.latency_model()
            ret.make_oracle()
        except (PdsimError, TypeError) as e:
            source.error(str(e), 'oracle')
        else:
            return ret
    raise InvalidConfig('Invalid pattern search config %s' % source.name, source.diagnostics)


def sweep_threads(points):
    """
    Worker count for a sweep: ``PDSIM_THREADS`` when set, else the CPU count, never
    more than there are points.
    """
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            threads = int(raw)
        except ValueError:
            raise InvalidConfig('%s must be an integer, got %r' % (THREADS_ENV, raw))
        if threads < 1:
            raise InvalidConfig('%s must be at least 1, got %s' % (THREADS_ENV, threads))
    else:
        threads = os.cpu_count() or 1
    return max(1, min(threads, points))
