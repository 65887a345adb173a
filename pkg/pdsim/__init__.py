from .attnpattern import CompressionPattern, GAConfig, LatencyModel, build_sparse_index_set, ga_search
from .core import LoadMatrix, PlacementTensor, imbalance_ratio
from .dynsched import DynamicExpertScheduler, SchedulerConfig
from .placement import brute_force_layer, static_expert_placement
from .proxy import Proxy, ProxyConfig
from .simcluster import ClusterConfig, CostModel, FeatureSet, RunConfig, run_simulation
from .workload import WorkloadSpec, generate_workload

__version__ = '0.1.0'

__all__ = [
    'CompressionPattern',
    'GAConfig',
    'LatencyModel',
    'build_sparse_index_set',
    'ga_search',
    'LoadMatrix',
    'PlacementTensor',
    'imbalance_ratio',
    'DynamicExpertScheduler',
    'SchedulerConfig',
    'brute_force_layer',
    'static_expert_placement',
    'Proxy',
    'ProxyConfig',
    'ClusterConfig',
    'CostModel',
    'FeatureSet',
    'RunConfig',
    'run_simulation',
    'WorkloadSpec',
    'generate_workload',
]
