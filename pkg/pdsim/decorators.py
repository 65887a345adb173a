"""
Registration decorators. Both follow the same pattern: the decorated callable gets a
marker attribute and stays otherwise untouched, lookups happen by name later.
"""

ORACLES = {}


def fitness_oracle(name):
    """
    Registers a fitness oracle factory so that GA configs can select it by name.

    @fitness_oracle('constant')
    def constant_oracle(value=1.0, **kwargs):
        ...

    :param name:    name used in the ``oracle.kind`` key of a GA config
    :return:        the factory itself, tagged with ``oracle_name``
    """
    def wrapper(factory):
        if name in ORACLES:
            raise ValueError('Fitness oracle %s registered twice' % name)
        factory.oracle_name = name
        ORACLES[name] = factory
        return factory
    return wrapper


def routing_policy(name, stage):
    """
    Marks a Proxy method as the implementation of one stage of a routing policy. The
    proxy collects marked methods with inspect.getmembers on first use, see
    Proxy._policy_definitions.

    :param name:    value of the ``proxy.policy`` config key, e.g. ``oas``
    :param stage:   ``prefill`` or ``decode``
    """
    def wrapper(func):
        func.routing_policy = (name, stage)
        return func
    return wrapper
