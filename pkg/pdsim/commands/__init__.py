import importlib
import pkgutil


def load_commands():
    """
    :return: list of (subcommand name, Command instance), one per module of this package
    """
    ret = []
    for info in sorted(pkgutil.iter_modules(__path__), key=lambda m: m.name):
        if info.name.startswith('_') or info.name == 'base':
            continue
        module = importlib.import_module('%s.%s' % (__name__, info.name))
        ret.append((info.name.replace('_', '-'), module.Command()))
    return ret
