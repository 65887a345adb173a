import functools
import io
import json
import logging

trace_logger = logging.getLogger('pdsim.trace')

LOG_FORMAT = '%(levelname)s %(name)s: %(message)s'


def configure(verbosity=0, stream=None):
    """
    Installs a single stderr handler on the ``pdsim`` logger. Only the command line
    front end calls this, library code just logs.

    :param verbosity:   0 - warnings, 1 - info, 2 and more - debug including call traces
    :param stream:      optional stream, defaults to stderr
    """
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG

    root = logging.getLogger('pdsim')
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(stream)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)
    return root


class LoggerDecorator:
    """
    Traces calls of the decorated function on the ``pdsim.trace`` logger, indented by
    nesting level. Costs a single level check when debug logging is off.
    """
    level = 0

    @classmethod
    def log(clz, logger=trace_logger):
        def _decorator(fn):
            @functools.wraps(fn)
            def _decorated(*arg, **kwargs):
                if not logger.isEnabledFor(logging.DEBUG):
                    return fn(*arg, **kwargs)
                clz.level += 1
                try:
                    logger.debug("%s > '%s'(%r,%r)", ' ' * clz.level, fn.__name__, arg, kwargs)
                    ret = fn(*arg, **kwargs)
                    logger.debug("%s < %r", ' ' * clz.level, ret)
                    return ret
                finally:
                    clz.level -= 1
            return _decorated
        return _decorator


class EventLog:
    """
    JSON Lines sink for scheduler decisions, proxy decisions and request records.

    Lines are written with sorted keys and without wall-clock data so that two runs
    with the same inputs produce identical files.
    """

    def __init__(self, target=None, **context):
        """
        :param target:  a path, an open text stream, or None to discard every event
        :param context: fields added to every record, e.g. the sweep point
        """
        self._owned = False
        if target is None:
            self._stream = None
        elif isinstance(target, (str, bytes)) or hasattr(target, '__fspath__'):
            self._stream = io.open(target, 'w', encoding='utf-8', newline='\n')
            self._owned = True
        else:
            self._stream = target
        self.context = context
        self.count = 0

    @classmethod
    def null(cls):
        return cls(None)

    @property
    def enabled(self):
        return self._stream is not None

    def emit(self, kind, time, **fields):
        if self._stream is None:
            return
        record = dict(self.context)
        record.update(fields)
        record['kind'] = kind
        record['t'] = time
        self._stream.write(json.dumps(record, sort_keys=True, separators=(',', ':')))
        self._stream.write('\n')
        self.count += 1

    def close(self):
        if self._owned and self._stream is not None:
            self._stream.close()
        self._stream = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_events(path, kind=None):
    """
    Reads back a JSONL file written by EventLog.

    :param path:    file path
    :param kind:    optional filter on the ``kind`` field
    :return:        list of dicts in file order
    """
    ret = []
    with io.open(path, encoding='utf-8') as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if kind is None or record.get('kind') == kind:
                ret.append(record)
    return ret
