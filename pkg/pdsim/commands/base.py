"""
Base of the command line subcommands, shaped like a Django management command: a
subcommand module holds a ``Command`` class with ``add_arguments`` and ``handle``.
"""
import logging
import sys

from ..exceptions import (EmptyInput, InfeasiblePlacement, InvalidArgument, InvalidConfig, InvalidSpec,
                          InvariantViolation, PdsimError, ProtocolViolation)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_INVARIANT = 3
EXIT_INFEASIBLE = 4

# first match wins
EXIT_CODES = (
    (InvalidConfig, EXIT_CONFIG),
    (InvalidSpec, EXIT_CONFIG),
    (InvalidArgument, EXIT_CONFIG),
    (EmptyInput, EXIT_CONFIG),
    (InvariantViolation, EXIT_INVARIANT),
    (ProtocolViolation, EXIT_INVARIANT),
    (InfeasiblePlacement, EXIT_INFEASIBLE),
)


def exit_code(error):
    for clz, code in EXIT_CODES:
        if isinstance(error, clz):
            return code
    return EXIT_UNEXPECTED


class BaseCommand(object):
    help = ''

    def __init__(self, stdout=None, stderr=None):
        self.stdout = stdout or sys.stdout
        self.stderr = stderr or sys.stderr

    def create_parser(self, subparsers, name):
        parser = subparsers.add_parser(name, help=self.help, description=self.help)
        self.add_arguments(parser)
        parser.set_defaults(command=self)
        return parser

    def add_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        raise NotImplementedError('subclasses of BaseCommand must provide a handle() method')

    def write(self, text):
        self.stdout.write(text)
        self.stdout.write('\n')

    def execute(self, *args, **options):
        """
        Runs ``handle`` and turns errors into exit codes.

        :return: process exit status
        """
        try:
            ret = self.handle(*args, **options)
        except PdsimError as e:
            code = exit_code(e)
            self.stderr.write('error: %s\n' % e)
            if code == EXIT_UNEXPECTED:
                logger.exception('Unexpected failure')
            return code
        except (OSError, ValueError) as e:
            self.stderr.write('error: %s\n' % e)
            return EXIT_CONFIG if isinstance(e, (FileNotFoundError, ValueError)) else EXIT_UNEXPECTED
        return EXIT_OK if ret is None else ret
