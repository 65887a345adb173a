import argparse
import sys

from . import __version__
from .commands import load_commands
from .logs import configure


def main(argv=None, stdout=None, stderr=None):
    """
    Entry point of the ``pdsim`` console script.

    :return: exit status, see pdsim.commands.base for the codes
    """
    parser = argparse.ArgumentParser(prog='pdsim', description='Prefill/decode disaggregated MoE serving simulator')
    parser.add_argument('-v', '--verbose', action='count', default=0, help='-v for info, -vv for debug traces')
    parser.add_argument('--version', action='version', version='%(prog)s ' + __version__)
    subparsers = parser.add_subparsers(dest='subcommand', metavar='command')
    subparsers.required = True
    for name, command in load_commands():
        if stdout is not None:
            command.stdout = stdout
        if stderr is not None:
            command.stderr = stderr
        command.create_parser(subparsers, name)
    options = vars(parser.parse_args(argv))
    configure(options.pop('verbose'), stderr)
    command = options.pop('command')
    options.pop('subcommand')
    return command.execute(**options)


if __name__ == '__main__':
    sys.exit(main())
