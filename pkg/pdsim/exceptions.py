class PdsimError(Exception):
    """
    Base of every error raised by the library. The CLI maps subclasses to exit codes,
    anything else escaping a command is reported as an unexpected failure.
    """


class InvalidArgument(PdsimError, ValueError):
    pass


class InvalidParameter(InvalidArgument):
    pass


class EmptyInput(PdsimError, ValueError):
    pass


class InfeasiblePlacement(PdsimError):
    pass


class SearchSpaceTooLarge(PdsimError):
    pass


class MigrationDeferred(PdsimError):
    """
    Raised when a migration is requested while another one is still transferring.
    The caller keeps the decision and retries on a later scheduling step.
    """


class ProtocolViolation(PdsimError):
    pass


class NoCapacity(PdsimError):
    pass


class InvalidSpec(PdsimError, ValueError):
    pass


class InvalidConfig(PdsimError, ValueError):
    """
    Configuration could not be loaded. ``diagnostics`` holds every problem found,
    each anchored to a file line when one is known.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])

    def __str__(self):
        if not self.diagnostics:
            return super().__str__()
        return '%s\n%s' % (super().__str__(), '\n'.join('  ' + d for d in self.diagnostics))


class InvariantViolation(PdsimError):
    pass
