"""Exception hierarchy shared by every module.

Anything deriving from :class:`HalfpelError` is a user/input problem and maps
to CLI exit code 2.
"""


class HalfpelError(Exception):
    pass


class PreconditionError(HalfpelError, ValueError):
    """An argument violates a documented precondition."""


class ConfigError(HalfpelError, ValueError):
    """Bad manifest, run config or interpolator spec."""
