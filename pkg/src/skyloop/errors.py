"""Shared exception base classes.

Concrete error types live next to the code that raises them; they all derive
from SkyloopError so callers (and the CLI exit-code mapping) can catch domain
failures separately from programming errors.
"""


class SkyloopError(Exception):
    """Base class for every domain error raised by this package."""


class InputError(SkyloopError):
    """Malformed user-supplied input (files, schemas, arguments)."""
