"""Error taxonomy shared by every module.

Three classes, matching the three failure modes callers can act on:
bad static setup, bad runtime input, and broken internal invariants.
The CLI maps them to exit codes 1, 1 and 2 respectively.
"""


class AnclabError(Exception):
    """Base class for all package errors."""


class ConfigurationError(AnclabError):
    """Static setup is inconsistent (sizes, rates, option values)."""


class InputError(AnclabError):
    """Runtime input data is unusable (empty corpus, zero-power signal, ...)."""


class InternalInvariantError(AnclabError):
    """A computation violated an invariant the code promises to maintain."""
