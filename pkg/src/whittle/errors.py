"""Exception hierarchy shared across the toolkit."""


class WhittleError(Exception):
    """Base class for all toolkit failures."""


class StoreError(WhittleError):
    """Malformed, missing, or inconsistent on-disk artifacts."""


class NumericalError(WhittleError):
    """A linear-algebra routine failed beyond the allowed escalation."""


class InfeasibleError(WhittleError):
    """No allocation satisfies the budget and per-layer error caps."""


class UsageError(WhittleError):
    """Invalid command-line arguments or configuration."""
