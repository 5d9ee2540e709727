"""Exception types shared across the package."""


class CareLedgerError(Exception):
    """Base class for all domain errors raised by this package."""


class EncodingError(CareLedgerError):
    """A value cannot be canonically encoded or decoded."""


class ChainError(CareLedgerError):
    """A ledger file or block structure is unreadable (truncated, garbled)."""


class PolicyError(CareLedgerError):
    """A policy operation was rejected (duplicate id, ownership, window, ...)."""


class ExchangeError(CareLedgerError):
    """A record-exchange operation was rejected (bad category, expired session, ...)."""


class ConsentError(CareLedgerError):
    """A consent-lifecycle or matching operation was rejected."""


class SimError(CareLedgerError):
    """Misuse of the simulator (fault on a down node, offline submission, ...)."""


class ScriptError(CareLedgerError):
    """A scenario script failed to parse or referenced unknown entities."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no
