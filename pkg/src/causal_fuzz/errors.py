from typing import Type


class CausalFuzzError(Exception):
    """Base class for every error raised by causal_fuzz."""


class GraphError(CausalFuzzError):
    pass


class DataError(CausalFuzzError):
    pass


class FitError(CausalFuzzError):
    pass


class ConfigError(CausalFuzzError):
    pass


class SchemaMismatch(CausalFuzzError):
    pass


class TransportError(CausalFuzzError):
    pass


class BudgetExhausted(CausalFuzzError):
    def __init__(self, requested: int, remaining: int):
        super().__init__(f"query budget exhausted: requested {requested}, {remaining} remaining")
        self.requested = requested
        self.remaining = remaining


class SubgroupTooSmall(CausalFuzzError):
    def __init__(self, label: str, size: int, minimum: int):
        super().__init__(f"subgroup {label} has {size} rows, need at least {minimum}")
        self.label = label
        self.size = size


class ReportError(CausalFuzzError):
    pass


def read_text(path, error: Type[CausalFuzzError]) -> str:
    """Reads a UTF-8 file; undecodable bytes raise `error` instead of UnicodeDecodeError."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            return f.read()
    except UnicodeDecodeError as e:
        raise error(f"{path}: not valid UTF-8 text (byte {e.start})") from e


# CLI exit codes; CI pipelines key off these
EXIT_OK = 0
EXIT_LEAK = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3

USAGE_ERRORS = (ConfigError, GraphError, DataError, ReportError, SubgroupTooSmall)
RUNTIME_ERRORS = (FitError, TransportError, SchemaMismatch, BudgetExhausted)
