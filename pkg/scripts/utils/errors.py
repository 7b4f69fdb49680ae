"""
Errors raised by the VM-Rec scripts.

Library code raises these; the command layer (vmrec_manager.py) catches
VMRecError, prints "Error: <message>" and exits nonzero.
"""


class VMRecError(Exception):
    """Base class for every expected failure of the pipeline."""


class ConfigError(VMRecError):
    """Bad or unknown configuration key, or an unresolvable path."""


class DataFormatError(VMRecError):
    """Malformed interaction file or binary artifact."""

    def __init__(self, message, path=None, line=None, offset=None):
        context = []
        if path is not None:
            context.append(str(path))
        if line is not None:
            context.append(f"line {line}")
        if offset is not None:
            context.append(f"offset {offset}")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)
        self.path = path
        self.line = line
        self.offset = offset


class SplitError(VMRecError):
    """The cold-start split or a k-shot view cannot be built."""


class ArtifactError(VMRecError):
    """A required artifact is missing, stale or was produced by another run."""

    def __init__(self, message, producer=None):
        if producer:
            message = f"{message}. Run 'python vmrec_manager.py {producer}' first."
        super().__init__(message)
        self.producer = producer


class NumericalError(VMRecError):
    """A non-finite value appeared in a forward pass or a loss."""

    def __init__(self, message, intermediate=None):
        self.reason = message
        if intermediate:
            message = f"{message}: first non-finite intermediate is '{intermediate}'"
        super().__init__(message)
        self.intermediate = intermediate


class EvaluationError(VMRecError):
    """Evaluation could not produce a report (no eligible users, bad candidates)."""
