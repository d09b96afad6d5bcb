# src/errors.py
"""
AdvMetric - Exception Hierarchy
Library code raises these; the CLI maps them to exit codes
"""

from typing import Any, Dict, Optional, Sequence


class AdvMetricError(Exception):
    """Base class for all AdvMetric errors"""
    exit_code = 1


class ConfigError(AdvMetricError):
    """Invalid or unknown configuration"""
    exit_code = 1


class DataError(AdvMetricError):
    """Missing or malformed input data (IDX files, attack sets, artifacts)"""
    exit_code = 2


class NumericalFailure(AdvMetricError):
    """Non-finite loss during optimisation"""
    exit_code = 3

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ShapeError(AdvMetricError, ValueError):
    """Operand shapes do not conform for an operation"""

    def __init__(self, op: str, *shapes: Sequence[int], detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shape_text = " and ".join(str(s) for s in self.shapes)
        message = f"{op}: incompatible shapes {shape_text}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class AutodiffError(AdvMetricError, RuntimeError):
    """Misuse of the gradient tape"""


class CheckpointError(AdvMetricError):
    """Checkpoint version, checksum, or hash problems"""

    def __init__(self, message: str, corrupt: bool = False):
        super().__init__(message)
        self.corrupt = corrupt
        self.exit_code = 2 if corrupt else 1


class AttackError(AdvMetricError):
    """Attack generation cannot proceed"""
    exit_code = 2
