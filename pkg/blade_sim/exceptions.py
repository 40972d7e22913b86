#!/usr/bin/env python3
"""
Error types for blade-sim

Every error carries a stable ``code`` (reported in operation results and the
service API) and the CLI ``exit_code`` it maps to.
"""

from typing import Any, Dict


class BladeSimError(Exception):
    """Base class for all simulator errors"""

    code = "BLADE_SIM_ERROR"
    exit_code = 1

    def __init__(self, message: str, code: str = None, **details: Any):
        super().__init__(message)
        if code is not None:
            self.code = code
        self.details = details

    def to_dict(self) -> Dict[str, Any]:
        result = {"success": False, "error": str(self), "code": self.code}
        if self.details:
            result["details"] = self.details
        return result


class ConfigError(BladeSimError):
    code = "INVALID_CONFIG"
    exit_code = 2


class InfeasibleBudgetError(BladeSimError):
    code = "INFEASIBLE_BUDGET"
    exit_code = 3


class DivergenceError(BladeSimError):
    code = "DIVERGENCE"
    exit_code = 4

    def __init__(self, epoch: int, client_id: int = None):
        who = f" for client {client_id}" if client_id is not None else ""
        super().__init__(f"Training diverged at epoch {epoch}{who}", epoch=epoch)
        self.epoch = epoch


class IdxFormatError(BladeSimError):
    """Raised with code BAD_MAGIC, TRUNCATED or COUNT_MISMATCH"""
    code = "BAD_IDX"
    exit_code = 5


class ShapeMismatchError(BladeSimError, ValueError):
    code = "SHAPE_MISMATCH"


class PartitionError(BladeSimError, ValueError):
    code = "INVALID_PARTITION"


class LfsrError(BladeSimError, ValueError):
    code = "BAD_LFSR"


class ContractError(BladeSimError):
    code = "CONTRACT_ERROR"
    exit_code = 6


class LedgerInvariantError(BladeSimError):
    code = "OVERSPEND"
    exit_code = 7


class ChainError(BladeSimError):
    code = "CHAIN_ERROR"
    exit_code = 8


class SweepError(BladeSimError):
    code = "BAD_SWEEP"
    exit_code = 2
