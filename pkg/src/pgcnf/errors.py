"""Exception types shared across the engine."""

from __future__ import annotations


class PGCNFError(Exception):
    """Base class; ``code`` is the short machine-readable tag used by the CLI."""

    code = "error"


class DomainError(PGCNFError, ValueError):
    code = "domain_error"


class ShapeError(PGCNFError, ValueError):
    code = "shape_error"


class UnsupportedOperation(PGCNFError, NotImplementedError):
    code = "unsupported"


class SingularConfiguration(PGCNFError, ValueError):
    code = "singular_configuration"


class IntegrationDiverged(PGCNFError, FloatingPointError):
    """Raised when an ODE state turns non-finite; ``step`` is the failing RK4 step."""

    code = "integration_diverged"

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        self.detail = detail
        msg = f"integration diverged at step {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class DegenerateWeights(PGCNFError, ValueError):
    code = "degenerate_weights"


class ConfigError(PGCNFError, ValueError):
    code = "config_error"


class ArchMismatch(PGCNFError, ValueError):
    code = "arch_mismatch"
