"""Exception hierarchy shared by every module."""


class StochMechError(Exception):
    """Base class for all package errors."""


class ZeroNorm(StochMechError):
    pass


class LinearSolveFailure(StochMechError):
    pass


class DriftBlowup(StochMechError):
    pass


class EmptyEnsemble(StochMechError):
    pass


class InsufficientData(StochMechError):
    pass


class SupportMismatch(StochMechError):
    pass


class NegligibleMass(StochMechError):
    pass


class PhaseUndefined(StochMechError):
    pass


class BranchAmbiguity(StochMechError):
    pass


class NotNormalizable(StochMechError):
    pass


class StabilityViolation(StochMechError):
    pass


class InconsistentEnsemble(StochMechError):
    pass


class ConfigError(StochMechError):
    """Scenario configuration is invalid; ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class MissingArtifact(StochMechError):
    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"missing artifact: {self.path}")
