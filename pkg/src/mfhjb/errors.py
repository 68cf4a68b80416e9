"""Exception types raised across the package."""


class MfhjbError(Exception):
    """Base class for all package errors."""


class Unsupported(MfhjbError):
    pass


class SingularSigma(MfhjbError):
    pass


class AssumptionViolation(MfhjbError):
    def __init__(self, check, point, value):
        self.check = check
        self.point = point
        self.value = value
        super().__init__(f"{check} violated at {point} (value {value:.6g})")


class NonFiniteMap(MfhjbError):
    pass


class MeshMismatch(MfhjbError):
    pass


class LinearSolveFailure(MfhjbError):
    pass


class GrowthViolation(MfhjbError):
    pass


class MassLeak(MfhjbError):
    pass


class BlowUp(MfhjbError):
    def __init__(self, msg, s=None, x=None):
        self.s = s
        self.x = x
        super().__init__(msg)


class MinimizerDomain(MfhjbError):
    pass


class WeightDegenerate(MfhjbError):
    pass


class InfeasibleHorizon(MfhjbError):
    pass


class BracketFailure(MfhjbError):
    pass


class KernelOverflow(MfhjbError):
    pass


class ShootingDivergence(MfhjbError):
    def __init__(self, msg, residuals=()):
        self.residuals = list(residuals)
        super().__init__(msg)


class InnerNonConvergence(MfhjbError):
    def __init__(self, msg, history=()):
        self.history = list(history)
        super().__init__(msg)


class ConfigError(MfhjbError):
    def __init__(self, msg, key=None):
        self.key = key
        super().__init__(msg if key is None else f"[{key}] {msg}")
