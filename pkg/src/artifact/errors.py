"""Exception hierarchy shared by the solvers and the pipeline."""


class ArtifactError(Exception):
    """Base class for every error raised by this package."""


class NonConvergence(ArtifactError):
    def __init__(self, where, iterations, residual):
        super().__init__(f"{where}: no convergence after {iterations} iterations "
                         f"(last residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


class HypothesisViolation(ArtifactError):
    def __init__(self, bound, value, detail=""):
        super().__init__(f"hypothesis violated: {bound} = {value:.4g} {detail}".rstrip())
        self.bound = bound
        self.value = value


class NonMonotone(ArtifactError):
    pass


class PositivityLoss(ArtifactError):
    def __init__(self, where, value):
        super().__init__(f"{where}: positivity lost (min = {value:.4g})")
        self.value = value


class NotWellPrepared(ArtifactError):
    def __init__(self, order, mismatch):
        super().__init__(f"boundary data not well prepared at order {order} "
                         f"(mismatch {mismatch:.3e})")
        self.order = order
        self.mismatch = mismatch


class SingularOperator(ArtifactError):
    pass


class IncompatibleGrids(ArtifactError):
    pass


class UnsupportedData(ArtifactError):
    pass


class SingularSystem(ArtifactError):
    pass


class SolveFailure(ArtifactError):
    pass


class NoContraction(ArtifactError):
    def __init__(self, factors):
        super().__init__("Picard iteration is not contracting; factors "
                         + ", ".join(f"{f:.3g}" for f in factors))
        self.factors = list(factors)


class AuditPrecondition(ArtifactError):
    pass


class MissingArtifact(ArtifactError):
    pass


class FormatError(ArtifactError):
    pass


class ConfigError(ArtifactError):
    pass
