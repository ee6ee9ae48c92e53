"""Exception hierarchy shared by all treegrid modules."""


class TreeGridError(Exception):
    """Base class for every error raised by this package."""


class UnbalancedIsland(TreeGridError):
    def __init__(self, island, imbalance):
        self.island = island
        self.imbalance = imbalance
        super().__init__(f"island {island} has power imbalance {imbalance:.3e} pu")


class DegenerateIsland(TreeGridError):
    def __init__(self, island, imbalance):
        self.island = island
        self.imbalance = imbalance
        super().__init__(
            f"island {island} has zero total gain but imbalance {imbalance:.3e} pu"
        )


class RuleFailure(TreeGridError):
    """A balancing rule could not produce balanced injections."""


class NumericalBlowup(TreeGridError):
    def __init__(self, time, magnitude):
        self.time = time
        self.magnitude = magnitude
        super().__init__(f"state magnitude {magnitude:.3e} at t={time:.3f}s")


class SolverStall(TreeGridError):
    """QP iterations exhausted before the KKT residuals reached tolerance."""


class LadderExhausted(TreeGridError):
    """relax() was called on a problem already at the top of the ladder."""


class NoSpanningTree(TreeGridError):
    """The reduced area graph is disconnected."""


class PartitionBroken(TreeGridError):
    """Switching disconnected the inside of a control area."""


class DisconnectedInput(TreeGridError):
    """An operation needing a connected network received a disconnected one."""


class OpfInfeasible(TreeGridError):
    """The nominal dispatch problem has no feasible point."""


class ZeroDemand(TreeGridError):
    """LLR is undefined when the total demand is zero."""


class CaseError(TreeGridError, ValueError):
    """Invalid case data."""

    def __init__(self, field, reason):
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}")


class SchemaError(CaseError):
    pass


class ParseError(CaseError):
    pass


class UnsupportedFeature(CaseError):
    pass
