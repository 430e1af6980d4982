from .piecewise import PiecewiseScenario
from .solver import SolverScenario
from .unicycle import UnicycleScenario

__all__ = ["PiecewiseScenario", "SolverScenario", "UnicycleScenario"]
