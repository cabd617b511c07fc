"""Discrete capacitary measures, obstacle problems and their derivatives.

The obstacle problem ``min 1/2 |y|^2_{H^1_0} - <u, y>`` over ``y >= psi`` is
solved on finite difference grids; around its solution map the package builds
directional derivatives, Bouligand-type derivative elements described by
node sets and capacitary measures, and stationarity audits for optimal control.
"""

__version__ = "0.1.0"

from .mesh import Grid  # noqa: E402
from .obstacle import ObstacleProblem, ObstacleResult, solve_obstacle  # noqa: E402
from .measures import DiscreteMeasure, gamma_distance, torsion  # noqa: E402

__all__ = ["Grid", "ObstacleProblem", "ObstacleResult", "solve_obstacle", "DiscreteMeasure",
           "gamma_distance", "torsion", "__version__"]
