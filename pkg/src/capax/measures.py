"""Node-lumped capacitary measures and relaxed Dirichlet problems.

A :class:`DiscreteMeasure` carries one mass per interior node in ``[0, inf]``.
Masses already include the volume factor, so the relaxed operator is simply
``A + diag(m)`` with infinite-mass nodes eliminated (solution pinned to 0).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .mesh import Grid, apply_neg_laplacian, embed_l2, l2_norm, solve_restricted

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    grid: Grid
    mass: np.ndarray

    def __post_init__(self):
        mass = np.broadcast_to(np.asarray(self.mass, dtype=float), (self.grid.size,)).copy()
        if np.isnan(mass).any() or (mass < 0).any():
            raise ValueError("masses must be nonnegative (inf allowed)")
        mass.setflags(write=False)
        object.__setattr__(self, "mass", mass)

    @classmethod
    def zero(cls, grid: Grid) -> "DiscreteMeasure":
        return cls(grid, grid.zeros())

    @classmethod
    def uniform(cls, grid: Grid, density: float) -> "DiscreteMeasure":
        """Constant mass ``density`` per node (the relaxed operator becomes ``A + density``)."""
        return cls(grid, grid.full(density))

    @property
    def eliminated(self) -> np.ndarray:
        return np.isinf(self.mass)

    @property
    def finite_mass(self) -> np.ndarray:
        return np.where(self.eliminated, 0.0, self.mass)

    def of(self, nodes) -> float:
        """Measure of a node set: the sum of its masses, ``inf`` if any is infinite."""
        return float(self.mass[np.asarray(nodes, dtype=bool)].sum())

    def __add__(self, other: "DiscreteMeasure") -> "DiscreteMeasure":
        if other.grid != self.grid:
            raise ValueError("measures live on different grids")
        return DiscreteMeasure(self.grid, self.mass + other.mass)

    def __le__(self, other: "DiscreteMeasure") -> bool:
        return bool(np.all(self.mass <= other.mass))


@dataclass(frozen=True)
class RelaxedSolveReport:
    solution: np.ndarray
    eliminated: np.ndarray
    residual: float


def measure_from_node_set(grid: Grid, excluded) -> DiscreteMeasure:
    """``inf`` on ``excluded``, zero elsewhere: the measure of a Dirichlet condition."""
    return DiscreteMeasure(grid, np.where(np.asarray(excluded, dtype=bool), np.inf, 0.0))


def solve_relaxed_report(mu: DiscreteMeasure, f, backend="direct") -> RelaxedSolveReport:
    grid = mu.grid
    f = np.asarray(f, dtype=float)
    keep = ~mu.eliminated
    y = solve_restricted(grid, f, keep=keep, shift=mu.finite_mass, backend=backend)
    r = (apply_neg_laplacian(grid, y) + mu.finite_mass * y - f)[keep]
    scale = np.linalg.norm(f[keep]) or 1.0
    return RelaxedSolveReport(y, mu.eliminated.copy(), float(np.linalg.norm(r) / scale))


def solve_relaxed(mu: DiscreteMeasure, f, backend="direct") -> np.ndarray:
    """Solution operator of ``-Delta y + mu y = f``."""
    return solve_relaxed_report(mu, f, backend).solution


def torsion(mu: DiscreteMeasure, backend="direct") -> np.ndarray:
    """Torsion function ``w_mu``, the relaxed solution for the unit load."""
    return solve_relaxed(mu, embed_l2(mu.grid, 1.0), backend)


def torsion_residual(grid: Grid, w) -> np.ndarray:
    """Loads ``1 + Delta w`` (``embed_l2(1) - A w``)."""
    return embed_l2(grid, 1.0) - apply_neg_laplacian(grid, w)


def gamma_distance(mu1: DiscreteMeasure, mu2: DiscreteMeasure, backend="direct") -> float:
    """L^2 distance of the torsion functions; a metric for gamma-convergence."""
    if mu1.grid != mu2.grid:
        raise ValueError("measures live on different grids")
    return l2_norm(mu1.grid, torsion(mu1, backend) - torsion(mu2, backend))


def energy(mu: DiscreteMeasure, v, tol=1e-12) -> float:
    """``|v|_{H^1_0}^2 + sum m v^2``, or ``inf`` if ``v`` is nonzero where ``mu`` is infinite."""
    v = np.asarray(v, dtype=float)
    if np.abs(v[mu.eliminated]).max(initial=0.0) > tol:
        return np.inf
    grid = mu.grid
    return float(v @ apply_neg_laplacian(grid, v) + np.sum(mu.finite_mass * v**2))


def radon_approximation(mu: DiscreteMeasure, n: int, backend="direct") -> DiscreteMeasure:
    """Finite measure whose torsion is ``(1 - 1/n) w_mu + (1/n) w_0``.

    Masses are ``(1 + Delta w)_i / (w_i + w0_i / (n - 1))``; they increase with
    ``n`` and stay below the finite masses of ``mu``.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    grid = mu.grid
    w = torsion(mu, backend)
    w0 = torsion(DiscreteMeasure.zero(grid), backend)
    r = torsion_residual(grid, w)
    # Residuals at roundoff level are the zero load off the support.
    r[r <= RESIDUAL_TOL * grid.volume] = 0.0
    return DiscreteMeasure(grid, r / (w + w0 / (n - 1)))


def perforate(grid: Grid, period: float, radius: float) -> np.ndarray:
    """Nodes outside every closed disk of ``radius`` around the cell centres ``(k + 1/2) period``."""
    if grid.dim != 2:
        raise ValueError("perforation needs a 2D grid")
    if not 0 < 2 * radius < period:
        raise ValueError("need 0 < 2 radius < period")
    if max(grid.spacing) > radius:
        warnings.warn(f"holes of radius {radius:g} are not resolved by spacing "
                      f"{max(grid.spacing):g}", stacklevel=2)
    xy = grid.coordinates
    # Offset of each node from the nearest cell centre.
    offset = (xy - period / 2) - period * np.round((xy - period / 2) / period)
    inside = np.sum(offset**2, axis=1) <= radius**2
    return ~inside


def gamma_sum_probe(mu_seq, c_seq, mu_lim, c_lim, backend="direct"):
    """Distances of ``mu_n + inf_{C_n}`` to ``mu + inf_C`` along a sequence."""
    grid = mu_lim.grid
    limit = mu_lim + measure_from_node_set(grid, c_lim)
    return [gamma_distance(mu_n + measure_from_node_set(grid, c_n), limit, backend)
            for mu_n, c_n in zip(mu_seq, c_seq)]
