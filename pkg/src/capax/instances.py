"""Seeded problem generators: random obstacle problems, manufactured solutions
with prescribed active-set structure, random measures and control problems."""

from __future__ import annotations

import numpy as np

from .control import ControlProblem
from .mesh import Grid, apply_neg_laplacian, embed_l2
from .measures import DiscreteMeasure
from .obstacle import ObstacleProblem


def smooth_field(grid: Grid, rng, modes: int = 3, amplitude: float = 1.0) -> np.ndarray:
    """Random combination of low sine modes; vanishes on the boundary."""
    xy = grid.coordinates
    out = np.zeros(grid.size)
    for _ in range(modes):
        k = rng.integers(1, 4, size=grid.dim)
        term = rng.normal()
        for axis in range(grid.dim):
            term = term * np.sin(np.pi * k[axis] * xy[:, axis] / grid.extent[axis])
        out += term
    peak = np.abs(out).max() or 1.0
    return amplitude * out / peak


def state_unit(grid: Grid) -> float:
    """Size of the state produced by a unit control, ``h^d / lambda_min(A)``."""
    lam = sum(4 / h**2 * np.sin(np.pi * h / (2 * e)) ** 2
              for h, e in zip(grid.spacing, grid.extent))
    return grid.volume / lam


def random_obstacle_problem(grid: Grid, rng):
    """Random loads and obstacle with partial contact; ``(problem, u)``."""
    f = smooth_field(grid, rng, amplitude=10.0) + rng.normal(scale=2.0, size=grid.size)
    u = embed_l2(grid, f)
    sigma = state_unit(grid)
    psi = sigma * (smooth_field(grid, rng, amplitude=5.0) - rng.uniform(0.0, 3.0))
    if rng.random() < 0.2:
        psi[rng.random(grid.size) < 0.1] = -np.inf
    return ObstacleProblem(grid, psi), u


def manufactured(grid: Grid, rng, contact, biactive, gap=0.5, force=1.0):
    """Obstacle problem whose solution has contact set ``contact`` and biactive set ``biactive``.

    The state is a random smooth field; the obstacle sits ``gap`` state-units
    below it off the contact set, and the multiplier is at least ``force``
    load-units on ``contact \\ biactive``.  Returns ``(problem, u, y)``.
    """
    contact = np.asarray(contact, bool)
    biactive = np.asarray(biactive, bool) & contact
    sigma = state_unit(grid)
    y = sigma * smooth_field(grid, rng)
    psi = np.where(contact, y, y - sigma * gap * (1 + rng.random(grid.size)))
    load_unit = grid.volume
    xi = np.where(contact & ~biactive, load_unit * force * (1 + rng.random(grid.size)), 0.0)
    u = apply_neg_laplacian(grid, y) - xi
    return ObstacleProblem(grid, psi), u, y


def random_node_set(grid: Grid, rng, density=None) -> np.ndarray:
    density = rng.uniform(0.1, 0.6) if density is None else density
    return rng.random(grid.size) < density


def random_blob(grid: Grid, rng, radius=None) -> np.ndarray:
    """A disk-shaped node set (an interval in 1D) at a random position."""
    xy = grid.coordinates / np.asarray(grid.extent)
    centre = rng.uniform(0.3, 0.7, size=grid.dim)
    radius = rng.uniform(0.15, 0.3) if radius is None else radius
    return np.sum((xy - centre) ** 2, axis=1) <= radius**2


def random_measure(grid: Grid, rng, p_inf=0.15, p_zero=0.3, scale=None) -> DiscreteMeasure:
    """Mixed measure: some nodes eliminated, some massless, the rest log-uniform masses."""
    scale = grid.laplacian.diagonal().max() if scale is None else scale
    mass = scale * 10.0 ** rng.uniform(-3, 1, size=grid.size)
    r = rng.random(grid.size)
    mass[r < p_zero] = 0.0
    mass[r > 1 - p_inf] = np.inf
    return DiscreteMeasure(grid, mass)


def contact_control_problem(grid: Grid, rng, alpha_rel=1e-3, bound=None) -> ControlProblem:
    """Tracking problem whose desired state dips through the obstacle.

    ``alpha`` is ``alpha_rel`` times the squared norm of the control-to-state
    map, so the instance is balanced on every grid.
    """
    sigma = state_unit(grid)
    psi = sigma * (0.3 * smooth_field(grid, rng, modes=2) - 0.2)
    y_d = sigma * smooth_field(grid, rng, modes=3, amplitude=1.0) + psi
    y_d = y_d - sigma * 0.8 * random_blob(grid, rng, radius=0.3)
    alpha = alpha_rel * sigma**2
    bound = np.inf if bound is None else bound
    return ControlProblem(ObstacleProblem(grid, psi), y_d, alpha, -bound, bound)
