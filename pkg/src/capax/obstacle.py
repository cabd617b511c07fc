"""The discrete obstacle problem and its directional derivatives.

For loads ``u`` the state ``y = S(u)`` solves the complementarity system

    A y - u = xi >= 0,   y >= psi,   xi * (y - psi) = 0,

where ``A`` is the grid Laplacian and ``psi`` may be ``-inf`` on
unconstrained nodes.  Nodes are classified into the inactive set ``I``, the
strictly active set ``A_s`` (positive multiplier) and the biactive set
``B = A \\ A_s``.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import Grid, h1_norm, solve_poisson, solve_spd

log = logging.getLogger(__name__)

EPS_Y = 1e-8
EPS_XI = 1e-8


class NoConvergence(RuntimeError):
    pass


class InfeasibleProblem(ValueError):
    pass


# --- generic lower-bound LCP solvers:  K x - b >= 0, x >= lower, complementary ---

def pdas(K, b, lower, x0=None, max_iter=200, backend="direct"):
    """Primal-dual active set (semismooth Newton) for a lower-bound LCP with M-matrix ``K``.

    Returns ``(x, iterations)``; ``x`` equals ``lower`` exactly on the final
    active set.  Raises :class:`NoConvergence` if the active set does not settle
    within ``max_iter`` steps.
    """
    K = sp.csr_matrix(K)
    b = np.asarray(b, dtype=float)
    lower = np.asarray(lower, dtype=float)
    bounded = np.isfinite(lower)
    d = K.diagonal()
    lo = np.where(bounded, lower, 0.0)

    if x0 is None:
        x = solve_spd(K, b, backend=backend)
    else:
        x = np.asarray(x0, dtype=float).copy()
    xi = np.zeros_like(b)
    # Ties within roundoff of zero stay inactive so that the sets cannot flip-flop.
    scale = np.abs(b).max(initial=0.0) + (d * np.abs(np.where(bounded, lower, x))).max(initial=0.0)
    tau = 64 * np.finfo(float).eps * max(scale, np.finfo(float).tiny)

    active = bounded & (xi + d * (lo - x) > tau)
    for it in range(1, max_iter + 1):
        x = np.where(active, lo, 0.0)
        free = ~active
        if free.any():
            rhs = b[free] - K[free][:, active] @ lo[active]
            x[free] = solve_spd(K[free][:, free], rhs, backend=backend)
        xi = K @ x - b
        xi[free] = 0.0
        new_active = bounded & (xi + d * (lo - x) > tau)
        if np.array_equal(new_active, active):
            return x, it
        active = new_active
    raise NoConvergence(f"active set still changing after {max_iter} iterations")


def psor(K, b, lower, colors, omega=1.5, tol=1e-12, max_sweeps=200_000, x0=None):
    """Projected SOR with a two-colour ordering.

    Nodes of one colour are decoupled given the other colour, so each half
    sweep is a vectorised Gauss-Seidel update.  Stops when the largest update
    is below ``tol`` relative to the iterate's max-norm.
    """
    K = sp.csr_matrix(K)
    b = np.asarray(b, dtype=float)
    lower = np.asarray(lower, dtype=float)
    colors = np.asarray(colors)
    d = K.diagonal()
    offdiag = sp.csr_matrix(K - sp.diags(d))
    groups = []
    for c in np.unique(colors):
        rows = np.flatnonzero(colors == c)
        groups.append((rows, offdiag[rows], d[rows], b[rows], lower[rows]))

    x = np.maximum(lower, 0.0) if x0 is None else np.maximum(np.asarray(x0, float), lower)
    for sweep in range(1, max_sweeps + 1):
        change = 0.0
        for rows, off, dr, br, lr in groups:
            gs = (br - off @ x) / dr
            new = np.maximum(lr, (1 - omega) * x[rows] + omega * gs)
            change = max(change, np.abs(new - x[rows]).max(initial=0.0))
            x[rows] = new
        if change <= tol * np.abs(x).max(initial=0.0):
            return x, sweep
    raise NoConvergence(f"PSOR stagnated after {max_sweeps} sweeps (last change {change:.3e})")


# --- problem and result types ---

@dataclass(frozen=True)
class ObstacleProblem:
    """Obstacle problem on ``grid`` with obstacle values ``psi`` (``-inf`` allowed)."""

    grid: Grid
    psi: np.ndarray

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=float)
        psi = np.broadcast_to(psi, (self.grid.size,)).copy()
        if np.isnan(psi).any() or np.isposinf(psi).any():
            raise InfeasibleProblem("obstacle must be finite or -inf at every node")
        psi.setflags(write=False)
        object.__setattr__(self, "psi", psi)

    @property
    def bounded(self) -> np.ndarray:
        return np.isfinite(self.psi)


@dataclass(frozen=True)
class ObstacleResult:
    problem: ObstacleProblem
    u: np.ndarray
    y: np.ndarray
    xi: np.ndarray
    active: np.ndarray
    strictly_active: np.ndarray
    eps_y: float
    eps_xi: float
    iterations: int = 0
    method: str = "pdas"
    anchor: str = field(default="", compare=False)

    @property
    def grid(self) -> Grid:
        return self.problem.grid

    @property
    def inactive(self) -> np.ndarray:
        return ~self.active

    @property
    def biactive(self) -> np.ndarray:
        return self.active & ~self.strictly_active

    def classes(self) -> np.ndarray:
        """Per-node label: ``I``, ``B`` or ``A_s``."""
        out = np.full(self.grid.size, "I", dtype=object)
        out[self.biactive] = "B"
        out[self.strictly_active] = "A_s"
        return out


def anchor_of(u, y) -> str:
    digest = hashlib.sha1()
    digest.update(np.ascontiguousarray(u, dtype=float).tobytes())
    digest.update(np.ascontiguousarray(y, dtype=float).tobytes())
    return digest.hexdigest()[:16]


def classify(problem: ObstacleProblem, u, y, xi, eps_y=EPS_Y, eps_xi=EPS_XI):
    """Active and strictly active masks.

    The gap ``y - psi`` is compared with ``eps_y`` times the size of the state
    and obstacle, the multiplier with ``eps_xi`` times the size of the loads
    ``u`` and ``A y``.  Nodes exactly on the threshold count as active.
    """
    bounded = problem.bounded
    scale_y = max(np.abs(y).max(initial=0.0), np.abs(problem.psi[bounded]).max(initial=0.0))
    scale_xi = max(np.abs(u).max(initial=0.0), np.abs(xi + u).max(initial=0.0))
    ty, txi = eps_y * (scale_y or 1.0), eps_xi * (scale_xi or 1.0)
    active = problem.bounded & (y - problem.psi <= ty)
    strictly = active & (xi > txi)
    return active, strictly, ty, txi


def solve_obstacle(problem: ObstacleProblem, u, method="pdas", backend="direct",
                   eps_y=EPS_Y, eps_xi=EPS_XI) -> ObstacleResult:
    """Solve the obstacle problem for loads ``u``.

    ``method='pdas'`` falls back to projected SOR if the active set cycles;
    ``method='psor'`` runs the SOR iteration only.
    """
    grid = problem.grid
    u = np.asarray(u, dtype=float)
    K = grid.laplacian
    iterations = 0
    if method == "pdas":
        try:
            y, iterations = pdas(K, u, problem.psi, backend=backend)
        except NoConvergence:
            log.warning("PDAS did not settle; falling back to projected SOR")
            method = "psor"
    if method == "psor":
        y, iterations = psor(K, u, problem.psi, grid.colors)
    elif method != "pdas":
        raise ValueError(f"unknown method {method!r}")

    xi = K @ y - u
    active, strictly, ty, txi = classify(problem, u, y, xi, eps_y, eps_xi)
    y.setflags(write=False)
    xi.setflags(write=False)
    return ObstacleResult(problem, u, y, xi, active, strictly, ty, txi,
                          iterations, method, anchor_of(u, y))


def complementarity_residuals(result: ObstacleResult) -> dict:
    psi = result.problem.psi
    bounded = result.problem.bounded
    gap = np.where(bounded, result.y - np.where(bounded, psi, 0.0), 0.0)
    return {
        "feasibility": float(max(0.0, -gap.min(initial=0.0))),
        "sign": float(max(0.0, -result.xi.min(initial=0.0))),
        # Without an obstacle the multiplier itself must vanish.
        "complementarity": float(np.abs(np.where(bounded, result.xi * gap,
                                                 result.xi)).max(initial=0.0)),
    }


def directional_derivative(result: ObstacleResult, h, backend="direct") -> np.ndarray:
    """``S'(u; h)``: minimise the energy of ``delta`` over the critical cone.

    The cone is ``delta = 0`` on the strictly active set and ``delta >= 0`` on
    the biactive set; elsewhere ``delta`` is free.
    """
    grid = result.grid
    h = np.asarray(h, dtype=float)
    keep = ~result.strictly_active
    delta = np.zeros(grid.size)
    if not keep.any():
        return delta
    lower = np.where(result.biactive, 0.0, -np.inf)[keep]
    sub = grid.laplacian[keep][:, keep]
    if np.isfinite(lower).any():
        delta[keep], _ = pdas(sub, h[keep], lower, backend=backend)
    else:
        delta[keep] = solve_spd(sub, h[keep], backend=backend)
    return delta


def is_gateaux_point(result: ObstacleResult) -> bool:
    """True when strict complementarity holds, i.e. the biactive set is empty."""
    return not result.biactive.any()


def difference_quotient_probe(problem, u, h, t_list, backend="direct"):
    """H^1_0 errors between ``(S(u + t h) - S(u)) / t`` and ``S'(u; h)`` for each ``t``."""
    base = solve_obstacle(problem, u, backend=backend)
    delta = directional_derivative(base, h, backend=backend)
    rows = []
    for t in t_list:
        if t <= 0:
            raise ValueError("step sizes must be positive")
        moved = solve_obstacle(problem, np.asarray(u) + t * np.asarray(h), backend=backend)
        quotient = (moved.y - base.y) / t
        rows.append((float(t), h1_norm(problem.grid, quotient - delta)))
    return rows


def restricted_solution(result: ObstacleResult, h, backend="direct"):
    """``L_{I(u)} h``: the derivative at a Gateaux point."""
    return solve_poisson(result.grid, h, result.inactive, backend=backend)
