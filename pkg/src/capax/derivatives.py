"""Generalized derivatives of the obstacle solution operator.

Strong-strong (= weak-strong) elements are Dirichlet solution operators
``L_{Omega_hat}`` with ``I(u) <= Omega_hat <= complement(A_s(u))``.  Strong-weak
elements are relaxed operators ``L_mu`` with ``mu(I(u)) = 0`` and
``mu = inf`` on ``A_s(u)``.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .mesh import (Grid, apply_neg_laplacian, embed_l2, hminus1_norm, l2_norm,
                   solve_poisson)
from .measures import (DiscreteMeasure, gamma_distance, measure_from_node_set,
                       perforate, solve_relaxed, torsion)
from .obstacle import (ObstacleProblem, ObstacleResult, directional_derivative,
                       is_gateaux_point, solve_obstacle)

log = logging.getLogger(__name__)

MASS_TOL = 1e-12
TORSION_TOL = 1e-10


class InvalidSelection(ValueError):
    pass


class AnchorMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DerivativeElement:
    kind: str  # "node-set" or "measure"
    anchor: str
    omega_hat: np.ndarray | None = None
    mu: DiscreteMeasure | None = None
    provenance: dict = field(default_factory=dict)

    def apply(self, grid: Grid, h, backend="direct") -> np.ndarray:
        if self.kind == "node-set":
            return solve_poisson(grid, h, self.omega_hat, backend=backend)
        return solve_relaxed(self.mu, h, backend=backend)

    def as_measure(self, grid: Grid) -> DiscreteMeasure:
        if self.kind == "node-set":
            return measure_from_node_set(grid, ~self.omega_hat)
        return self.mu


def pbss_element(result: ObstacleResult, selection) -> DerivativeElement:
    """The element ``L_{I(u) + selection}`` for a subset of the biactive set."""
    selection = np.asarray(selection, dtype=bool)
    if (selection & ~result.biactive).any():
        raise InvalidSelection("selection must lie inside the biactive set")
    omega_hat = result.inactive | selection
    return DerivativeElement("node-set", result.anchor, omega_hat=omega_hat,
                             provenance={"construction": "pbss", "selected": int(selection.sum())})


def enumerate_pbss(result: ObstacleResult, limit: int = 12):
    """All strong-strong elements, one per subset of the biactive set."""
    nodes = np.flatnonzero(result.biactive)
    if nodes.size > limit:
        raise ValueError(f"{nodes.size} biactive nodes; enumeration capped at {limit}")
    for r in range(nodes.size + 1):
        for subset in itertools.combinations(nodes, r):
            sel = result.grid.no_nodes()
            sel[list(subset)] = True
            yield pbss_element(result, sel)


def approach_sequence_pbss(problem: ObstacleProblem, u, result: ObstacleResult,
                           element: DerivativeElement, n: int, backend="direct"):
    """Loads ``u_n = u - (Delta v + lambda) / n`` approaching ``u`` through Gateaux points.

    ``v`` is the torsion function of ``omega_hat`` and ``lambda`` the unit load
    on its complement; then ``S(u_n) = y + v / n`` and ``I(u_n) = omega_hat``.
    Returns ``(u_n, v, lam)``.
    """
    if element.kind != "node-set" or element.anchor != result.anchor:
        raise AnchorMismatch("element is not a node-set element anchored at this result")
    if n < 1:
        raise ValueError("n must be positive")
    grid = problem.grid
    v = solve_poisson(grid, embed_l2(grid, 1.0), element.omega_hat, backend=backend)
    lam = np.where(element.omega_hat, 0.0, 1.0)
    u_n = np.asarray(u, dtype=float) + (apply_neg_laplacian(grid, v) - lam) / n
    return u_n, v, lam


def check_approach(problem, u, result, element, n, backend="direct") -> dict:
    """Solve at ``u_n`` and report the guarantees of the construction."""
    u_n, v, lam = approach_sequence_pbss(problem, u, result, element, n, backend)
    res_n = solve_obstacle(problem, u_n, backend=backend)
    grid = problem.grid
    return {
        "n": n,
        "state_error": float(np.abs(res_n.y - (result.y + v / n)).max()),
        "gateaux": is_gateaux_point(res_n),
        "inactive_matches": bool(np.array_equal(res_n.inactive, element.omega_hat)),
        "distance": hminus1_norm(grid, u_n - np.asarray(u), backend=backend),
        "constant": hminus1_norm(grid, lam - apply_neg_laplacian(grid, v), backend=backend),
    }


def pbsw_membership(result: ObstacleResult, mu: DiscreteMeasure, backend="direct"):
    """Check ``mu(I(u)) = 0`` and ``w_mu = 0`` on ``A_s(u)``.

    Returns ``(ok, certificate)`` where the certificate lists violating nodes.
    """
    on_inactive = mu.mass[result.inactive]
    bad_inactive = np.flatnonzero(result.inactive)[~(on_inactive <= MASS_TOL)]
    total = float(on_inactive.sum())
    w = torsion(mu, backend)
    bad_strict = np.flatnonzero(result.strictly_active & (w > TORSION_TOL))
    ok = total <= MASS_TOL and bad_strict.size == 0
    return ok, {"inactive_mass": total, "inactive_nodes": bad_inactive.tolist(),
                "strictly_active_nodes": bad_strict.tolist(),
                "max_torsion_on_strict": float(w[result.strictly_active].max(initial=0.0))}


def pbsw_construct(result: ObstacleResult, radon_mu: DiscreteMeasure, backend="direct"):
    """The strong-weak element ``L_lambda`` with ``lambda = radon_mu + inf_{A_s(u)}``."""
    if radon_mu.eliminated.any():
        raise ValueError("radon_mu must be finite everywhere")
    if radon_mu.of(result.inactive) > MASS_TOL:
        raise ValueError("radon_mu must vanish on the inactive set")
    mu = radon_mu + measure_from_node_set(result.grid, result.strictly_active)
    element = DerivativeElement("measure", result.anchor, mu=mu,
                                provenance={"construction": "pbsw"})
    ok, cert = pbsw_membership(result, mu, backend)
    if not ok:
        raise ValueError(f"constructed measure fails membership: {cert}")
    return element


def shrink_inactive(problem: ObstacleProblem, u, result: ObstacleResult, n: int,
                    backend="direct"):
    """Loads ``u_n = -Delta y_n - xi`` with ``y_n = max(y - 1/n, psi)``.

    ``S(u_n) = y_n`` with the same multiplier, and every node with
    ``y - psi <= 1/n`` becomes active.  Returns ``(u_n, result_n)``.
    """
    if n < 1:
        raise ValueError("n must be positive")
    grid = problem.grid
    y_n = np.maximum(result.y - 1.0 / n, problem.psi)
    u_n = apply_neg_laplacian(grid, y_n) - result.xi
    return u_n, solve_obstacle(problem, u_n, backend=backend)


# --- the weak-weak example: perforated domains and the strange term ---

def fit_reaction_constant(grid: Grid, w_target, backend="direct", c_max=1e8):
    """Fit ``c`` minimising ``||w_target - torsion(c)||_{L^2}`` for the uniform measure ``c``.

    Returns ``(c, distance, saturated)``; ``saturated`` flags a target that no
    finite ``c`` reproduces (e.g. a fully eliminated grid).
    """
    w_target = np.asarray(w_target, dtype=float)

    def dist(c):
        return l2_norm(grid, w_target - torsion(DiscreteMeasure.uniform(grid, c), backend))

    d0 = dist(0.0)
    if d0 <= 1e-14 * (1.0 + l2_norm(grid, w_target)):
        return 0.0, d0, False
    if not np.any(w_target > 0):
        return np.inf, dist(c_max), True
    # Torsion decreases monotonically in c, so the misfit is unimodal in log c.
    res = minimize_scalar(lambda s: dist(np.exp(s)), bounds=(np.log(1e-6), np.log(c_max)),
                          method="bounded", options={"xatol": 1e-6})
    c = float(np.exp(res.x))
    saturated = c > 0.99 * c_max
    return c, float(res.fun), saturated


@dataclass
class WeakWeakLevel:
    level: int
    nodes: int
    period: float
    radius: float
    holes: int
    gateaux: bool
    derivative_error: float
    fitted_c: float
    saturated: bool
    distance_fitted: float
    distance_laplacian: float


def critical_radius(period: float, target_c: float, cell_constant: float = -1.1) -> float:
    """Hole radius giving each periodic cell the capacity ``target_c * period^2``.

    Uses the 2D relation ``c eps^2 = 2 pi / (log(eps / r) + K)``; ``K`` corrects
    the leading-order Cioranescu-Murat scaling for holes that are not
    asymptotically small relative to the cell.
    """
    return period * float(np.exp(cell_constant - 2 * np.pi / (target_c * period**2)))


DEFAULT_LEVELS = ((63, 1 / 3), (127, 1 / 4), (255, 1 / 5))


def weak_weak_example(levels=DEFAULT_LEVELS, target_c: float = 80.0, cell_constant: float = -1.1,
                      probes: int = 3, seed: int = 0, backend="direct"):
    """Perforated domains ``Omega_n`` with critically scaled holes.

    ``levels`` is a sequence of ``(nodes_per_axis, period)``; hole radii follow
    :func:`critical_radius`.  For
    each level the state ``y_n`` is the torsion of ``Omega_n``, the loads are
    ``u_n = A y_n - 2^-n h^2 chi_{holes}`` and ``psi = 0``.  The report checks
    that ``u_n`` is a Gateaux point with derivative ``L_{Omega_n}`` and fits the
    reaction constant of the limit operator ``-Delta + c``.
    """
    rng = np.random.default_rng(seed)
    report = []
    for n, (nodes, period) in enumerate(levels, start=1):
        grid = Grid.square(nodes)
        radius = critical_radius(period, target_c, cell_constant)
        omega_n = perforate(grid, period, radius)
        holes = ~omega_n
        y_n = solve_poisson(grid, embed_l2(grid, 1.0), omega_n, backend=backend)
        u_n = apply_neg_laplacian(grid, y_n) - 2.0**-n * grid.volume * holes
        problem = ObstacleProblem(grid, grid.zeros())
        res = solve_obstacle(problem, u_n, backend=backend)
        gateaux = is_gateaux_point(res) and np.array_equal(res.inactive, omega_n)
        derr = 0.0
        for _ in range(probes):
            h = embed_l2(grid, rng.standard_normal(grid.size))
            d = directional_derivative(res, h, backend=backend)
            ref = solve_poisson(grid, h, omega_n, backend=backend)
            derr = max(derr, float(np.abs(d - ref).max() / (np.abs(ref).max() or 1.0)))
        c, dfit, saturated = fit_reaction_constant(grid, y_n, backend)
        mu_n = measure_from_node_set(grid, holes)
        dlap = gamma_distance(mu_n, DiscreteMeasure.zero(grid), backend)
        report.append(WeakWeakLevel(n, nodes, period, radius, int(holes.sum()),
                                    bool(gateaux), derr, c, saturated, dfit, dlap))
        log.info("level %d: %d hole nodes, c = %.4g", n, holes.sum(), c)
    return report
