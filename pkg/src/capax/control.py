"""Optimal control of the obstacle problem with box control constraints.

The objective is quadratic tracking,

    J(y, u) = 1/2 ||y - y_d||^2 + alpha/2 ||u||^2      (L^2 norms),

with ``y = S(embed_l2(u))`` and ``a <= u <= b``.  The obstacle is relaxed by
a smoothed penalty ``c max_c(psi - y)`` and the parameter ``c`` is driven to
infinity; the adjoint of each penalized problem is a relaxed Dirichlet problem
whose measure ``c max_c'(psi - y_c)`` approximates the measure of the limit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import apply_neg_laplacian, embed_l2, h1_norm, solve_spd
from .derivatives import pbsw_membership
from .measures import DiscreteMeasure, solve_relaxed
from .obstacle import ObstacleProblem, ObstacleResult, solve_obstacle

log = logging.getLogger(__name__)

AUDIT_TOL = 1e-4
STALL_FLOOR = 1e-8


class NewtonDivergence(RuntimeError):
    pass


class StalledPath(RuntimeError):
    pass


class AnchorMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ControlProblem:
    obstacle: ObstacleProblem
    y_d: np.ndarray
    alpha: float
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        n = self.obstacle.grid.size
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        lower = np.broadcast_to(np.asarray(self.lower, float), (n,)).copy()
        upper = np.broadcast_to(np.asarray(self.upper, float), (n,)).copy()
        if (lower > upper).any():
            raise ValueError("control bounds must satisfy a <= b")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "y_d", np.broadcast_to(np.asarray(self.y_d, float), (n,)).copy())

    @property
    def grid(self):
        return self.obstacle.grid

    def project(self, u):
        return np.clip(u, self.lower, self.upper)


@dataclass
class StationarityPoint:
    y: np.ndarray
    u: np.ndarray
    p: np.ndarray
    nu: np.ndarray
    lam: np.ndarray
    mu: DiscreteMeasure | None = None
    c: float = np.inf
    history: list = field(default_factory=list)
    path_measures: list = field(default_factory=list)


# --- objective and smoothing ---

def objective_and_partials(prob: ControlProblem, y, u):
    """``(J, J_y, J_u)`` with ``J_y`` as loads and ``J_u`` as nodal values."""
    grid = prob.grid
    y, u = np.asarray(y, float), np.asarray(u, float)
    diff = y - prob.y_d
    J = 0.5 * grid.volume * (diff @ diff) + 0.5 * prob.alpha * grid.volume * (u @ u)
    return float(J), embed_l2(grid, diff), prob.alpha * u


def smoothed_max(c: float, x):
    """C^1 smoothing of ``max(x, 0)`` and its derivative.

    Zero below ``-1/(2c)``, the identity above ``1/(2c)``, and the quadratic
    ``(c/2)(x + 1/(2c))^2`` in between.
    """
    if not c > 0:
        raise ValueError("c must be positive")
    x = np.asarray(x, dtype=float)
    k = 1.0 / (2 * c)
    mid = 0.5 * c * (x + k) ** 2
    value = np.where(x <= -k, 0.0, np.where(x >= k, x, mid))
    slope = np.where(x <= -k, 0.0, np.where(x >= k, 1.0, c * (x + k)))
    if value.ndim == 0:
        return float(value), float(slope)
    return value, slope


def _smoothed_max_primitive(c, x):
    k = 1.0 / (2 * c)
    return np.where(x <= -k, 0.0,
                    np.where(x >= k, 0.5 * x**2 + 1.0 / (24 * c**2), c / 6 * (x + k) ** 3))


def _violation(psi, y):
    return np.where(np.isfinite(psi), psi - y, -np.inf)


def _smoothed_max_curvature(c, x):
    k = 1.0 / (2 * c)
    return np.where((x > -k) & (x < k), c, 0.0)


def _penalty(obstacle, y, c):
    """Penalty load, its y-derivative (a mass) and second derivative at ``y``.

    The violation is measured as a density, ``(psi - y) / h^d``, like the
    loads, so the smoothing width ``1/c`` does not shrink with the grid.
    Returns ``(load, mass, curvature, energy)``.
    """
    vol = obstacle.grid.volume
    x = _violation(obstacle.psi, y) / vol
    m, dm = smoothed_max(c, x)
    load = c * vol * np.atleast_1d(m)
    mass = c * np.atleast_1d(dm)
    curvature = c * _smoothed_max_curvature(c, x) / vol
    energy = c * vol**2 * float(np.sum(_smoothed_max_primitive(c, x)))
    return load, mass, curvature, energy


def penalized_state_solve(prob, u, c, y0=None, tol=1e-11, max_iter=100, backend="direct"):
    """Solve ``A y = load(u) + c max_c(psi - y)`` by damped Newton.

    ``prob`` is a :class:`ControlProblem` or an :class:`ObstacleProblem`;
    ``u`` holds nodal control values.  Iterates past ``tol`` down to the
    roundoff floor, since reduced gradients inherit the state's accuracy.
    """
    obstacle = prob.obstacle if isinstance(prob, ControlProblem) else prob
    grid = obstacle.grid
    psi = obstacle.psi
    f = embed_l2(grid, u)
    A = grid.laplacian
    y = solve_spd(A, f, backend) if y0 is None else np.asarray(y0, float).copy()

    def energy(z):
        return 0.5 * z @ (A @ z) - f @ z + _penalty(obstacle, z, c)[3]

    floor = 64 * np.finfo(float).eps
    previous = np.inf
    for _ in range(max_iter):
        load, mass, _, _ = _penalty(obstacle, y, c)
        F = A @ y - f - load
        scale = max(np.abs(f).max(initial=0.0), np.abs(A @ y).max(initial=0.0)) or 1.0
        res = np.abs(F).max(initial=0.0) / scale
        if res <= floor or (res <= tol and res >= 0.5 * previous):
            return y
        previous = res
        step = solve_spd(A + sp.diags(mass), -F, backend)
        e0, slope, t = energy(y), F @ step, 1.0
        slack = 1e-13 * abs(e0)
        while energy(y + t * step) > e0 + 1e-4 * t * slope + slack and t > 1e-12:
            t *= 0.5
        if t <= 1e-12:
            if res <= tol:
                return y
            break
        y = y + t * step
    raise NewtonDivergence(f"penalized state equation not solved at c = {c:g}")


def penalty_measure(prob, y_c, c) -> DiscreteMeasure:
    """The measure ``c max_c'(psi - y_c)`` of the penalized adjoint."""
    obstacle = prob.obstacle if isinstance(prob, ControlProblem) else prob
    return DiscreteMeasure(obstacle.grid, _penalty(obstacle, y_c, c)[1])


def penalized_adjoint_solve(prob: ControlProblem, y_c, u, c, backend="direct"):
    """Adjoint ``p_c`` of the penalized problem together with its measure ``mu_c``."""
    mu_c = penalty_measure(prob, y_c, c)
    _, J_y, _ = objective_and_partials(prob, y_c, u)
    return solve_relaxed(mu_c, J_y, backend), mu_c


# --- the penalty path ---

def _reduced(prob, u, c, y0, backend):
    y = penalized_state_solve(prob, u, c, y0=y0, backend=backend)
    J, _, J_u = objective_and_partials(prob, y, u)
    p, mu = penalized_adjoint_solve(prob, y, u, c, backend)
    return J, p + J_u, y, p, mu


def projected_gradient(prob, u0, c, tol=1e-10, max_iter=5000, backend="direct"):
    """Minimise the penalized reduced objective over the box by projected gradient.

    Steps are Barzilai-Borwein guesses safeguarded by Armijo backtracking.
    The stopping test is on the projected step ``u - P(u - g)`` relative to the
    size of ``J_u`` and ``p``.
    """
    vol = prob.grid.volume
    u = prob.project(np.asarray(u0, float))
    J, g, y, p, mu = _reduced(prob, u, c, None, backend)
    s = 1.0 / prob.alpha
    for it in range(1, max_iter + 1):
        crit = np.abs(u - prob.project(u - g)).max(initial=0.0)
        scale = max(np.abs(p).max(initial=0.0), prob.alpha * np.abs(u).max(initial=0.0))
        if crit <= tol * (scale or 1.0):
            return u, y, p, mu, J, it
        while True:
            u_new = prob.project(u - s * g)
            J_new, g_new, y_new, p_new, mu_new = _reduced(prob, u_new, c, y, backend)
            if J_new <= J + 1e-4 * vol * (g @ (u_new - u)) + 1e-13 * abs(J) \
                    or s < 1e-14 / prob.alpha:
                break
            s *= 0.5
        du, dg = u_new - u, g_new - g
        curv = du @ dg
        s = (du @ du) / curv if curv > 0 else 1.0 / prob.alpha
        u, J, g, y, p, mu = u_new, J_new, g_new, y_new, p_new, mu_new
    raise StalledPath(f"projected gradient did not converge at c = {c:g}")


def newton_kkt(prob, u0, c, y0=None, p0=None, tol=1e-10, max_iter=100, backend="direct"):
    """Semismooth Newton on the optimality system of the penalized problem.

    Unknowns are the state ``y`` and adjoint ``p``; the control is
    ``u = clip(-p / alpha, a, b)``.  The residuals are the penalized state
    equation and the penalized adjoint equation.  Steps are damped on the
    residual norm.  Pass both ``y0`` and ``p0`` to warm start from a
    neighbouring ``c``; otherwise the start is the state and adjoint of ``u0``.
    """
    grid = prob.grid
    A, vol, psi, alpha = grid.laplacian, grid.volume, prob.obstacle.psi, prob.alpha
    n = grid.size
    if y0 is not None and p0 is not None:
        y, p = np.asarray(y0, float).copy(), np.asarray(p0, float).copy()
    else:
        u = prob.project(np.asarray(u0, float))
        y = penalized_state_solve(prob, u, c, y0=y0, backend=backend)
        p, _ = penalized_adjoint_solve(prob, y, u, c, backend)

    def scales(y, p):
        u = prob.project(-p / alpha)
        s1 = max(np.abs(A @ y).max(initial=0.0), vol * np.abs(u).max(initial=0.0)) or 1.0
        s2 = max(np.abs(A @ p).max(initial=0.0), vol * np.abs(y - prob.y_d).max(initial=0.0)) or 1.0
        return s1, s2

    s1, s2 = scales(y, p)

    def residual(y, p):
        u = prob.project(-p / alpha)
        load, mass, _, _ = _penalty(prob.obstacle, y, c)
        F1 = A @ y - vol * u - load
        F2 = A @ p + mass * p - vol * (y - prob.y_d)
        merit = np.hypot(np.linalg.norm(F1) / s1, np.linalg.norm(F2) / s2)
        return F1, F2, max(np.abs(F1).max() / s1, np.abs(F2).max() / s2), merit

    def done(y, p, it):
        return prob.project(-p / alpha), y, p, penalty_measure(prob, y, c), it

    floor = max(STALL_FLOOR, 1e3 * np.finfo(float).eps * c / A.diagonal().min())
    F1, F2, res, merit = residual(y, p)
    best = (res, y, p)
    for it in range(1, max_iter + 1):
        if res <= tol:
            return done(y, p, it)
        _, mass, curvature, _ = _penalty(prob.obstacle, y, c)
        free = ((-p / alpha) > prob.lower) & ((-p / alpha) < prob.upper)
        K = A + sp.diags(mass)
        jac = sp.bmat([
            [K, sp.diags(vol / alpha * free)],
            [-sp.diags(curvature * p + vol), K],
        ], format="csc")
        step = solve_spd(jac, -np.concatenate([F1, F2]), backend="direct")
        t = 1.0
        while t >= 1e-6:
            G1, G2, res_new, merit_new = residual(y + t * step[:n], p + t * step[n:])
            if merit_new < (1 - 1e-4 * t) * merit:
                break
            t *= 0.5
        if t < 1e-6:
            break
        y, p = y + t * step[:n], p + t * step[n:]
        F1, F2, res, merit = G1, G2, res_new, merit_new
        if res < best[0]:
            best = (res, y, p)
    res, y, p = best
    # Conditioning grows with c; a stall below the floor is roundoff.
    if res <= floor:
        return done(y, p, max_iter)
    raise StalledPath(f"Newton on the penalized optimality system stalled at c = {c:g} "
                      f"(residual {res:.2e})")


def _newton_continuation(prob, u, y, p, c_from, c, tol, max_iter, backend, depth=8):
    """Newton at ``c``, inserting geometric midpoints from ``c_from`` when it stalls."""
    try:
        out = newton_kkt(prob, u, c, y0=y, p0=p, tol=tol, max_iter=max_iter, backend=backend)
        return (*out, c)
    except (StalledPath, NewtonDivergence):
        if c_from is None or depth == 0:
            raise
    mid = np.sqrt(c_from * c)
    log.info("inserting c = %.3e on the path", mid)
    u, y, p, _, _, _ = _newton_continuation(prob, u, y, p, c_from, mid, tol, max_iter,
                                            backend, depth - 1)
    return _newton_continuation(prob, u, y, p, mid, c, tol, max_iter, backend, depth - 1)


def optimize(prob: ControlProblem, c_schedule=tuple(10.0**k for k in range(7)), u0=None,
             method="newton", tol=None, max_iter=None, backend="direct") -> StationarityPoint:
    """Follow the penalty path over ``c_schedule`` with warm starts.

    ``method`` selects the inner solver for each ``c``: ``"newton"``
    (semismooth Newton on the optimality system) or ``"pg"`` (projected
    gradient, practical only for moderate ``c``).
    """
    c_schedule = list(c_schedule)
    if any(b <= a for a, b in zip(c_schedule, c_schedule[1:])):
        raise ValueError("c schedule must be increasing")
    u = prob.project(np.zeros(prob.grid.size) if u0 is None else np.asarray(u0, float))
    y = None
    history, measures = [], []
    p = solved = None
    for c in c_schedule:
        if method == "newton":
            u, y, p, mu, its, solved = _newton_continuation(
                prob, u, y, p, solved, c, tol or 1e-10, max_iter or 100, backend)
            J = objective_and_partials(prob, y, u)[0]
        elif method == "pg":
            u, y, p, mu, J, its = projected_gradient(prob, u, c, tol or 1e-10,
                                                     max_iter or 5000, backend)
        else:
            raise ValueError(f"unknown method {method!r}")
        history.append({"c": c, "J": J, "iterations": its,
                        "violation": float(np.maximum(_violation(prob.obstacle.psi, y), 0).max())})
        measures.append(mu)
        log.info("c = %.1e  J = %.10e  (%d iterations)", c, J, its)
    _, J_y, J_u = objective_and_partials(prob, y, u)
    nu = J_y - apply_neg_laplacian(prob.grid, p)
    lam = -p - J_u
    return StationarityPoint(y, u, p, nu, lam, mu, c_schedule[-1], history, measures)


# --- audits ---

@dataclass
class AuditItem:
    name: str
    violation: float
    tolerance: float
    worst_node: int

    @property
    def passed(self) -> bool:
        return bool(self.violation <= self.tolerance)

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"{self.name}\t{self.violation:.3e}\t{status}\t{self.worst_node}"


def _worst(values, mask=None):
    values = np.asarray(values, float)
    if mask is not None:
        values = np.where(mask, values, 0.0)
    if values.size == 0:
        return 0.0, -1
    i = int(np.argmax(values))
    return float(values[i]), i if values[i] > 0 else -1


def tol_p(point: StationarityPoint) -> float:
    return 1e-8 * (1.0 + np.abs(point.p).max(initial=0.0))


@dataclass
class RecoveredMeasure:
    ok: bool
    measure: DiscreteMeasure | None
    residual: float
    bad_nodes: list
    discarded: list
    membership: bool


def recover_measure(point: StationarityPoint, result: ObstacleResult, tol=None,
                    backend="direct") -> RecoveredMeasure:
    """Find ``mu`` with ``nu = p mu``: infinite where ``p`` vanishes off ``I(u)``, else ``nu / p``."""
    grid = result.grid
    p, nu = point.p, point.nu
    tp = tol_p(point)
    zero_p = np.abs(p) <= tp
    masked = zero_p & result.active
    scale = max(np.abs(nu).max(initial=0.0), np.abs(point.nu + apply_neg_laplacian(grid, p)).max(initial=0.0))
    tol = AUDIT_TOL * (scale or 1.0) if tol is None else tol

    free = ~masked
    mass = np.zeros(grid.size)
    ratio = np.divide(nu, p, out=np.zeros_like(nu), where=free & ~zero_p)
    mass[free & ~zero_p] = ratio[free & ~zero_p]
    mass_scale = max(np.abs(grid.laplacian.diagonal()).max(), 1.0)
    bad = []
    # nu must vanish where p = 0 on the inactive set; nothing can absorb it there.
    bad += np.flatnonzero(free & zero_p & (np.abs(nu) > tol)).tolist()
    bad += np.flatnonzero(free & ~zero_p & (mass < -AUDIT_TOL * mass_scale)).tolist()
    bad += np.flatnonzero(result.inactive & ~zero_p & (np.abs(mass) > AUDIT_TOL * mass_scale)).tolist()
    discarded = np.flatnonzero(masked & (np.abs(nu) > tol)).tolist()
    if discarded:
        log.warning("nu is nonzero on %d eliminated nodes; that content is discarded", len(discarded))
    mass = np.maximum(mass, 0.0)
    mass[result.inactive] = 0.0
    mass[masked] = np.inf
    mu = DiscreteMeasure(grid, mass)
    residual = float(np.abs(nu - p * mu.finite_mass)[free].max(initial=0.0))
    membership, _ = pbsw_membership(result, mu, backend)
    ok = not bad and residual <= tol and membership
    return RecoveredMeasure(ok, mu, residual, sorted(set(bad)), discarded, membership)


def audit_stationarity(point: StationarityPoint, result: ObstacleResult, prob: ControlProblem,
                       tol=AUDIT_TOL, backend="direct"):
    """Residuals of the stationarity systems at ``point``, one :class:`AuditItem` each.

    Tolerances are ``tol`` times the size of the quantity audited.
    """
    if np.abs(np.asarray(result.u) - embed_l2(prob.grid, point.u)).max(initial=0.0) > \
            1e-12 * (np.abs(result.u).max(initial=0.0) or 1.0):
        raise AnchorMismatch("obstacle result is not anchored at the control of the point")
    grid = prob.grid
    _, J_y, J_u = objective_and_partials(prob, point.y, point.u)
    p, nu, lam, u = point.p, point.nu, point.lam, point.u
    P = max(np.abs(p).max(initial=0.0), np.abs(J_u).max(initial=0.0)) or 1.0
    N = max(np.abs(J_y).max(initial=0.0), np.abs(nu).max(initial=0.0)) or 1.0
    items = []

    # [C1] p + J_u + lambda = 0 and lambda in the normal cone of the box.
    at_upper = np.isclose(u, prob.upper, rtol=0, atol=1e-12 * P)
    at_lower = np.isclose(u, prob.lower, rtol=0, atol=1e-12 * P)
    cone = np.where(at_upper & at_lower, 0.0,
                    np.where(at_upper, np.maximum(-lam, 0),
                             np.where(at_lower, np.maximum(lam, 0), np.abs(lam))))
    v, i = _worst(np.maximum(np.abs(p + J_u + lam), cone))
    items.append(AuditItem("C1", v, tol * P, i))
    v, i = _worst(np.abs(p), result.strictly_active)
    items.append(AuditItem("C2", v, tol * P, i))
    v, i = _worst(np.abs(nu), result.inactive)
    items.append(AuditItem("C3", v, tol * N, i))
    # The report value is h^d min(nu p); the violation is its negative part.
    prod = grid.volume * nu * p
    c4 = float(prod.min(initial=0.0))
    items.append(AuditItem("C4", max(0.0, -c4), tol * grid.volume * N * P,
                           int(np.argmin(prod)) if c4 < 0 else -1))

    # [M] a set A with A_s <= A <= A(u), p = 0 on A and nu = 0 off A.
    cand = result.strictly_active | (result.biactive & (np.abs(p) <= tol * P))
    vp, ip = _worst(np.abs(p) / P, cand)
    vn, inn = _worst(np.abs(nu) / N, ~cand)
    items.append(AuditItem("M", max(vp, vn), tol, ip if vp >= vn else inn))

    rec = recover_measure(point, result, tol=tol * N, backend=backend)
    worst = rec.bad_nodes[0] if rec.bad_nodes else -1
    violation = rec.residual / N if (rec.membership and not rec.bad_nodes) else np.inf
    items.append(AuditItem("nu=p*mu", violation, tol, worst))
    return {"items": items, "c4_value": c4, "recovered": rec}


def audit_report(audit) -> str:
    lines = ["criterion\tmax_violation\tstatus\tworst_node"]
    lines += [item.line() for item in audit["items"]]
    return "\n".join(lines) + "\n"


def path_distance(prob: ControlProblem, u, c, backend="direct"):
    """H^1_0 distance between the penalized state and the obstacle solution at ``u``."""
    y_c = penalized_state_solve(prob, u, c, backend=backend)
    exact = solve_obstacle(prob.obstacle, embed_l2(prob.grid, u), backend=backend)
    return h1_norm(prob.grid, y_c - exact.y)
