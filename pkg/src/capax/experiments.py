"""Named experiments driven by config sections.

Every experiment takes typed parameters and a seeded generator and returns an
:class:`Outcome`: one main table, a plot description, optional extra files and
a list of checks.  Nothing here touches the file system.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import config as C
from .control import (ControlProblem, audit_report, audit_stationarity, optimize,
                      path_distance)
from .derivatives import (WeakWeakLevel, check_approach, enumerate_pbss, pbsw_construct,
                          pbsw_membership, weak_weak_example)
from .instances import (contact_control_problem, manufactured, random_blob, random_measure,
                        random_obstacle_problem, smooth_field, state_unit)
from .measures import DiscreteMeasure, gamma_distance, gamma_sum_probe, radon_approximation
from .mesh import Grid, embed_l2, hminus1_norm
from .obstacle import (ObstacleProblem, complementarity_residuals, difference_quotient_probe,
                       is_gateaux_point, solve_obstacle)
from .serialize import measure_table, obstacle_result_table, stationarity_table

log = logging.getLogger(__name__)


@dataclass
class Plot:
    x: str
    y: list
    logx: bool = False
    logy: bool = False
    style: str = "linespoints"  # or "points", "field"
    title: str = ""
    group: str | None = None  # split the series by this column


@dataclass
class Check:
    name: str
    passed: bool
    value: float

    def line(self) -> str:
        return f"{self.name}: {'pass' if self.passed else 'FAIL'} ({self.value:.3e})"


@dataclass
class Outcome:
    header: list
    rows: list
    plot: Plot
    extras: dict = field(default_factory=dict)  # filename suffix -> (header, rows) or text
    checks: list = field(default_factory=list)


# --- problem recipes ---

G1_RECIPES = {
    # psi, u
    "g1-contact": (-0.01, -0.5),
    "g1-biactive": (-0.0625, -0.5),
    "g1-free": (-np.inf, 0.5),
}
RECIPES = (*G1_RECIPES, "random", "manufactured")


def obstacle_instance(recipe, grid, rng, contact=0.25, biactive=0):
    """``(problem, u)`` for a recipe name."""
    if recipe in G1_RECIPES:
        psi, u = G1_RECIPES[recipe]
        g1 = Grid.interval(1)
        return ObstacleProblem(g1, [psi]), np.array([u])
    if recipe == "random":
        return random_obstacle_problem(grid, rng)
    contact_set = random_blob(grid, rng, radius=np.sqrt(contact / np.pi)) if grid.dim == 2 \
        else rng.random(grid.size) < contact
    if not contact_set.any():
        contact_set[rng.integers(grid.size)] = True
    members = np.flatnonzero(contact_set)
    chosen = rng.choice(members, size=min(biactive, members.size), replace=False)
    bi = grid.no_nodes()
    bi[chosen] = True
    problem, u, _ = manufactured(grid, rng, contact_set, bi)
    return problem, u


def _direction(grid, rng, h_values):
    if h_values:
        return np.broadcast_to(np.asarray(h_values, float), (grid.size,)).copy()
    return embed_l2(grid, smooth_field(grid, rng) + 0.3 * rng.standard_normal(grid.size))


# --- experiments ---

def run_obstacle(p, rng):
    problem, u = obstacle_instance(p["recipe"], p["grid"], rng, p["contact"], p["biactive"])
    res = solve_obstacle(problem, u, method=p["method"])
    header, rows = obstacle_result_table(res)
    resid = complementarity_residuals(res)
    # Residuals relative to the sizes of the state and of the loads.
    psi = problem.psi[problem.bounded]
    y_scale = max(np.abs(res.y).max(), np.abs(psi).max(initial=0.0)) or 1.0
    xi_scale = (abs(res.grid.laplacian).sum(axis=1).max() * np.abs(res.y).max()
                + np.abs(u).max()) or 1.0
    bounded = problem.bounded
    gap = np.where(bounded, res.y - np.where(bounded, problem.psi, 0.0), 0.0)
    comp = np.where(bounded, res.xi * gap / y_scale, res.xi) / xi_scale
    rel = {"feasibility": resid["feasibility"] / y_scale, "sign": resid["sign"] / xi_scale,
           "complementarity": float(np.abs(comp).max())}
    checks = [Check(name, rel[name] <= 1e-12, rel[name]) for name in rel]
    style = "field" if res.grid.dim == 2 else "linespoints"
    plot = Plot("x1", ["y", "psi"] if res.grid.dim == 1 else ["y"], style=style,
                title=f"obstacle solution ({p['recipe']})")
    return Outcome(header, rows, plot, checks=checks)


def run_gateaux(p, rng):
    problem, u = obstacle_instance(p["recipe"], p["grid"], rng, p["contact"], p["biactive"])
    grid = problem.grid
    base = solve_obstacle(problem, u)
    gateaux = is_gateaux_point(base)
    rows = []
    worst = 0.0
    for k in range(p["probes"]):
        h = _direction(grid, rng, p["h"])
        hn = hminus1_norm(grid, h)
        t_min = min(p["t"])
        for t, err in difference_quotient_probe(problem, u, h, p["t"]):
            rows.append([k, t, err, hn, gateaux])
            if t == t_min:
                worst = max(worst, err / (hn or 1.0))
    checks = [Check("relative quotient error at smallest t", worst <= p["tol"], worst)]
    plot = Plot("t", ["error"], logx=True, logy=True, style="points",
                title="difference quotient error", group="probe")
    return Outcome(["probe", "t", "error", "h_norm", "gateaux"], rows, plot, checks=checks)


def run_pbss(p, rng):
    problem, u = obstacle_instance(p["recipe"], p["grid"], rng, p["contact"], p["biactive"])
    res = solve_obstacle(problem, u)
    rows = []
    ok_exact, worst_state, slopes = True, 0.0, []
    for k, element in enumerate(enumerate_pbss(res, limit=p["limit"])):
        dist = []
        for n in p["n"]:
            rep = check_approach(problem, u, res, element, n)
            rows.append([k, int(element.omega_hat.sum()), n, rep["state_error"], rep["gateaux"],
                         rep["inactive_matches"], rep["distance"], rep["constant"] / n])
            ok_exact &= rep["gateaux"] and rep["inactive_matches"]
            worst_state = max(worst_state, rep["state_error"])
            dist.append(rep["distance"])
        if len(p["n"]) > 1 and min(dist) > 0:
            slopes.append(-np.polyfit(np.log(p["n"]), np.log(dist), 1)[0])
    checks = [Check("gateaux with inactive set omega_hat", ok_exact, float(not ok_exact)),
              Check("state error", worst_state <= 1e-9, worst_state)]
    if slopes:
        checks.append(Check("distance slope", min(slopes) >= 0.99, min(slopes)))
    header = ["element", "omega_hat_size", "n", "state_error", "gateaux", "inactive_matches",
              "distance", "bound"]
    plot = Plot("n", ["distance"], logx=True, logy=True, title="approach distance",
                group="element")
    return Outcome(header, rows, plot, checks=checks)


def run_pbsw(p, rng):
    problem, u = obstacle_instance(p["recipe"], p["grid"], rng, p["contact"], p["biactive"])
    res = solve_obstacle(problem, u)
    grid = res.grid
    diag = grid.laplacian.diagonal().max()
    mass = np.where(res.active, diag * 10.0 ** rng.uniform(-2, 1, grid.size), 0.0)
    mass[res.strictly_active] = np.inf
    mu = DiscreteMeasure(grid, mass)
    rows, dists, ok = [], [], True
    for n in p["n"]:
        element = pbsw_construct(res, radon_approximation(mu, n))
        member, cert = pbsw_membership(res, element.mu)
        d = gamma_distance(element.mu, mu)
        rows.append([n, d, member, cert["inactive_mass"], cert["max_torsion_on_strict"]])
        dists.append(d)
        ok &= member
    mono = all(b <= a + 1e-15 for a, b in zip(dists, dists[1:]))
    checks = [Check("membership", ok, float(not ok)),
              Check("distance nonincreasing", mono, dists[-1])]
    plot = Plot("n", ["gamma_distance"], logx=True, logy=True, title="strong-weak pipeline")
    return Outcome(["n", "gamma_distance", "member", "inactive_mass", "max_torsion_on_strict"],
                   rows, plot, checks=checks)


def run_gamma(p, rng):
    levels = list(zip(p["nodes"], p["periods"]))
    report = weak_weak_example(levels, target_c=p["target_c"], cell_constant=p["cell_constant"],
                               probes=p["probes"], seed=int(rng.integers(2**31)))
    fields = list(WeakWeakLevel.__dataclass_fields__)
    rows = [[getattr(r, f) for f in fields] for r in report]
    checks = [Check("gateaux at every level", all(r.gateaux for r in report), 0.0)]
    if len(report) >= 2:
        a, b = report[-2].fitted_c, report[-1].fitted_c
        rel = abs(a - b) / max(abs(b), 1e-300)
        checks.append(Check("fitted c stabilizes", rel <= 0.2, rel))
    last = report[-1]
    ratio = last.distance_fitted / last.distance_laplacian if last.distance_laplacian else 0.0
    checks.append(Check("fitted operator closer than Laplacian", ratio < 0.5, ratio))
    plot = Plot("level", ["fitted_c"], title="fitted reaction constant")
    return Outcome(fields, rows, plot, checks=checks)


def _measure_recipe(p, rng):
    if p["measure"] == "g1":
        return DiscreteMeasure(Grid.interval(1), [8.0])
    return random_measure(p["grid"], rng, p_inf=p["p_inf"], p_zero=p["p_zero"])


def run_radon(p, rng):
    mu = _measure_recipe(p, rng)
    grid = mu.grid
    rows, prev, mono, bounded, dists = [], None, True, True, []
    finite = ~mu.eliminated
    for n in p["n"]:
        mu_n = radon_approximation(mu, n)
        d = gamma_distance(mu_n, mu)
        inc = np.inf if prev is None else float((mu_n.mass - prev.mass).min())
        excess = float((mu_n.mass - mu.mass)[finite].max(initial=-np.inf))
        mono &= prev is None or inc >= -1e-12
        bounded &= excess <= 1e-12 * max(1.0, mu.finite_mass.max(initial=0.0))
        rows.append([n, d, inc, excess, float(mu_n.mass.max())])
        dists.append(d)
        prev = mu_n
    checks = [Check("masses nondecreasing", mono, 0.0), Check("masses bounded", bounded, 0.0)]
    if len(dists) > 1 and min(dists) > 0:
        slope = -np.polyfit(np.log(p["n"]), np.log(dists), 1)[0]
        checks.append(Check("decay slope", slope >= 0.9, slope))
    plot = Plot("n", ["gamma_distance"], logx=True, logy=True, title="Radon approximation")
    return Outcome(["n", "gamma_distance", "min_increment", "max_excess", "max_mass"], rows, plot,
                   checks=checks)


def dilate(grid: Grid, mask, steps: int):
    out = np.asarray(mask, bool).copy()
    for _ in range(steps):
        out = out | grid.neighbours(out)
    return out


def sum_sequence(grid, rng, n_list, p_inf=0.0, p_zero=0.3):
    """Radon approximations plus shrinking dilations of a blob, and their limit."""
    mu = random_measure(grid, rng, p_inf=p_inf, p_zero=p_zero)
    c_lim = random_blob(grid, rng, radius=0.15)
    mu_seq = [radon_approximation(mu, n) for n in n_list]
    widths = [max(len(n_list) - 2 - k, 0) for k in range(len(n_list))]
    c_seq = [dilate(grid, c_lim, w) for w in widths]
    return mu_seq, c_seq, mu, c_lim, widths


def run_sum(p, rng):
    mu_seq, c_seq, mu, c_lim, widths = sum_sequence(p["grid"], rng, p["n"], p["p_inf"],
                                                    p["p_zero"])
    dists = gamma_sum_probe(mu_seq, c_seq, mu, c_lim)
    rows = [[n, w, int(c.sum()), d] for n, w, c, d in zip(p["n"], widths, c_seq, dists)]
    mono = all(b <= a + 1e-15 for a, b in zip(dists, dists[1:]))
    checks = [Check("distance nonincreasing", mono, dists[-1]),
              Check("final distance", dists[-1] <= p["tol"], dists[-1])]
    plot = Plot("n", ["gamma_distance"], logx=True, logy=True, title="sum sequence")
    return Outcome(["n", "dilation", "set_size", "gamma_distance"], rows, plot, checks=checks)


def control_instance(p, rng):
    grid = p["grid"]
    if p["recipe"] == "contact":
        bound = p["bound"] if np.isfinite(p["bound"]) else None
        return contact_control_problem(grid, rng, alpha_rel=p["alpha_rel"], bound=bound)
    sigma = state_unit(grid)
    y_d = sigma * smooth_field(grid, rng)
    return ControlProblem(ObstacleProblem(grid, -np.inf), y_d, p["alpha_rel"] * sigma**2,
                          -p["bound"], p["bound"])


def run_control(p, rng):
    prob = control_instance(p, rng)
    grid = prob.grid
    point = optimize(prob, p["c"])
    res = solve_obstacle(prob.obstacle, embed_l2(grid, point.u))
    audit = audit_stationarity(point, res, prob, tol=p["tol"])
    rows, prev = [], None
    for h, mu in zip(point.history, point.path_measures):
        step = np.nan if prev is None else gamma_distance(prev, mu)
        rows.append([h["c"], h["J"], h["iterations"], h["violation"], step,
                     path_distance(prob, point.u, h["c"])])
        prev = mu
    checks = [Check(f"audit {item.name}", item.passed, item.violation / item.tolerance)
              for item in audit["items"]]
    extras = {"_point.csv": stationarity_table(point, grid),
              "_measure.csv": measure_table(point.mu),
              "_audit.txt": audit_report(audit) + f"C4_value\t{audit['c4_value']!r}\n"}
    plot = Plot("c", ["gamma_step", "path_distance"], logx=True, logy=True,
                title="penalty path")
    return Outcome(["c", "J", "iterations", "violation", "gamma_step", "path_distance"], rows,
                   plot, extras=extras, checks=checks)


# --- registry ---

def _obstacle_keys(recipe="random", biactive="0"):
    return {"recipe": (C.choice(*RECIPES), recipe), "contact": (C.to_float, "0.25"),
            "biactive": (C.to_int, biactive)}


REGISTRY = {
    "obstacle": (run_obstacle, {"grid": (C.to_grid, "square 16"), **_obstacle_keys(),
                                "method": (C.choice("pdas", "psor"), "pdas")}),
    "gateaux": (run_gateaux, {"grid": (C.to_grid, "square 16"), **_obstacle_keys(),
                              "t": (C.to_floats, "1e-1 1e-2 1e-3 1e-4"),
                              "h": (C.to_floats, ""), "probes": (C.to_int, "3"),
                              "tol": (C.to_float, "1e-6")}),
    "pbss": (run_pbss, {"grid": (C.to_grid, "square 16"),
                        **_obstacle_keys("manufactured", "3"),
                        "n": (C.to_ints, "1 2 4 8"), "limit": (C.to_int, "6")}),
    "pbsw": (run_pbsw, {"grid": (C.to_grid, "square 16"),
                        **_obstacle_keys("manufactured", "10"),
                        "n": (C.to_ints, "2 4 8 16 32 64")}),
    "gamma": (run_gamma, {"nodes": (C.to_ints, "63 127 255"),
                          "periods": (C.to_floats, "0.3333333333333333 0.25 0.2"),
                          "target_c": (C.to_float, "80"), "cell_constant": (C.to_float, "-1.1"),
                          "probes": (C.to_int, "3")}),
    "radon": (run_radon, {"grid": (C.to_grid, "square 16"),
                          "measure": (C.choice("g1", "random"), "random"),
                          "n": (C.to_ints, "2 4 8 16 32 64 128"),
                          "p_inf": (C.to_float, "0.15"), "p_zero": (C.to_float, "0.3")}),
    "sum": (run_sum, {"grid": (C.to_grid, "square 32"), "n": (C.to_ints, "2 4 8 16 32 64"),
                      "p_inf": (C.to_float, "0.1"), "p_zero": (C.to_float, "0.3"),
                      "tol": (C.to_float, "1e-3")}),
    "control": (run_control, {"grid": (C.to_grid, "square 32"),
                              "recipe": (C.choice("contact", "lq"), "contact"),
                              "alpha_rel": (C.to_float, "1e-3"), "bound": (C.to_float, "inf"),
                              "c": (C.to_floats, "1 10 100 1e3 1e4 1e5 1e6"),
                              "tol": (C.to_float, "1e-4")}),
}


def validate(kind, params):
    """Cross-key checks that cannot be expressed per key."""
    if "n" in params and any(n < 1 for n in params["n"]):
        raise ValueError("n values must be positive")
    if kind in ("radon", "pbsw") and any(n < 2 for n in params["n"]):
        raise ValueError("n values must be at least 2")
    if "t" in params and any(t <= 0 for t in params["t"]):
        raise ValueError("step sizes must be positive")
    if kind == "control" and any(b <= a for a, b in zip(params["c"], params["c"][1:])):
        raise ValueError("c schedule must be increasing")
    if kind == "control" and not params["bound"] > 0:
        raise ValueError("bound must be positive")
    if kind == "gamma" and len(params["nodes"]) != len(params["periods"]):
        raise ValueError("nodes and periods must have the same length")
