"""Acceptance criteria shared by ``capax verify`` and the test suite.

Each criterion draws its instances from its own seeded generator, runs a
batch of checks and reports one :class:`Reading` per measured quantity.
Parameters (instance counts, tolerances) come from a schema so that a verify
config can override any of them in a section named after the criterion.

Errors are reported in physical units: states and torsion functions are
divided by the cell volume ``h^d`` before comparison.
"""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import lsq_linear

from . import config as C
from .control import (ControlProblem, StationarityPoint, audit_stationarity, optimize)
from .derivatives import check_approach, enumerate_pbss, weak_weak_example
from .experiments import control_instance, obstacle_instance, sum_sequence
from .instances import (contact_control_problem, manufactured, random_blob, random_measure,
                        random_node_set, random_obstacle_problem, smooth_field, state_unit)
from .measures import (DiscreteMeasure, gamma_distance, gamma_sum_probe, measure_from_node_set,
                       radon_approximation, torsion, torsion_residual)
from .mesh import Grid, embed_l2, hminus1_norm
from .obstacle import (ObstacleProblem, difference_quotient_probe, is_gateaux_point,
                       solve_obstacle)

log = logging.getLogger(__name__)

AUDIT_ITEMS = ("C1", "C2", "C3", "C4", "M", "nu=p*mu")
# Items that fail whenever the key item fails: M and nu = p mu each imply C2-C4.
IMPLIED = {"C1": (), "C2": ("M", "nu=p*mu"), "C3": ("M", "nu=p*mu"),
           "C4": ("M", "nu=p*mu"), "M": (), "nu=p*mu": ()}


@dataclass
class Reading:
    name: str
    value: float
    limit: float
    op: str = "<="  # how value must compare to limit

    @property
    def passed(self) -> bool:
        v, lim = self.value, self.limit
        return bool({"<=": v <= lim, ">=": v >= lim, "<": v < lim, "==": v == lim}[self.op])


@dataclass
class CriterionResult:
    name: str
    readings: list
    seconds: float = 0.0
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and all(r.passed for r in self.readings)

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        parts = [f"{r.name}={r.value:.3e}{'' if r.passed else '!'}" for r in self.readings]
        if self.error:
            parts.append(f"error={self.error}")
        return f"{self.name}\t{status}\t{self.seconds:.1f}s\t" + " ".join(parts)


@dataclass
class Criterion:
    number: int
    name: str
    title: str
    run: object
    schema: dict
    quick: dict = field(default_factory=dict)  # text overrides for the quick suite


def _grids(names):
    out = []
    for name in names:
        if name == "G1":
            out.append(Grid.interval(1))
        elif name == "G3":
            out.append(Grid.interval(3))
        else:
            out.append(Grid.square(int(name)))
    return out


def _slope(n, d):
    n, d = np.asarray(n, float), np.asarray(d, float)
    keep = d > 0
    if keep.sum() < 2:
        return np.inf
    return float(-np.polyfit(np.log(n[keep]), np.log(d[keep]), 1)[0])


# --- 1. oracle equivalence ---

def _physical_complementarity(res):
    vol = res.grid.volume
    bounded = res.problem.bounded
    gap = np.where(bounded, res.y - np.where(bounded, res.problem.psi, 0.0), 0.0) / vol
    xi = res.xi / vol
    return float(np.abs(np.where(bounded, xi * gap, xi)).max(initial=0.0))


def crit_oracle(p, rng):
    t0 = time.perf_counter()
    diff = resid = 0.0
    count = 0
    for grid in _grids(p["grids"]):
        for _ in range(p["instances"]):
            problem, u = random_obstacle_problem(grid, rng)
            a = solve_obstacle(problem, u, method="pdas")
            b = solve_obstacle(problem, u, method="psor")
            diff = max(diff, float(np.abs(a.y - b.y).max()) / grid.volume)
            resid = max(resid, _physical_complementarity(a))
            count += 1
    return [Reading("instances", count, 100, ">="),
            Reading("max_difference", diff, p["tol"]),
            Reading("complementarity", resid, p["tol_complementarity"]),
            Reading("seconds", time.perf_counter() - t0, p["max_seconds"])]


# --- 2. Gateaux characterization ---

def crit_gateaux(p, rng):
    grid = Grid.square(p["size"])
    strict_err = bi_err = 0.0
    strict_ok = bi_flag = 0
    for kind, biactive in (("strict", 0), ("biactive", 3)):
        for _ in range(p["points"]):
            problem, u = obstacle_instance("manufactured", grid, rng, 0.25, biactive)
            res = solve_obstacle(problem, u)
            h = embed_l2(grid, smooth_field(grid, rng) + 0.3 * rng.standard_normal(grid.size))
            hn = hminus1_norm(grid, h)
            if kind == "strict":
                strict_ok += is_gateaux_point(res)
                (_, err), = difference_quotient_probe(problem, u, h, [p["t"]])
                strict_err = max(strict_err, err / hn)
            else:
                bi_flag += not is_gateaux_point(res)
                # Both one-sided quotients, along h and along -h.
                for sign in (1.0, -1.0):
                    (_, err), = difference_quotient_probe(problem, u, sign * h, [p["t"]])
                    bi_err = max(bi_err, err / hn)
    return [Reading("strict_points_gateaux", strict_ok, p["points"], "=="),
            Reading("strict_relative_error", strict_err, p["tol_strict"]),
            Reading("biactive_points_not_gateaux", bi_flag, p["points"], "=="),
            Reading("biactive_relative_error", bi_err, p["tol_biactive"])]


# --- 3. strong-strong elements ---

def crit_pbss(p, rng):
    state_err, bad, slopes, elements = 0.0, 0, [], 0
    for grid in _grids(p["grids"]):
        for _ in range(p["instances"]):
            b = int(rng.integers(1, min(4, grid.size) + 1))
            if grid.dim == 1:
                contact = grid.all_nodes()
            else:
                contact = random_blob(grid, rng, radius=0.25)
            chosen = rng.choice(np.flatnonzero(contact), size=b, replace=False)
            bi = grid.no_nodes()
            bi[chosen] = True
            problem, u, _ = manufactured(grid, rng, contact, bi)
            res = solve_obstacle(problem, u)
            if res.biactive.sum() != b:
                raise RuntimeError("manufactured biactive set was not recovered")
            for element in enumerate_pbss(res, limit=4):
                elements += 1
                dist = []
                for n in p["n"]:
                    rep = check_approach(problem, u, res, element, n)
                    bad += not (rep["gateaux"] and rep["inactive_matches"])
                    state_err = max(state_err, rep["state_error"] / grid.volume)
                    dist.append(rep["distance"])
                slopes.append(_slope(p["n"], dist))
    return [Reading("elements", elements, 1, ">="),
            Reading("not_gateaux_or_wrong_inactive_set", bad, 0, "=="),
            Reading("state_error", state_err, p["tol_state"]),
            Reading("min_slope", min(slopes), p["min_slope"], ">=")]


# --- 4. torsion support ---

def crit_torsion(p, rng):
    mismatch, worst_neg = 0, 0.0
    for grid in _grids(p["grids"]):
        vol = grid.volume
        for _ in range(p["sets"]):
            excluded = random_node_set(grid, rng)
            w = torsion(measure_from_node_set(grid, excluded)) / vol
            r = torsion_residual(grid, w * vol) / vol
            # {w > 0} is the open set O; the fine support of 1 + Delta w is its complement.
            positive = w > p["tol"] * max(w.max(initial=0.0), 1e-300)
            support = r > p["tol"]
            mismatch += int((positive != ~excluded).sum() + (support != excluded).sum())
            worst_neg = max(worst_neg, float(-r.min(initial=0.0)))
    return [Reading("support_mismatches", mismatch, 0, "=="),
            Reading("negative_residual", worst_neg, p["tol"])]


# --- 5. Radon approximation ---

def crit_radon(p, rng):
    grid = Grid.square(p["size"])
    worst_drop, slopes = 0.0, []
    for _ in range(p["measures"]):
        mu = random_measure(grid, rng, p_inf=0.15, p_zero=0.3)
        scale = max(mu.finite_mass.max(initial=0.0), 1.0)
        prev, dist = None, []
        for n in p["n"]:
            mu_n = radon_approximation(mu, n)
            if prev is not None:
                worst_drop = max(worst_drop, float((prev.mass - mu_n.mass).max()) / scale)
            dist.append(gamma_distance(mu_n, mu))
            prev = mu_n
        slopes.append(_slope(p["n"], dist))
    g1 = radon_approximation(DiscreteMeasure(Grid.interval(1), [8.0]), 2).mass[0]
    return [Reading("mass_decrease", worst_drop, p["slack"]),
            Reading("min_slope", min(slopes), p["min_slope"], ">="),
            Reading("g1_error", abs(g1 - 8.0 / 3.0), p["tol_g1"])]


# --- 6. sum theorem ---

def crit_sum(p, rng):
    grid = Grid.square(p["size"])
    worst_rise, final = 0.0, 0.0
    for _ in range(p["sequences"]):
        mu_seq, c_seq, mu, c_lim, _ = sum_sequence(grid, rng, p["n"], p_inf=0.1)
        d = gamma_sum_probe(mu_seq, c_seq, mu, c_lim)
        worst_rise = max([worst_rise] + [b - a for a, b in zip(d, d[1:])])
        final = max(final, d[-1])
    return [Reading("max_increase", worst_rise, 0.0),
            Reading("final_distance", final, p["tol"])]


# --- 7. strange term ---

def crit_strange(p, rng):
    t0 = time.perf_counter()
    levels = list(zip(p["nodes"], p["periods"]))
    report = weak_weak_example(levels, target_c=p["target_c"],
                               cell_constant=p["cell_constant"], seed=int(rng.integers(2**31)))
    a, b = report[-2].fitted_c, report[-1].fitted_c
    last = report[-1]
    return [Reading("gateaux_levels", sum(r.gateaux for r in report), len(report), "=="),
            Reading("derivative_error", max(r.derivative_error for r in report), 1e-8),
            Reading("c_change", abs(a - b) / abs(b), p["stabilize"]),
            Reading("distance_ratio", last.distance_fitted / last.distance_laplacian,
                    p["ratio"], "<"),
            Reading("seconds", time.perf_counter() - t0, p["max_seconds"])]


# --- 8. control ---

def lq_oracle_unbounded(prob: ControlProblem):
    """Solve the linear optimality system for ``(y, u, p)`` in one sparse factorization."""
    grid = prob.grid
    A = grid.laplacian
    n, vol = grid.size, grid.volume
    eye = sp.identity(n, format="csr")
    K = sp.bmat([[A, -vol * eye, None],
                 [-vol * eye, None, A],
                 [None, prob.alpha * eye, eye]], format="csc")
    rhs = np.concatenate([np.zeros(n), -vol * prob.y_d, np.zeros(n)])
    return spla.spsolve(K, rhs)[n:2 * n]


def lq_oracle_bounded(prob: ControlProblem):
    """Box-constrained least squares for ``u`` (bounded-variable least squares)."""
    grid = prob.grid
    vol = grid.volume
    S = vol * spla.spsolve(grid.laplacian.tocsc(), np.eye(grid.size))
    M = np.vstack([np.sqrt(vol) * S, np.sqrt(prob.alpha * vol) * np.eye(grid.size)])
    rhs = np.concatenate([np.sqrt(vol) * prob.y_d, np.zeros(grid.size)])
    return lsq_linear(M, rhs, bounds=(prob.lower, prob.upper), method="bvls", tol=1e-15).x


def exact_stationary_point(grid: Grid, rng, biactive=3):
    """A point satisfying every audit item exactly, with its problem and obstacle result.

    The obstacle instance is manufactured; ``p`` vanishes on the active set,
    ``nu`` lives on the active set and ``y_d`` is chosen to close the adjoint
    equation.  Active controls sit at (degenerate) bounds so that ``lambda``
    may be nonzero there.
    """
    contact = random_blob(grid, rng, radius=0.25)
    bi = grid.no_nodes()
    bi[rng.choice(np.flatnonzero(contact), size=biactive, replace=False)] = True
    obstacle, loads, _ = manufactured(grid, rng, contact, bi)
    u = loads / grid.volume
    res = solve_obstacle(obstacle, embed_l2(grid, u))
    alpha = 1.0 / np.abs(u).max()
    active = res.active
    p = np.where(active, 0.0, -alpha * u)
    nu = np.where(active, rng.uniform(0.5, 1.0, grid.size) * rng.choice([-1, 1], grid.size), 0.0)
    nu *= np.abs(p).max() * grid.volume
    y_d = res.y - (nu + grid.laplacian @ p) / grid.volume
    lower = np.where(active, u, -np.inf)
    upper = np.where(active, u, np.inf)
    prob = ControlProblem(obstacle, y_d, alpha, lower, upper)
    lam = -p - alpha * u
    point = StationarityPoint(res.y.copy(), u, p, nu, lam)
    return prob, res, point


def corrupt(point: StationarityPoint, res, item: str) -> StationarityPoint:
    """A copy of ``point`` broken so that ``item`` fails."""
    y, u, p, nu, lam = (a.copy() for a in (point.y, point.u, point.p, point.nu, point.lam))
    # The scales the audit uses: J_u = -p here and J_y = nu + A p.
    P = np.abs(p).max()
    N = max(np.abs(nu).max(), np.abs(nu + res.grid.laplacian @ p).max())
    strict = np.flatnonzero(res.strictly_active)
    bi = np.flatnonzero(res.biactive)
    inactive = np.flatnonzero(res.inactive)
    if item == "C1":
        i = inactive[np.argmax(np.abs(p[inactive]))]
        lam[i] += 0.1 * P
    elif item == "C2":
        j = strict[np.argmax(np.abs(nu[strict]))]
        p[j] = np.sign(nu[j]) * 0.1 * P
        lam[j] -= p[j]
    elif item == "C3":
        i = inactive[np.argmax(np.abs(p[inactive]))]
        nu[i] = np.sign(p[i]) * 0.1 * N
    elif item in ("C4", "M"):
        b = bi[0]
        p[b] = 0.1 * P
        lam[b] -= p[b]
        nu[b] = (-0.1 if item == "C4" else 0.1) * N
    elif item == "nu=p*mu":
        # p stays below the C2 and M thresholds but is clearly nonzero, so
        # nu / p is a large negative mass.
        j = strict[np.argmax(np.abs(nu[strict]))]
        p[j] = -np.sign(nu[j]) * 1e-6 * P
        lam[j] -= p[j]
    else:
        raise ValueError(f"unknown audit item {item!r}")
    return StationarityPoint(y, u, p, nu, lam)


def isolation_table(grid: Grid, rng, tol=1e-4):
    """``{target: {item: passed}}`` for the exact point (target ``None``) and each corruption."""
    prob, res, point = exact_stationary_point(grid, rng)
    table = {}
    for target in (None, *AUDIT_ITEMS):
        pt = point if target is None else corrupt(point, res, target)
        audit = audit_stationarity(pt, res, prob, tol=tol)
        table[target] = {item.name: item.passed for item in audit["items"]}
    return table


def isolation_failures(table) -> int:
    """Entries that contradict 'the target fails and nothing outside its implications does'."""
    bad = sum(not ok for ok in table[None].values())
    for target in AUDIT_ITEMS:
        row = table[target]
        bad += row[target]
        bad += sum(not ok for item, ok in row.items()
                   if item != target and item not in IMPLIED[target])
    return bad


def _lq_problem(grid, rng, bound):
    sigma = state_unit(grid)
    y_d = sigma * smooth_field(grid, rng)
    return ControlProblem(ObstacleProblem(grid, -np.inf), y_d, 1e-3 * sigma**2, -bound, bound)


def crit_control(p, rng):
    readings = []
    grid = Grid.square(p["lq_size"])
    lq_err = 0.0
    for bound, oracle in ((np.inf, lq_oracle_unbounded), (p["lq_bound"], lq_oracle_bounded)):
        prob = _lq_problem(grid, rng, bound)
        point = optimize(prob, [1.0])
        lq_err = max(lq_err, float(np.abs(point.u - oracle(prob)).max()))
    readings.append(Reading("lq_u_error", lq_err, p["tol_lq"]))

    grid = Grid.square(p["size"])
    worst = {name: 0.0 for name in AUDIT_ITEMS}
    trend_ratio = 0.0
    for _ in range(p["instances"]):
        prob = contact_control_problem(grid, rng, alpha_rel=p["alpha_rel"])
        point = optimize(prob, p["c"])
        res = solve_obstacle(prob.obstacle, embed_l2(grid, point.u))
        audit = audit_stationarity(point, res, prob, tol=p["tol"])
        for item in audit["items"]:
            worst[item.name] = max(worst[item.name], item.violation / item.tolerance)
        steps = [gamma_distance(a, b) for a, b in zip(point.path_measures,
                                                       point.path_measures[1:])]
        trend_ratio = max([trend_ratio] + [b / a if a > 0 else np.inf
                                           for a, b in zip(steps, steps[1:])])
    # Audit values are violations in units of their tolerance.
    readings += [Reading(f"audit_{name}", worst[name], 1.0) for name in AUDIT_ITEMS]
    table = isolation_table(Grid.square(p["isolation_size"]), rng, p["tol"])
    readings.append(Reading("isolation_failures", isolation_failures(table), 0, "=="))
    readings.append(Reading("gamma_step_ratio", trend_ratio, 1.0, "<"))
    return readings


# --- 9. comparison principle ---

def crit_comparison(p, rng):
    worst = 0.0
    for grid in _grids(p["grids"]):
        for _ in range(p["pairs"]):
            mu1 = random_measure(grid, rng)
            extra = random_measure(grid, rng, p_inf=0.05, p_zero=0.5)
            mu2 = mu1 + extra
            if not mu1 <= mu2:
                raise RuntimeError("pair is not ordered")
            w1, w2 = torsion(mu1) / grid.volume, torsion(mu2) / grid.volume
            worst = max(worst, float((w2 - w1).max()))
    return [Reading("ordering_violation", worst, p["slack"])]


# --- 10. determinism ---

DETERMINISM_CONFIG = """\
seed = 11
[obstacle]
grid = square 12
[gateaux]
grid = square 12
probes = 2
[radon]
grid = square 12
n = 2 4 8
[sum]
grid = square 12
n = 2 4 8
"""


def crit_determinism(p, rng):
    import tempfile
    from pathlib import Path

    from .cli import run_config

    outputs = []
    with tempfile.TemporaryDirectory() as tmp:
        for k, threads in enumerate((1, p["threads"])):
            out = Path(tmp) / f"run{k}"
            status = run_config(DETERMINISM_CONFIG, out, seed=None, threads=threads, quiet=True)
            if status != 0:
                raise RuntimeError(f"capax run exited with {status}")
            outputs.append({f.name: f.read_bytes() for f in sorted(out.glob("*.csv"))})
    same = outputs[0].keys() == outputs[1].keys() and all(
        outputs[0][k] == outputs[1][k] for k in outputs[0])
    return [Reading("csv_files", len(outputs[0]), 1, ">="),
            Reading("differing_runs", 0 if same else 1, 0, "==")]


# --- registry ---

CRITERIA = [
    Criterion(1, "oracle", "PDAS agrees with projected SOR", crit_oracle, {
        "grids": (C.to_words, "G3 16 32"), "instances": (C.to_int, "100"),
        "tol": (C.to_float, "1e-8"), "tol_complementarity": (C.to_float, "1e-10"),
        "max_seconds": (C.to_float, "60")}, {"instances": "34"}),
    Criterion(2, "gateaux", "difference quotients at Gateaux and biactive points",
              crit_gateaux, {
                  "size": (C.to_int, "16"), "points": (C.to_int, "20"),
                  "t": (C.to_float, "1e-4"), "tol_strict": (C.to_float, "1e-6"),
                  "tol_biactive": (C.to_float, "1e-8")}, {"points": "5"}),
    Criterion(3, "pbss", "approach sequences for strong-strong elements", crit_pbss, {
        "grids": (C.to_words, "G3 16"), "instances": (C.to_int, "4"),
        "n": (C.to_ints, "1 2 4 8"), "tol_state": (C.to_float, "1e-9"),
        "min_slope": (C.to_float, "0.99")}, {"instances": "2"}),
    Criterion(4, "torsion", "support identities of torsion functions", crit_torsion, {
        "grids": (C.to_words, "G3 16 32"), "sets": (C.to_int, "50"),
        "tol": (C.to_float, "1e-10")}, {"sets": "10"}),
    Criterion(5, "radon", "monotone Radon approximation with 1/n decay", crit_radon, {
        "size": (C.to_int, "16"), "measures": (C.to_int, "50"),
        "n": (C.to_ints, "2 4 8 16 32 64 128"), "slack": (C.to_float, "1e-12"),
        "min_slope": (C.to_float, "0.9"), "tol_g1": (C.to_float, "1e-12")},
              {"measures": "10"}),
    Criterion(6, "sum", "sum sequences converge monotonically", crit_sum, {
        "size": (C.to_int, "32"), "sequences": (C.to_int, "10"),
        "n": (C.to_ints, "2 4 8 16 32 64"), "tol": (C.to_float, "1e-3")},
              {"sequences": "3"}),
    Criterion(7, "strange_term", "critically perforated domains give a reaction term",
              crit_strange, {
                  "nodes": (C.to_ints, "63 127 255"),
                  "periods": (C.to_floats, "0.3333333333333333 0.25 0.2"),
                  "target_c": (C.to_float, "80"), "cell_constant": (C.to_float, "-1.1"),
                  "stabilize": (C.to_float, "0.2"), "ratio": (C.to_float, "0.5"),
                  "max_seconds": (C.to_float, "600")}),
    Criterion(8, "control", "penalty path, LQ oracle and stationarity audits", crit_control, {
        "lq_size": (C.to_int, "16"), "lq_bound": (C.to_float, "0.5"),
        "tol_lq": (C.to_float, "1e-6"), "size": (C.to_int, "32"),
        "instances": (C.to_int, "5"), "alpha_rel": (C.to_float, "1e-3"),
        "c": (C.to_floats, "1 10 100 1e3 1e4 1e5 1e6"), "tol": (C.to_float, "1e-4"),
        "isolation_size": (C.to_int, "16")},
              {"instances": "1", "size": "16", "c": "1 10 100 1e3"}),
    Criterion(9, "comparison", "torsion functions are ordered like their measures",
              crit_comparison, {
                  "grids": (C.to_words, "G3 16 32"), "pairs": (C.to_int, "100"),
                  "slack": (C.to_float, "1e-10")}, {"pairs": "20"}),
    Criterion(10, "determinism", "repeated runs give byte-identical CSV", crit_determinism, {
        "threads": (C.to_int, "2")}),
]
BY_NAME = {c.name: c for c in CRITERIA}
SUITES = ("default", "quick")


def criterion_seed(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, zlib.crc32(name.encode())])


def parameters(criterion: Criterion, suite="default", entries=None, where=None):
    """Typed parameters: schema defaults, then suite overrides, then config entries."""
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}")
    schema = dict(criterion.schema)
    if suite == "quick":
        schema.update({k: (schema[k][0], v) for k, v in criterion.quick.items()})
    return C.convert_entries(entries or {}, schema, where or f"[{criterion.name}]")


def run_criterion(criterion: Criterion, params: dict, seed: int = 0) -> CriterionResult:
    rng = np.random.default_rng(criterion_seed(seed, criterion.name))
    t0 = time.perf_counter()
    try:
        readings = criterion.run(params, rng)
        error = None
    except Exception as exc:  # reported as a failed criterion
        log.exception("criterion %s raised", criterion.name)
        readings, error = [], f"{type(exc).__name__}: {exc}"
    return CriterionResult(criterion.name, readings, time.perf_counter() - t0, error)


def check(name: str, suite="default", seed: int = 0, **overrides) -> CriterionResult:
    """Run one criterion by name; keyword overrides are given as config text."""
    criterion = BY_NAME[name]
    entries = {k: C.Entry(str(v), 0) for k, v in overrides.items()}
    return run_criterion(criterion, parameters(criterion, suite, entries), seed)
