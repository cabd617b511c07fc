import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capax.acceptance import (AUDIT_ITEMS, IMPLIED, exact_stationary_point, isolation_failures,
                              isolation_table, lq_oracle_bounded, lq_oracle_unbounded)
from capax.control import (AnchorMismatch, ControlProblem, StationarityPoint, audit_report,
                           audit_stationarity, objective_and_partials, optimize, path_distance,
                           penalized_adjoint_solve, penalized_state_solve, penalty_measure,
                           recover_measure, smoothed_max, tol_p)
from capax.instances import contact_control_problem, random_obstacle_problem, smooth_field, \
    state_unit
from capax.measures import gamma_distance
from capax.mesh import Grid, apply_neg_laplacian, embed_l2, solve_poisson
from capax.obstacle import ObstacleProblem, solve_obstacle

G1 = Grid.interval(1)


def lq_problem(grid, rng, bound=np.inf, alpha_rel=1e-3):
    sigma = state_unit(grid)
    return ControlProblem(ObstacleProblem(grid, -np.inf), sigma * smooth_field(grid, rng),
                          alpha_rel * sigma**2, -bound, bound)


def g1_point(p, nu, psi=-0.0625, u=-1.0):
    """A one-node point anchored at the biactive G1 instance (loads u h = -0.5)."""
    obstacle = ObstacleProblem(G1, [psi])
    prob = ControlProblem(obstacle, [0.0], 1.0, -np.inf, np.inf)
    res = solve_obstacle(obstacle, embed_l2(G1, [u]))
    y = res.y.copy()
    point = StationarityPoint(y, np.array([u]), np.array([p]), np.array([nu]),
                              np.array([-p - u]))
    return prob, res, point


# --- objective and smoothing ---

def test_objective_zero_at_target():
    prob = ControlProblem(ObstacleProblem(G1, -np.inf), [0.3], 1.0, -1, 1)
    J, J_y, J_u = objective_and_partials(prob, [0.3], [0.0])
    assert J == 0 and not J_y.any() and not J_u.any()


def test_objective_g1():
    prob = ControlProblem(ObstacleProblem(G1, -np.inf), [0.0], 1.0, -1, 1)
    J, J_y, _ = objective_and_partials(prob, [0.1], [0.0])
    assert J == pytest.approx(0.0025, rel=1e-14)
    np.testing.assert_allclose(J_y, [0.05], rtol=1e-14)


def test_objective_quadratic_in_u(rng):
    grid = Grid.square(5)
    prob = ControlProblem(ObstacleProblem(grid, -np.inf), rng.standard_normal(grid.size),
                          0.7, -np.inf, np.inf)
    y, u = rng.standard_normal(grid.size), rng.standard_normal(grid.size)
    diff = objective_and_partials(prob, y, 2 * u)[0] - objective_and_partials(prob, y, u)[0]
    assert diff == pytest.approx(1.5 * prob.alpha * grid.volume * (u @ u), rel=1e-12)


@pytest.mark.parametrize("x, value, slope", [(-1.0, 0.0, 0.0), (1.0, 1.0, 1.0),
                                             (0.0, 0.125, 0.5)])
def test_smoothed_max(x, value, slope):
    assert smoothed_max(1.0, x) == (pytest.approx(value), pytest.approx(slope))


@given(st.floats(0.1, 1e4), st.floats(-10, 10))
def test_smoothed_max_is_c1(c, x):
    # The derivative matches a central difference of the value.
    # The second derivative is at most c, so truncation is at most c e.
    e = 1e-3 / c
    v1, _ = smoothed_max(c, x - e)
    v2, _ = smoothed_max(c, x + e)
    _, d = smoothed_max(c, x)
    roundoff = 4 * np.finfo(float).eps * max(abs(x), 1.0) / e
    assert abs((v2 - v1) / (2 * e) - d) <= c * e + roundoff


def test_smoothed_max_needs_positive_c():
    with pytest.raises(ValueError):
        smoothed_max(0.0, 1.0)


# --- penalized state and adjoint ---

def test_penalty_inactive_without_obstacle(rng):
    grid = Grid.square(8)
    prob = ObstacleProblem(grid, -np.inf)
    u = rng.standard_normal(grid.size)
    for c in (1.0, 1e6):
        np.testing.assert_allclose(penalized_state_solve(prob, u, c),
                                   solve_poisson(grid, embed_l2(grid, u)), rtol=1e-12)


def test_penalized_state_g1_converges_to_obstacle():
    prob = ObstacleProblem(G1, [-0.01])
    errors = [abs(penalized_state_solve(prob, [-1.0], c)[0] + 0.01) for c in 10.0 ** np.arange(7)]
    assert all(b <= a for a, b in zip(errors, errors[1:]))
    # The violation decays like 1/c once the node sits in the linear zone.
    scaled = [e * c for e, c in zip(errors, 10.0 ** np.arange(7))]
    assert scaled[-1] == pytest.approx(scaled[-2], rel=1e-3)


def test_penalized_adjoint_where_penalty_inactive(rng):
    grid = Grid.square(8)
    prob = lq_problem(grid, rng)
    u = rng.standard_normal(grid.size)
    y = penalized_state_solve(prob, u, 100.0)
    p, mu = penalized_adjoint_solve(prob, y, u, 100.0)
    assert not mu.mass.any()
    _, J_y, _ = objective_and_partials(prob, y, u)
    np.testing.assert_allclose(p, solve_poisson(grid, J_y), rtol=1e-12)


def test_penalized_adjoint_g1_one_node():
    # Violation deep in the linear zone: max_c' = 1 and the mass is c.
    c = 8.0
    prob = ControlProblem(ObstacleProblem(G1, [0.0]), [0.0], 1.0, -np.inf, np.inf)
    y = np.array([-1.0])
    p, mu = penalized_adjoint_solve(prob, y, [0.0], c)
    assert mu.mass[0] == c
    assert p[0] == pytest.approx(G1.volume * y[0] / (8.0 + c), rel=1e-14)


def test_penalty_masses_grow_along_path(rng):
    grid = Grid.square(12)
    problem, u = random_obstacle_problem(grid, rng)
    nodal = u / grid.volume
    res = solve_obstacle(problem, u)
    prev = None
    for c in 10.0 ** np.arange(1, 7):
        m = penalty_measure(problem, penalized_state_solve(problem, nodal, c), c).mass
        if prev is not None:
            assert np.all(m[res.strictly_active] >= prev[res.strictly_active])
        prev = m


@pytest.mark.parametrize("seed", [0, 1])
def test_path_consistency(seed):
    grid = Grid.square(32)
    r = np.random.default_rng(seed)
    problem, u = random_obstacle_problem(grid, r)
    prob = ControlProblem(problem, 0.0, 1.0, -np.inf, np.inf)
    d = [path_distance(prob, u / grid.volume, c) for c in 10.0 ** np.arange(7)]
    assert all(b <= a + 1e-10 for a, b in zip(d, d[1:]))
    assert d[-1] <= 1e-5


# --- optimize ---

def test_lq_matches_direct_kkt(rng):
    prob = lq_problem(Grid.square(12), rng)
    point = optimize(prob, [1.0])
    assert np.abs(point.u - lq_oracle_unbounded(prob)).max() <= 1e-6


def test_bounded_lq_matches_bvls(rng):
    prob = lq_problem(Grid.square(12), rng, bound=0.5)
    point = optimize(prob, [1.0])
    u_star = lq_oracle_bounded(prob)
    assert np.isclose(np.abs(u_star), 0.5).any()
    assert np.abs(point.u - u_star).max() <= 1e-6


def test_oracles_agree_without_active_bounds(rng):
    prob = lq_problem(Grid.square(8), rng)
    np.testing.assert_allclose(lq_oracle_bounded(prob), lq_oracle_unbounded(prob), atol=1e-9)


def test_reachable_target_without_contact(rng):
    grid = Grid.square(10)
    u0 = 0.5 * smooth_field(grid, rng)
    obstacle = ObstacleProblem(grid, -1.0)
    y_d = solve_poisson(grid, embed_l2(grid, u0))
    prob = ControlProblem(obstacle, y_d, 1e-3 * state_unit(grid) ** 2, -1.0, 1.0)
    point = optimize(prob, [1.0, 10.0])
    J_opt = objective_and_partials(prob, point.y, point.u)[0]
    assert J_opt <= 0.5 * prob.alpha * grid.volume * (u0 @ u0)
    # Gradient of the reduced objective vanishes (bounds inactive here).
    scale = np.abs(point.p).max()
    assert np.abs(point.p + prob.alpha * point.u).max() <= 1e-6 * scale
    assert not solve_obstacle(obstacle, embed_l2(grid, point.u)).active.any()


def test_huge_alpha_gives_projection_of_zero(rng):
    grid = Grid.square(8)
    prob = ControlProblem(ObstacleProblem(grid, -np.inf), smooth_field(grid, rng), 1e12,
                          0.2, 1.0)
    point = optimize(prob, [1.0])
    np.testing.assert_allclose(point.u, 0.2, atol=1e-9)
    np.testing.assert_allclose(point.y, solve_poisson(grid, embed_l2(grid, 0.2)), rtol=1e-9)


def test_projected_gradient_agrees_with_newton(rng):
    grid = Grid.square(8)
    prob = contact_control_problem(grid, rng, bound=2.0)
    a = optimize(prob, [1.0, 10.0, 100.0])
    b = optimize(prob, [1.0, 10.0, 100.0], method="pg")
    assert np.abs(a.u - b.u).max() <= 1e-6 * np.abs(a.u).max()


def test_schedule_must_increase(rng):
    with pytest.raises(ValueError):
        optimize(lq_problem(Grid.square(4), rng), [10.0, 1.0])


def test_history_records_every_c(rng):
    prob = contact_control_problem(Grid.square(8), rng)
    point = optimize(prob, [1.0, 10.0, 100.0])
    assert [h["c"] for h in point.history] == [1.0, 10.0, 100.0]
    assert len(point.path_measures) == 3 and point.c == 100.0


def test_gamma_steps_shrink_along_path():
    prob = contact_control_problem(Grid.square(32), np.random.default_rng(0))
    point = optimize(prob)
    steps = [gamma_distance(a, b) for a, b in zip(point.path_measures, point.path_measures[1:])]
    assert steps[-1] <= 1e-2 * max(steps)


# --- audits ---

def test_lq_point_passes_audits_at_1e8(rng):
    grid = Grid.square(12)
    prob = lq_problem(grid, rng, bound=0.5)
    point = optimize(prob, [1.0])
    res = solve_obstacle(prob.obstacle, embed_l2(grid, point.u))
    audit = audit_stationarity(point, res, prob, tol=1e-8)
    assert all(item.passed for item in audit["items"])
    assert not audit["recovered"].measure.mass.any()


def test_c4_value_g1():
    prob, res, point = g1_point(1.0, -1.0)
    audit = audit_stationarity(point, res, prob)
    assert audit["c4_value"] == -0.5
    assert not audit["items"][3].passed


def test_audit_needs_matching_anchor():
    prob, res, point = g1_point(0.0, 0.0)
    point.u = point.u + 1.0
    with pytest.raises(AnchorMismatch):
        audit_stationarity(point, res, prob)


def test_audit_report_lines():
    prob, res, point = g1_point(0.0, 0.0)
    text = audit_report(audit_stationarity(point, res, prob))
    lines = text.splitlines()
    assert lines[0].split("\t") == ["criterion", "max_violation", "status", "worst_node"]
    assert [line.split("\t")[0] for line in lines[1:]] == list(AUDIT_ITEMS)


def test_recover_zero_nu():
    prob, res, point = g1_point(0.0, 0.0)
    rec = recover_measure(point, res)
    assert rec.ok and rec.measure.mass[0] == np.inf


def test_recover_division_g1():
    # Node neither inactive nor strictly active: the biactive instance.
    prob, res, point = g1_point(0.5, 0.25)
    assert res.biactive[0]
    rec = recover_measure(point, res)
    assert rec.ok and rec.measure.mass[0] == 0.5


def test_recover_discards_nu_on_eliminated_node(caplog):
    prob, res, point = g1_point(0.0, 0.3)
    with caplog.at_level(logging.WARNING, logger="capax.control"):
        rec = recover_measure(point, res)
    assert rec.measure.mass[0] == np.inf and rec.discarded == [0]
    assert "discarded" in caplog.text


def test_tol_p():
    _, _, point = g1_point(-3.0, 0.0)
    assert tol_p(point) == pytest.approx(4e-8)


@settings(max_examples=10)
@given(st.integers(0, 2**32 - 1))
def test_corruptions_fail_their_audit_item(seed):
    table = isolation_table(Grid.square(12), np.random.default_rng(seed))
    assert all(table[None].values())
    for target in AUDIT_ITEMS:
        assert not table[target][target]
    assert isolation_failures(table) == 0


@settings(max_examples=15)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.floats(1e-8, 1.0))
def test_m_implies_c2_to_c4(seed, k, size):
    r = np.random.default_rng(seed)
    prob, res, point = exact_stationary_point(Grid.square(10), r)
    nodes = r.choice(point.p.size, k, replace=False)
    P, N = np.abs(point.p).max(), np.abs(point.nu).max()
    point.p[nodes] += size * P * r.standard_normal(k)
    point.nu[r.choice(point.p.size, k, replace=False)] += size * N * r.standard_normal(k)
    items = {i.name: i.passed for i in audit_stationarity(point, res, prob)["items"]}
    if items["M"]:
        assert items["C2"] and items["C3"] and items["C4"]
    for strong in ("M", "nu=p*mu"):
        if items[strong]:
            assert all(items[i] for i in IMPLIED if strong in IMPLIED[i])
