import numpy as np
import pytest
from hypothesis import given, strategies as st

from capax.mesh import (Grid, apply_neg_laplacian, embed_l2, h1_norm, hminus1_norm, l2_norm,
                        pairing, solve_poisson, solve_restricted, solve_spd)

G1 = Grid.interval(1)
G3 = Grid.interval(3)


def dense_laplacian(grid):
    """Independent assembly of the stencil from node coordinates."""
    n = grid.size
    A = np.zeros((n, n))
    xy = grid.coordinates
    for i in range(n):
        for k, h in enumerate(grid.spacing):
            A[i, i] += 2 / h**2
            for j in range(n):
                d = xy[j] - xy[i]
                if np.isclose(abs(d[k]), h) and np.allclose(np.delete(d, k), 0):
                    A[i, j] -= 1 / h**2
    return A


def test_g1_spacing_and_volume():
    assert G1.spacing == (0.5,)
    assert G1.volume == 0.5
    assert G3.spacing == (0.25,)


@pytest.mark.parametrize("grid, v, loads", [
    (G1, [0.0625], [0.5]),
    (G3, [1.0, 1.0, 1.0], [16.0, 0.0, 16.0]),
])
def test_apply_neg_laplacian_examples(grid, v, loads):
    np.testing.assert_allclose(apply_neg_laplacian(grid, v), loads, rtol=0, atol=1e-14)


def test_apply_neg_laplacian_of_zero():
    grid = Grid.square(5)
    assert not apply_neg_laplacian(grid, grid.zeros()).any()


@pytest.mark.parametrize("grid", [G3, Grid.square(4), Grid((1.0, 2.0), (3, 5))])
def test_stencil_matches_dense_assembly(grid):
    np.testing.assert_allclose(grid.laplacian.toarray(), dense_laplacian(grid), atol=1e-9)


@pytest.mark.parametrize("grid, loads", [(G1, [0.5]), (G3, [0.25, 0.25, 0.25])])
def test_embed_l2_of_one(grid, loads):
    np.testing.assert_allclose(embed_l2(grid, 1.0), loads)


def test_embed_l2_of_zero():
    assert not embed_l2(G3, 0.0).any()


def test_norms_g1():
    assert h1_norm(G1, [0.0625]) ** 2 == pytest.approx(0.03125, rel=1e-14)
    assert hminus1_norm(G1, [0.5]) ** 2 == pytest.approx(0.03125, rel=1e-14)


def test_norms_of_zero():
    grid = Grid.square(4)
    assert h1_norm(grid, grid.zeros()) == 0
    assert l2_norm(grid, grid.zeros()) == 0
    assert hminus1_norm(grid, grid.zeros()) == 0


def test_solve_poisson_examples():
    np.testing.assert_allclose(solve_poisson(G1, [0.5], G1.all_nodes()), [0.0625])
    np.testing.assert_allclose(solve_poisson(G3, embed_l2(G3, 1.0), G3.all_nodes()),
                               [3 / 128, 1 / 32, 3 / 128], rtol=1e-14)


def test_solve_poisson_on_empty_set(rng):
    grid = Grid.square(4)
    assert not solve_poisson(grid, rng.standard_normal(grid.size), grid.no_nodes()).any()


def test_restricted_solve_matches_dense_elimination(rng):
    grid = Grid.square(6)
    keep = rng.random(grid.size) < 0.6
    shift = rng.uniform(0, 50, grid.size)
    f = rng.standard_normal(grid.size)
    A = dense_laplacian(grid) + np.diag(shift)
    expected = np.zeros(grid.size)
    expected[keep] = np.linalg.solve(A[np.ix_(keep, keep)], f[keep])
    np.testing.assert_allclose(solve_restricted(grid, f, keep, shift), expected, rtol=1e-10,
                               atol=1e-14)


def test_cg_backend_agrees_with_direct(rng):
    grid = Grid.square(20)
    f = rng.standard_normal(grid.size)
    a = solve_spd(grid.laplacian, f, "direct")
    b = solve_spd(grid.laplacian, f, "cg")
    assert np.abs(a - b).max() <= 1e-10 * np.abs(a).max()


def test_describe_parse_roundtrip():
    grid = Grid((1.0, 2.5), (7, 3))
    assert Grid.parse(grid.describe()) == grid


def test_neighbours_excludes_mask():
    grid = Grid.square(5)
    mask = grid.no_nodes()
    mask[12] = True
    nb = grid.neighbours(mask)
    assert nb.sum() == 4 and not nb[12]


def test_bad_grid_rejected():
    with pytest.raises(ValueError):
        Grid((1.0,), (0,))
    with pytest.raises(ValueError):
        Grid((1.0, 1.0), (3,))


sizes = st.sampled_from([Grid.interval(5), Grid.square(4), Grid((2.0, 1.0), (5, 3))])


@given(sizes, st.integers(0, 2**32 - 1))
def test_symmetry(grid, seed):
    r = np.random.default_rng(seed)
    v, w = r.standard_normal(grid.size), r.standard_normal(grid.size)
    lhs = pairing(apply_neg_laplacian(grid, v), w)
    rhs = pairing(apply_neg_laplacian(grid, w), v)
    assert abs(lhs - rhs) <= 1e-12 * np.linalg.norm(v) * np.linalg.norm(w) * \
        abs(grid.laplacian).max()


@given(sizes, st.integers(0, 2**32 - 1))
def test_nested_sets_order_solutions(grid, seed):
    r = np.random.default_rng(seed)
    small = r.random(grid.size) < 0.4
    big = small | (r.random(grid.size) < 0.4)
    f = embed_l2(grid, 1.0)
    assert np.all(solve_poisson(grid, f, small) <= solve_poisson(grid, f, big) + 1e-12)


@given(sizes, st.integers(0, 2**32 - 1))
def test_solve_then_apply(grid, seed):
    f = np.random.default_rng(seed).standard_normal(grid.size)
    back = apply_neg_laplacian(grid, solve_poisson(grid, f))
    assert np.abs(back - f).max() <= 1e-10 * np.abs(f).max()
