"""Uniform tensor grids, the 3/5-point Laplacian and Dirichlet-restricted solves.

Nodal vectors are plain 1-D float arrays over the interior nodes of a grid.
Two flavours share that representation:

* *values* (primal, an H^1_0 element): ``y``, ``v``, ``w``, ``p``, ``psi``;
* *loads* (dual, already volume-integrated): ``u``, ``h``, ``f``, ``xi``.

The pairing of loads with values is the plain dot product.  Node sets are
boolean masks over the interior nodes.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "Grid",
    "SolverError",
    "apply_neg_laplacian",
    "embed_l2",
    "pairing",
    "h1_norm",
    "l2_norm",
    "hminus1_norm",
    "solve_poisson",
    "solve_spd",
]

CG_RTOL = 1e-12


class SolverError(RuntimeError):
    """Raised when an iterative linear solve misses its residual tolerance."""


@dataclass(frozen=True)
class Grid:
    """Uniform grid on ``[0, extent[0]] x ... `` with ``nodes`` interior nodes per axis.

    Interior nodes are numbered in C order, the first axis varying slowest.
    """

    extent: tuple[float, ...]
    nodes: tuple[int, ...]

    def __post_init__(self):
        extent = tuple(float(e) for e in np.atleast_1d(self.extent))
        nodes = tuple(int(n) for n in np.atleast_1d(self.nodes))
        if len(extent) != len(nodes) or len(nodes) not in (1, 2):
            raise ValueError("grid must be 1D or 2D with one extent per axis")
        if any(e <= 0 for e in extent) or any(n <= 0 for n in nodes):
            raise ValueError("extents and node counts must be positive")
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def square(cls, n: int, extent: float = 1.0) -> "Grid":
        return cls((extent, extent), (n, n))

    @classmethod
    def interval(cls, n: int, extent: float = 1.0) -> "Grid":
        return cls((extent,), (n,))

    @property
    def dim(self) -> int:
        return len(self.nodes)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(e / (n + 1) for e, n in zip(self.extent, self.nodes))

    @property
    def volume(self) -> float:
        """Lumped quadrature weight h^d of a single node."""
        return float(np.prod(self.spacing))

    @property
    def size(self) -> int:
        return int(np.prod(self.nodes))

    @functools.cached_property
    def coordinates(self) -> np.ndarray:
        """Node coordinates, shape ``(size, dim)``."""
        axes = [h * np.arange(1, n + 1) for h, n in zip(self.spacing, self.nodes)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])

    @functools.cached_property
    def laplacian(self) -> sp.csr_matrix:
        """The SPD matrix of -Delta (stencil scaled by 1/h^2), CSR."""
        ops = []
        for h, n in zip(self.spacing, self.nodes):
            ops.append(sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)],
                                [-1, 0, 1]) / h**2)
        if self.dim == 1:
            mat = ops[0]
        else:
            nx, ny = self.nodes
            mat = sp.kron(ops[0], sp.identity(ny)) + sp.kron(sp.identity(nx), ops[1])
        mat = sp.csr_matrix(mat)
        mat.sort_indices()
        return mat

    @functools.cached_property
    def colors(self) -> np.ndarray:
        """Red-black colouring (0/1) of the nodes; the stencil couples only unlike colours."""
        idx = np.indices(self.nodes).reshape(self.dim, -1)
        return idx.sum(axis=0) % 2

    @functools.cached_property
    def boundary_ring(self) -> np.ndarray:
        """Mask of nodes whose stencil reaches the boundary of the domain."""
        idx = np.indices(self.nodes).reshape(self.dim, -1)
        ring = np.zeros(self.size, dtype=bool)
        for axis, n in enumerate(self.nodes):
            ring |= (idx[axis] == 0) | (idx[axis] == n - 1)
        return ring

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)

    def full(self, value: float = 1.0) -> np.ndarray:
        return np.full(self.size, float(value))

    def all_nodes(self) -> np.ndarray:
        return np.ones(self.size, dtype=bool)

    def no_nodes(self) -> np.ndarray:
        return np.zeros(self.size, dtype=bool)

    def neighbours(self, mask) -> np.ndarray:
        """Nodes coupled by the stencil to at least one node of ``mask`` (excluding ``mask``)."""
        mask = np.asarray(mask, dtype=bool)
        touched = (abs(self.laplacian) @ mask.astype(float)) > 0
        return touched & ~mask

    def describe(self) -> str:
        """Plain-text description, the inverse of :meth:`parse`."""
        return "\n".join([
            f"dim = {self.dim}",
            "extent = " + " ".join(repr(e) for e in self.extent),
            "nodes = " + " ".join(str(n) for n in self.nodes),
        ]) + "\n"

    @classmethod
    def parse(cls, text: str) -> "Grid":
        fields = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            fields[key.strip()] = value.split()
        grid = cls(tuple(float(e) for e in fields["extent"]),
                   tuple(int(n) for n in fields["nodes"]))
        if "dim" in fields and int(fields["dim"][0]) != grid.dim:
            raise ValueError("dim does not match the number of axes")
        return grid


def apply_neg_laplacian(grid: Grid, v) -> np.ndarray:
    """Loads ``A v`` of the discrete -Delta applied to nodal values ``v``."""
    return grid.laplacian @ np.asarray(v, dtype=float)


def embed_l2(grid: Grid, f) -> np.ndarray:
    """Lumped embedding of nodal L^2 values into loads, ``h^d * f``."""
    return grid.volume * np.broadcast_to(np.asarray(f, dtype=float), (grid.size,)).copy()


def pairing(f, v) -> float:
    return float(np.dot(f, v))


def h1_norm(grid: Grid, v) -> float:
    v = np.asarray(v, dtype=float)
    return float(np.sqrt(max(pairing(grid.laplacian @ v, v), 0.0)))


def l2_norm(grid: Grid, v) -> float:
    v = np.asarray(v, dtype=float)
    return float(np.sqrt(grid.volume * np.dot(v, v)))


def hminus1_norm(grid: Grid, f, backend: str = "direct") -> float:
    f = np.asarray(f, dtype=float)
    return float(np.sqrt(max(pairing(f, solve_poisson(grid, f, backend=backend)), 0.0)))


def _pcg(mat, rhs, rtol=CG_RTOL, maxiter=None):
    """Jacobi-preconditioned CG on an SPD matrix."""
    n = rhs.size
    maxiter = 10 * n if maxiter is None else maxiter
    dinv = 1.0 / mat.diagonal()
    x = np.zeros(n)
    r = rhs.copy()
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return x
    z = dinv * r
    p = z.copy()
    rz = r @ z
    for _ in range(maxiter):
        q = mat @ p
        step = rz / (p @ q)
        x += step * p
        r -= step * q
        if np.linalg.norm(r) <= rtol * bnorm:
            return x
        z = dinv * r
        rz, rz_old = r @ z, rz
        p = z + (rz / rz_old) * p
    raise SolverError(f"CG stopped at relative residual {np.linalg.norm(r) / bnorm:.3e}")


def solve_spd(mat, rhs, backend: str = "direct") -> np.ndarray:
    """Solve an SPD sparse system with a sparse direct factorization or with PCG."""
    rhs = np.asarray(rhs, dtype=float)
    if rhs.size == 0:
        return rhs.copy()
    if backend == "direct":
        return np.atleast_1d(spla.spsolve(sp.csc_matrix(mat), rhs))
    if backend == "cg":
        return _pcg(sp.csr_matrix(mat), rhs)
    raise ValueError(f"unknown backend {backend!r}")


def solve_restricted(grid: Grid, f, keep=None, shift=None, backend: str = "direct") -> np.ndarray:
    """Solve ``(A + diag(shift)) y = f`` on ``keep`` with ``y = 0`` off ``keep``.

    Excluded rows and columns are eliminated, not penalised.
    """
    f = np.asarray(f, dtype=float)
    keep = grid.all_nodes() if keep is None else np.asarray(keep, dtype=bool)
    y = np.zeros(grid.size)
    if not keep.any():
        return y
    mat = grid.laplacian
    if shift is not None:
        mat = mat + sp.diags(np.where(keep, shift, 0.0))
    sub = sp.csr_matrix(mat)[keep][:, keep]
    y[keep] = solve_spd(sub, f[keep], backend=backend)
    return y


def solve_poisson(grid: Grid, f, omega_hat=None, backend: str = "direct") -> np.ndarray:
    """The solution operator of -Delta on the node set ``omega_hat`` (all nodes by default)."""
    return solve_restricted(grid, f, keep=omega_hat, backend=backend)
