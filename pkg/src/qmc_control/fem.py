"""P1 finite elements on uniform triangulations of the unit square.

Level ``k`` has mesh width ``h = 2**-k``; every grid cell is split along its
bottom-left to top-right diagonal.  Vertices are numbered row-major with
``x1`` running fastest.  Grid functions hold values at every vertex, so
data such as controls and targets keep their boundary values; the unknowns
of a Dirichlet solve are the interior vertices only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

MAX_LEVEL = 11
# above this many unknowns the banded Cholesky loses to sparse LU
_BANDED_MAX_DOFS = 4096


class SolverError(RuntimeError):
    """A linear solve failed to meet its residual contract."""


@dataclass(frozen=True, eq=False)
class Mesh:
    level: int

    @property
    def cells(self) -> int:
        return 2 ** self.level

    @property
    def h(self) -> float:
        return 1.0 / self.cells

    @property
    def n_vertices(self) -> int:
        return (self.cells + 1) ** 2

    @property
    def n_dofs(self) -> int:
        return (self.cells - 1) ** 2

    @cached_property
    def vertices(self) -> np.ndarray:
        t = np.linspace(0.0, 1.0, self.cells + 1)
        x1, x2 = np.meshgrid(t, t, indexing="xy")
        return np.column_stack([x1.ravel(), x2.ravel()])

    @cached_property
    def triangles(self) -> np.ndarray:
        N = self.cells
        i, j = np.meshgrid(np.arange(N), np.arange(N), indexing="xy")
        v00 = (j * (N + 1) + i).ravel()
        v10 = v00 + 1
        v01 = v00 + N + 1
        v11 = v01 + 1
        lower = np.column_stack([v00, v10, v11])
        upper = np.column_stack([v00, v11, v01])
        # two triangles per cell, interleaved cell by cell
        return np.stack([lower, upper], axis=1).reshape(-1, 3)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def interior_index(self) -> np.ndarray:
        """Degree-of-freedom index per vertex, -1 on the boundary."""
        N = self.cells
        idx = -np.ones((N + 1, N + 1), dtype=np.int64)
        idx[1:N, 1:N] = np.arange(self.n_dofs).reshape(N - 1, N - 1)
        return idx.ravel()

    @cached_property
    def dof_vertices(self) -> np.ndarray:
        return np.flatnonzero(self.interior_index >= 0)

    @property
    def dof_points(self) -> np.ndarray:
        return self.vertices[self.dof_vertices]


@lru_cache(maxsize=None)
def build_mesh(level: int) -> Mesh:
    if not 1 <= level <= MAX_LEVEL:
        raise ValueError(f"mesh level must be in 1..{MAX_LEVEL}, got {level}")
    return Mesh(level)


@dataclass(eq=False)
class GridFunction:
    """P1 function given by its values at all vertices."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_vertices,):
            raise ValueError(
                f"expected {self.mesh.n_vertices} vertex values, got shape {self.values.shape}"
            )

    @classmethod
    def from_interior(cls, mesh: Mesh, values) -> "GridFunction":
        """Embed interior unknowns, with zero boundary values."""
        values = np.asarray(values, dtype=float)
        if values.shape != (mesh.n_dofs,):
            raise ValueError(f"expected {mesh.n_dofs} interior values, got shape {values.shape}")
        out = np.zeros(mesh.n_vertices)
        out[mesh.dof_vertices] = values
        return cls(mesh, out)

    @property
    def interior(self) -> np.ndarray:
        return self.values[self.mesh.dof_vertices]

    def _other(self, other):
        if isinstance(other, GridFunction):
            _same_mesh(self, other)
            return other.values
        return other

    def __add__(self, other):
        return GridFunction(self.mesh, self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return GridFunction(self.mesh, self.values - self._other(other))

    def __rsub__(self, other):
        return GridFunction(self.mesh, self._other(other) - self.values)

    def __mul__(self, c):
        return GridFunction(self.mesh, self.values * c)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return GridFunction(self.mesh, self.values / c)

    def __neg__(self):
        return GridFunction(self.mesh, -self.values)

    def copy(self) -> "GridFunction":
        return GridFunction(self.mesh, self.values.copy())


def zeros(mesh: Mesh) -> GridFunction:
    return GridFunction(mesh, np.zeros(mesh.n_vertices))


def _same_mesh(f: GridFunction, g: GridFunction):
    if f.mesh.level != g.mesh.level:
        raise ValueError(f"mesh mismatch: level {f.mesh.level} vs {g.mesh.level}")


# ---------------------------------------------------------------------------
# element matrices and assembly


def _local_matrices(mesh: Mesh) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit-coefficient local stiffness, local mass and areas per triangle."""
    p = mesh.vertices[mesh.triangles]  # (ntri, 3, 2)
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    area = 0.5 * det
    # gradients of the barycentric coordinates
    inv = np.empty((len(p), 2, 2))
    inv[:, 0, 0] = d2[:, 1] / det
    inv[:, 0, 1] = -d2[:, 0] / det
    inv[:, 1, 0] = -d1[:, 1] / det
    inv[:, 1, 1] = d1[:, 0] / det
    g = np.empty((len(p), 3, 2))
    g[:, 1] = inv[:, 0]
    g[:, 2] = inv[:, 1]
    g[:, 0] = -g[:, 1] - g[:, 2]
    K = area[:, None, None] * np.einsum("tik,tjk->tij", g, g)
    M = area[:, None, None] / 12.0 * (np.ones((3, 3)) + np.eye(3))
    return K, M, area


class StiffnessAssembler:
    """Maps per-triangle coefficient values to stiffness matrix entries.

    The stiffness matrix is linear in the triangle coefficients, so its CSR
    data and its lower band are each one sparse product away from them.
    """

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        K, _, _ = _local_matrices(mesh)
        dof = mesh.interior_index[mesh.triangles]  # (ntri, 3)
        ntri = len(dof)
        rows = np.repeat(dof, 3, axis=1).ravel()
        cols = np.tile(dof, (1, 3)).ravel()
        tri = np.repeat(np.arange(ntri), 9)
        vals = K.ravel()
        keep = (rows >= 0) & (cols >= 0)
        rows, cols, tri, vals = rows[keep], cols[keep], tri[keep], vals[keep]
        n = mesh.n_dofs

        pattern = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        pattern.sum_duplicates()
        pattern.sort_indices()
        self.indptr = pattern.indptr
        self.indices = pattern.indices
        # position of each (row, col) contribution inside the CSR data array
        pos = _csr_positions(pattern, rows, cols)
        self._to_csr = sp.csr_matrix((vals, (pos, tri)), shape=(pattern.nnz, ntri))

        self.bandwidth = mesh.cells
        lower = rows >= cols
        bpos = (rows[lower] - cols[lower]) * n + cols[lower]
        self._to_band = sp.csr_matrix(
            (vals[lower], (bpos, tri[lower])), shape=((self.bandwidth + 1) * n, ntri)
        )

    @property
    def n_triangles(self) -> int:
        return len(self.mesh.triangles)

    def csr(self, tri_coeff: np.ndarray) -> sp.csr_matrix:
        n = self.mesh.n_dofs
        data = self._to_csr @ np.asarray(tri_coeff, dtype=float)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(n, n))

    def band(self, tri_coeff: np.ndarray) -> np.ndarray:
        """Lower band storage ``ab[i - j, j] = A[i, j]``.

        ``tri_coeff`` may carry a trailing batch axis, giving ``(B, bw+1, n)``.
        """
        n = self.mesh.n_dofs
        c = np.asarray(tri_coeff, dtype=float)
        flat = self._to_band @ c
        if c.ndim == 1:
            return flat.reshape(self.bandwidth + 1, n)
        return flat.T.reshape(c.shape[1], self.bandwidth + 1, n)


def _csr_positions(pattern: sp.csr_matrix, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    n = pattern.shape[1]
    keys = pattern.indices.astype(np.int64) + n * np.repeat(
        np.arange(pattern.shape[0], dtype=np.int64), np.diff(pattern.indptr)
    )
    return np.searchsorted(keys, cols.astype(np.int64) + n * rows.astype(np.int64))


@lru_cache(maxsize=None)
def assembler(level: int) -> StiffnessAssembler:
    return StiffnessAssembler(build_mesh(level))


def _triangle_coefficients(mesh: Mesh, coeff) -> np.ndarray:
    if callable(coeff):
        c = mesh.centroids
        vals = np.broadcast_to(np.asarray(coeff(c[:, 0], c[:, 1]), dtype=float), (len(c),))
    else:
        vals = np.broadcast_to(np.asarray(coeff, dtype=float), (len(mesh.triangles),))
    if np.any(~(vals > 0)):
        raise ValueError("diffusion coefficient must be positive at every centroid")
    return np.array(vals)


def assemble_stiffness(mesh: Mesh, coeff=1.0) -> sp.csr_matrix:
    """Stiffness matrix ``sum_T a(centroid_T) int_T grad phi_i . grad phi_j``.

    ``coeff`` is a callable ``(x1, x2) -> a`` evaluated at triangle
    centroids, a constant, or an array of per-triangle values.
    """
    return assembler(mesh.level).csr(_triangle_coefficients(mesh, coeff))


@lru_cache(maxsize=None)
def _mass(level: int, full: bool) -> sp.csr_matrix:
    mesh = build_mesh(level)
    _, M, _ = _local_matrices(mesh)
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    A = sp.csr_matrix((M.ravel(), (rows, cols)), shape=(mesh.n_vertices,) * 2)
    if not full:
        d = mesh.dof_vertices
        A = A[d][:, d]
    A = A.tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def assemble_mass(mesh: Mesh, full: bool = True) -> sp.csr_matrix:
    """Exact P1 mass matrix on all vertices (or the interior unknowns only)."""
    return _mass(mesh.level, full)


@lru_cache(maxsize=None)
def _load(level: int) -> sp.csr_matrix:
    mesh = build_mesh(level)
    return _mass(level, True)[mesh.dof_vertices].tocsr()


def assemble_load(mesh: Mesh) -> sp.csr_matrix:
    """Mass matrix rows of the interior unknowns, columns of all vertices.

    ``assemble_load(mesh) @ f.values`` is the load vector ``int f phi_i``.
    """
    return _load(mesh.level)


# ---------------------------------------------------------------------------
# linear solvers


def pcg(A, rhs: np.ndarray, tol: float = 1e-10, max_iter: int | None = None):
    """Jacobi-preconditioned conjugate gradients.

    Stops once ``||A v - rhs|| <= tol * ||rhs||``.  Returns ``(v, iterations)``.
    """
    rhs = np.asarray(rhs, dtype=float)
    n = len(rhs)
    if max_iter is None:
        max_iter = 10 * n + 100
    bnorm = np.linalg.norm(rhs)
    x = np.zeros(n)
    if bnorm == 0.0:
        return x, 0
    dinv = 1.0 / A.diagonal()
    r = rhs.copy()
    zv = dinv * r
    p = zv.copy()
    rz = r @ zv
    target = tol * bnorm
    for it in range(1, max_iter + 1):
        Ap = A @ p
        step = rz / (p @ Ap)
        x += step * p
        r -= step * Ap
        if np.linalg.norm(r) <= target:
            # guard against drift of the recursive residual
            if np.linalg.norm(rhs - A @ x) <= target:
                return x, it
            r = rhs - A @ x
        zv = dinv * r
        rz_new = r @ zv
        p = zv + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(
        f"CG did not reach relative residual {tol:g} in {max_iter} iterations "
        f"(residual {np.linalg.norm(rhs - A @ x) / bnorm:.3e})"
    )


def solve_spd(A, rhs, tol: float = 1e-10, max_iter: int | None = None) -> np.ndarray:
    """Solve ``A v = rhs`` for symmetric positive definite ``A`` with PCG."""
    return pcg(sp.csr_matrix(A), rhs, tol, max_iter)[0]


class SPDFactor:
    """A factorized SPD matrix that solves repeatedly.

    Small systems use banded Cholesky on the natural ordering (the band is
    one grid row wide); larger ones use SuperLU with a symmetric ordering.
    """

    def __init__(self, band: np.ndarray | None = None, matrix=None, method: str = "banded"):
        self.method = method
        if method == "banded":
            try:
                self._chol = sla.cholesky_banded(band, lower=True, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise SolverError(f"stiffness matrix is not positive definite: {exc}") from exc
        elif method == "splu":
            self._lu = spla.splu(
                sp.csc_matrix(matrix),
                permc_spec="MMD_AT_PLUS_A",
                options=dict(SymmetricMode=True),
            )
        elif method == "cg":
            self._A = sp.csr_matrix(matrix)
        else:
            raise ValueError(f"unknown solver method {method!r}")
        self.tol = 1e-10

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.method == "banded":
            return sla.cho_solve_banded((self._chol, True), rhs, check_finite=False)
        if self.method == "splu":
            return self._lu.solve(np.asarray(rhs, dtype=float))
        return pcg(self._A, rhs, self.tol)[0]


def default_method(mesh: Mesh) -> str:
    return "banded" if mesh.n_dofs <= _BANDED_MAX_DOFS else "splu"


# ---------------------------------------------------------------------------
# norms, transfer, interpolation


def l2_inner(f: GridFunction, g: GridFunction) -> float:
    _same_mesh(f, g)
    return float(f.values @ (assemble_mass(f.mesh) @ g.values))


def l2_norm(f: GridFunction) -> float:
    return float(np.sqrt(max(l2_inner(f, f), 0.0)))


def h1_seminorm(f: GridFunction) -> float:
    K, _, _ = _local_matrices(f.mesh)
    v = f.values[f.mesh.triangles]
    return float(np.sqrt(max(np.einsum("ti,tij,tj->", v, K, v), 0.0)))


def _refine_full(full: np.ndarray, cells: int) -> np.ndarray:
    c = full.reshape(cells + 1, cells + 1)  # [x2 index, x1 index]
    F = np.empty((2 * cells + 1, 2 * cells + 1))
    F[::2, ::2] = c
    F[::2, 1::2] = 0.5 * (c[:, :-1] + c[:, 1:])
    F[1::2, ::2] = 0.5 * (c[:-1, :] + c[1:, :])
    # new vertices in cell centres sit on the split diagonal
    F[1::2, 1::2] = 0.5 * (c[:-1, :-1] + c[1:, 1:])
    return F.ravel()


def prolongate(f: GridFunction, level: int) -> GridFunction:
    """Exact interpolation of a P1 function onto the finer nested mesh."""
    if level < f.mesh.level:
        raise ValueError(f"cannot prolongate from level {f.mesh.level} down to {level}")
    full = f.values
    for k in range(f.mesh.level, level):
        full = _refine_full(full, 2 ** k)
    return GridFunction(build_mesh(level), full.copy())


def nodal_interpolant(expr, mesh: Mesh) -> GridFunction:
    """Sample ``expr(x1, x2)`` at every vertex."""
    p = mesh.vertices
    vals = np.broadcast_to(np.asarray(expr(p[:, 0], p[:, 1]), dtype=float), (len(p),))
    return GridFunction(mesh, np.array(vals))


def export_grid_function(f: GridFunction, path) -> None:
    """CSV rows ``x1, x2, value`` over all vertices."""
    full = f.values
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "value"])
        for (x1, x2), v in zip(f.mesh.vertices, full):
            w.writerow([repr(float(x1)), repr(float(x2)), repr(float(v))])


# 7-point degree-5 rule on the reference triangle (barycentric, weights sum to 1)
_A1, _B1 = 0.059715871789770, 0.470142064105115
_A2, _B2 = 0.797426985353087, 0.101286507323456
_Q7_BARY = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [_A1, _B1, _B1],
        [_B1, _A1, _B1],
        [_B1, _B1, _A1],
        [_A2, _B2, _B2],
        [_B2, _A2, _B2],
        [_B2, _B2, _A2],
    ]
)
_Q7_W = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)


def l2_error(f: GridFunction, exact) -> float:
    """``||f - exact||_{L2}`` with a degree-5 rule on every triangle."""
    mesh = f.mesh
    tri = mesh.triangles
    p = mesh.vertices[tri]  # (ntri, 3, 2)
    _, _, area = _local_matrices(mesh)
    fv = f.values[tri]  # (ntri, 3)
    qp = np.einsum("qa,tac->tqc", _Q7_BARY, p)
    fq = fv @ _Q7_BARY.T  # (ntri, nq)
    ev = np.asarray(exact(qp[..., 0], qp[..., 1]), dtype=float)
    err2 = np.sum(area[:, None] * _Q7_W[None, :] * (fq - ev) ** 2)
    return float(np.sqrt(err2))
