"""State and adjoint solves for the parametric diffusion problem.

For a parameter vector ``y`` the discrete state solves ``A(y) u = M z`` and
the adjoint solves ``A(y) q = M (u - u0)`` with the same stiffness matrix.
``A`` acts on interior unknowns; ``M`` maps vertex values of the data to
interior load vectors, and solutions vanish on the boundary.
The length of ``y`` is the truncation dimension: missing trailing entries
are zero.
"""

from __future__ import annotations

import numpy as np

from .fem import (
    GridFunction,
    Mesh,
    SPDFactor,
    assemble_load,
    assemble_mass,
    assembler,
    default_method,
    pcg,
)
from .field import CoefficientModel, psi_matrix


class ParametricSolveContext:
    """Everything about a mesh and coefficient model that is shared by solves.

    Parameters
    ----------
    mesh : Mesh
    model : CoefficientModel
        Its truncation dimension is the largest admissible length of ``y``.
    method : {"auto", "banded", "splu", "cg"}
        Linear solver.  ``"auto"`` picks a direct factorization by size.
    tol : float
        Relative residual for the CG path.
    """

    def __init__(self, mesh: Mesh, model: CoefficientModel, method: str = "auto", tol: float = 1e-10):
        self.mesh = mesh
        self.model = model
        self.method = default_method(mesh) if method == "auto" else method
        self.tol = tol
        self.assembler = assembler(mesh.level)
        self.mass = assemble_mass(mesh)
        self.load = assemble_load(mesh)
        # fluctuations at triangle centroids, one column per parameter
        self.psi = psi_matrix(model.freqs, mesh.centroids, model.s)
        self.assembly_count = 0

    @property
    def mass_interior(self):
        """Mass matrix restricted to the interior unknowns."""
        return assemble_mass(self.mesh, full=False)

    @property
    def s(self) -> int:
        return self.model.s

    def _parameters(self, Y) -> np.ndarray:
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        if Y.shape[1] > self.s:
            raise ValueError(f"parameter dimension {Y.shape[1]} exceeds model dimension {self.s}")
        if Y.size and np.max(np.abs(Y)) > 0.5 + 1e-14:
            raise ValueError("parameter vector leaves the cube [-1/2, 1/2]^s")
        return Y

    def triangle_coefficients(self, Y) -> np.ndarray:
        """Coefficient at every centroid, shape ``(ntri, len(Y))``."""
        Y = self._parameters(Y)
        s = Y.shape[1]
        c = self.model.mean + self.psi[:, :s] @ Y.T
        if np.any(~(c > 0)):
            raise ValueError("diffusion coefficient is not positive on the mesh")
        return c

    def stiffness(self, y):
        """Assembled sparse stiffness matrix ``A(y)``."""
        c = self.triangle_coefficients(y)[:, 0]
        self.assembly_count += 1
        return self.assembler.csr(c)

    def factorize_many(self, Y) -> list[SPDFactor]:
        """One assembly and factorization per row of ``Y``."""
        C = self.triangle_coefficients(Y)
        self.assembly_count += C.shape[1]
        if self.method == "banded":
            bands = self.assembler.band(C)
            return [SPDFactor(band=b) for b in bands]
        out = []
        for i in range(C.shape[1]):
            f = SPDFactor(matrix=self.assembler.csr(C[:, i]), method=self.method)
            f.tol = self.tol
            out.append(f)
        return out

    def factorize(self, y) -> SPDFactor:
        return self.factorize_many(np.atleast_2d(y))[0]

    # -- single-parameter solves -------------------------------------------

    def _check(self, f: GridFunction):
        if f.mesh.level != self.mesh.level:
            raise ValueError(f"grid function on level {f.mesh.level}, context on {self.mesh.level}")

    def solve_state(self, y, z: GridFunction) -> GridFunction:
        """``u(y, z)``: solution of ``A(y) u = M z``."""
        self._check(z)
        return GridFunction.from_interior(self.mesh, self.factorize(y).solve(self.load @ z.values))

    def solve_adjoint(self, y, u_state: GridFunction, u0: GridFunction) -> GridFunction:
        """``q(y)``: solution of ``A(y) q = M (u_state - u0)``."""
        self._check(u_state)
        self._check(u0)
        rhs = self.load @ (u_state.values - u0.values)
        return GridFunction.from_interior(self.mesh, self.factorize(y).solve(rhs))

    def state_and_adjoint(self, y, z: GridFunction, u0: GridFunction):
        """Both solves sharing one assembled stiffness matrix."""
        self._check(z)
        self._check(u0)
        F = self.factorize(y)
        u = GridFunction.from_interior(self.mesh, F.solve(self.load @ z.values))
        q = F.solve(self.load @ (u.values - u0.values))
        return u, GridFunction.from_interior(self.mesh, q)

    def residual(self, y, v: np.ndarray, rhs: np.ndarray) -> float:
        """Relative residual ``||A(y) v - rhs|| / ||rhs||`` on interior vectors."""
        A = self.assembler.csr(self.triangle_coefficients(y)[:, 0])
        bn = np.linalg.norm(rhs)
        return float(np.linalg.norm(A @ v - rhs) / bn) if bn else float(np.linalg.norm(A @ v))

    # -- ensembles -----------------------------------------------------------

    def mean_fields(self, Y, z: GridFunction, u0: GridFunction, batch: int = 256):
        """Equal-weight averages of state and adjoint over the rows of ``Y``.

        Rows are processed in order and summed sequentially, so the result is
        bit-reproducible.
        """
        self._check(z)
        self._check(u0)
        Y = self._parameters(Y)
        rhs = self.load @ z.values
        # u0 enters the adjoint load through its interior and boundary parts
        rhs0 = self.load @ u0.values
        L_ii = self.mass_interior
        su = np.zeros(self.mesh.n_dofs)
        sq = np.zeros(self.mesh.n_dofs)
        for start in range(0, len(Y), batch):
            for F in self.factorize_many(Y[start : start + batch]):
                u = F.solve(rhs)
                q = F.solve(L_ii @ u - rhs0)
                su += u
                sq += q
        n = len(Y)
        return (GridFunction.from_interior(self.mesh, su / n),
                GridFunction.from_interior(self.mesh, sq / n))


def solve_state_cg(ctx: ParametricSolveContext, y, z: GridFunction, tol: float = 1e-10) -> GridFunction:
    """State solve through the reference PCG path regardless of ``ctx.method``."""
    A = ctx.stiffness(y)
    return GridFunction.from_interior(ctx.mesh, pcg(A, ctx.load @ z.values, tol)[0])
