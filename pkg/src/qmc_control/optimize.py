"""Discretized optimal control problem and (projected) gradient descent.

The objective is the lattice-rule approximation

    J(z) = 1/(2n) sum_i ||u(y_i, z) - u0||^2 + alpha/2 ||z||^2

with gradient ``(1/n) sum_i q(y_i, z) + alpha z``; all norms are L2 norms of
P1 functions computed with the mass matrix.
"""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .fem import GridFunction, l2_norm, nodal_interpolant
from .lattice import GeneratingVector, lattice_points
from .pde import ParametricSolveContext

# factorizations are kept across iterations while they fit in this budget
FACTOR_CACHE_BYTES = 1 << 30


class BacktrackError(RuntimeError):
    """The Armijo search ran out of backtracking steps."""


@dataclass(frozen=True)
class Bounds:
    lower: GridFunction
    upper: GridFunction

    def __post_init__(self):
        if self.lower.mesh.level != self.upper.mesh.level:
            raise ValueError("bounds live on different meshes")
        if np.any(self.lower.values > self.upper.values):
            raise ValueError("lower bound exceeds upper bound somewhere")


def project(z: GridFunction, bounds: Bounds | None) -> GridFunction:
    """Nodal clamp ``max(lower, min(z, upper))``."""
    if bounds is None:
        return z.copy()
    return GridFunction(z.mesh, np.maximum(bounds.lower.values, np.minimum(z.values, bounds.upper.values)))


def _in_squares(x1, x2, squares):
    inside = np.zeros(np.shape(x1), dtype=bool)
    for (a, b), (c, d) in squares:
        inside |= (x1 >= a) & (x1 <= b) & (x2 >= c) & (x2 <= d)
    return inside


_E, _F = (1 / 8, 3 / 8), (5 / 8, 7 / 8)


def quadrant_bounds(mesh) -> Bounds:
    """Box constraints pinning the control to sign in four sub-squares.

    The lower bound is 0 on the two upper squares and -1 elsewhere; the upper
    bound is 0 on the two lower squares and 1 elsewhere.
    """
    lower = nodal_interpolant(
        lambda x1, x2: np.where(_in_squares(x1, x2, [(_E, _F), (_F, _F)]), 0.0, -1.0), mesh
    )
    upper = nodal_interpolant(
        lambda x1, x2: np.where(_in_squares(x1, x2, [(_E, _E), (_F, _E)]), 0.0, 1.0), mesh
    )
    return Bounds(lower, upper)


class Evaluation(NamedTuple):
    objective: float
    misfit: float
    states: np.ndarray  # (n, interior unknowns)


class ControlProblem:
    """``J_{s,h,n}`` for one shifted lattice rule.

    Parameters
    ----------
    ctx : ParametricSolveContext
    u0 : GridFunction
        Target state.
    alpha : float
        Regularization weight, > 0.
    rule : GeneratingVector
        Its dimension must not exceed ``ctx.s``.
    shift : array_like, optional
        Random shift in ``[0, 1)^s``; zero if omitted.
    bounds : Bounds, optional
        Pointwise control bounds; ``None`` for the unconstrained problem.
    """

    def __init__(self, ctx: ParametricSolveContext, u0: GridFunction, alpha: float,
                 rule: GeneratingVector, shift=None, bounds: Bounds | None = None):
        if not alpha > 0:
            raise ValueError("alpha must be positive")
        if rule.s > ctx.s:
            raise ValueError(f"rule dimension {rule.s} exceeds model dimension {ctx.s}")
        self.ctx = ctx
        self.mesh = ctx.mesh
        self.u0 = u0
        self.alpha = float(alpha)
        self.rule = rule
        self.shift = np.zeros(rule.s) if shift is None else np.asarray(shift, dtype=float)
        self.bounds = bounds
        self.points = lattice_points(rule, self.shift)
        self._factors = None
        self._cache = OrderedDict()  # z bytes -> Evaluation, the two most recent
        self.state_solves = 0
        self.adjoint_solves = 0

    @property
    def n(self) -> int:
        return self.rule.n

    def _factor_list(self):
        if self._factors is not None:
            return self._factors
        factors = self.ctx.factorize_many(self.points)
        est = self.n * (self.mesh.cells + 1) * self.mesh.n_dofs * 8
        if est <= FACTOR_CACHE_BYTES:
            self._factors = factors
        return factors

    def evaluate(self, z: GridFunction) -> Evaluation:
        """Objective, averaged misfit and the states at every node."""
        key = z.values.tobytes()
        if key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key]
        M = self.ctx.mass
        rhs = self.ctx.load @ z.values
        dofs = self.mesh.dof_vertices
        states = np.empty((self.n, self.mesh.n_dofs))
        misfit = 0.0
        for i, F in enumerate(self._factor_list()):
            u = F.solve(rhs)
            states[i] = u
            d = -self.u0.values
            d[dofs] += u
            misfit += d @ (M @ d)
        self.state_solves += self.n
        misfit /= self.n
        obj = 0.5 * misfit + 0.5 * self.alpha * (z.values @ (M @ z.values))
        ev = Evaluation(float(obj), float(misfit), states)
        self._cache[key] = ev
        if len(self._cache) > 2:
            self._cache.popitem(last=False)
        return ev

    def difference(self, z1: GridFunction, z0: GridFunction) -> float:
        """``J(z1) - J(z0)`` without subtracting two rounded objective values.

        Uses ``|a|^2 - |b|^2 = <a - b, a + b>`` term by term, so the result
        stays accurate when the change is far below the size of ``J``.
        """
        S1 = self.evaluate(z1).states
        S0 = self.evaluate(z0).states
        M = self.ctx.mass
        D = S1 - S0  # states differ only at interior vertices
        P = np.tile(-2.0 * self.u0.values, (self.n, 1))
        P[:, self.mesh.dof_vertices] += S1 + S0
        misfit = float(np.sum(D * (self.ctx.load @ P.T).T)) / self.n
        dz = z1.values - z0.values
        return 0.5 * misfit + 0.5 * self.alpha * float(dz @ (M @ (z1.values + z0.values)))

    def objective(self, z: GridFunction) -> float:
        return self.evaluate(z).objective

    def misfit(self, z: GridFunction) -> float:
        """``(1/n) sum_i ||u_i - u0||^2`` (no factor 1/2)."""
        return self.evaluate(z).misfit

    def gradient(self, z: GridFunction) -> GridFunction:
        ev = self.evaluate(z)
        M_ii = self.ctx.mass_interior
        rhs0 = self.ctx.load @ self.u0.values
        acc = np.zeros(self.mesh.n_dofs)
        for u, F in zip(ev.states, self._factor_list()):
            acc += F.solve(M_ii @ u - rhs0)
        self.adjoint_solves += self.n
        g = self.alpha * z.values
        g[self.mesh.dof_vertices] += acc / self.n
        return GridFunction(self.mesh, g)

    def project(self, z: GridFunction) -> GridFunction:
        return project(z, self.bounds)

    def is_feasible(self, z: GridFunction, atol: float = 0.0) -> bool:
        if self.bounds is None:
            return True
        v = z.values
        return bool(np.all(v >= self.bounds.lower.values - atol) and np.all(v <= self.bounds.upper.values + atol))


@dataclass
class DescentConfig:
    gamma: float = 1e-4
    beta: float = 0.5
    tol: float = 1e-6
    max_iter: int = 1000
    max_backtracks: int = 60

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if self.tol <= 0 or self.max_iter < 0 or self.max_backtracks < 1:
            raise ValueError("invalid stopping parameters")


class Step(NamedTuple):
    eta: float
    trials: int
    z: GridFunction  # accepted iterate
    value: float  # objective at the accepted iterate


def _change(prob, cand, z, J0):
    # prefers the cancellation-free difference when the problem offers one
    Jc = prob.objective(cand)
    diff = getattr(prob, "difference", None)
    return Jc, (diff(cand, z) if diff is not None else Jc - J0)


def armijo(prob, z: GridFunction, g: GridFunction, cfg: DescentConfig) -> Step:
    """Backtracking step along ``-g`` with sufficient decrease.

    Accepts the largest ``eta`` in ``1, beta, beta^2, ...`` with
    ``J(z - eta g) - J(z) <= -eta gamma ||g||^2``.
    """
    J0 = prob.objective(z)
    g2 = l2_norm(g) ** 2
    eta = 1.0
    for trial in range(1, cfg.max_backtracks + 1):
        cand = z - eta * g
        Jc, dJ = _change(prob, cand, z, J0)
        if dJ <= -eta * cfg.gamma * g2:
            return Step(eta, trial, cand, Jc)
        eta *= cfg.beta
    raise BacktrackError(f"no sufficient decrease after {cfg.max_backtracks} backtracking steps")


def projected_armijo(prob, z: GridFunction, g: GridFunction, cfg: DescentConfig) -> Step:
    """Backtracking along the projected path ``P(z - eta g)``.

    Accepts the largest ``eta`` with
    ``J(P(z - eta g)) - J(z) <= -(gamma / eta) ||z - P(z - eta g)||^2``.
    """
    J0 = prob.objective(z)
    eta = 1.0
    for trial in range(1, cfg.max_backtracks + 1):
        cand = prob.project(z - eta * g)
        Jc, dJ = _change(prob, cand, z, J0)
        if dJ <= -(cfg.gamma / eta) * l2_norm(z - cand) ** 2:
            return Step(eta, trial, cand, Jc)
        eta *= cfg.beta
    raise BacktrackError(f"no sufficient decrease after {cfg.max_backtracks} backtracking steps")


@dataclass
class Trace:
    """Per-iteration history of a descent run.

    Row ``k`` describes iterate ``z_k``; ``eta`` and ``armijo_trials`` belong
    to the step that leaves it (NaN / 0 on the final row).
    """

    rows: list[dict] = field(default_factory=list)
    converged: bool = False

    COLUMNS = ("iter", "J", "misfit", "grad_norm_or_stationarity", "eta", "armijo_trials")

    @property
    def iterations(self) -> int:
        return max(len(self.rows) - 1, 0)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r["iter"]] + [repr(float(r[c])) for c in self.COLUMNS[1:5]] + [r["armijo_trials"]])


def _descend(prob, z0: GridFunction, cfg: DescentConfig, projected: bool):
    z = z0.copy()
    trace = Trace()
    search = projected_armijo if projected else armijo
    for it in range(cfg.max_iter + 1):
        g = prob.gradient(z)
        if projected:
            measure = l2_norm(z - prob.project(z - g))
        else:
            measure = l2_norm(g)
        row = dict(iter=it, J=prob.objective(z), misfit=prob.misfit(z),
                   grad_norm_or_stationarity=measure, eta=math.nan, armijo_trials=0)
        trace.rows.append(row)
        if measure <= cfg.tol:
            trace.converged = True
            break
        if it == cfg.max_iter:
            break
        step = search(prob, z, g, cfg)
        row["eta"] = step.eta
        row["armijo_trials"] = step.trials
        z = step.z
    return z, trace


def gradient_descent(prob, z0: GridFunction, cfg: DescentConfig | None = None):
    """Steepest descent with Armijo steps until ``||J'(z)|| <= tol``.

    Returns ``(z, trace)``; ``trace.converged`` is False when ``max_iter``
    was reached first.
    """
    return _descend(prob, z0, cfg or DescentConfig(), projected=False)


def projected_gradient_descent(prob, z0: GridFunction, cfg: DescentConfig | None = None):
    """Projected descent until ``||z - P(z - J'(z))|| <= tol``; iterates stay feasible."""
    if getattr(prob, "bounds", None) is None:
        raise ValueError("projected gradient descent needs control bounds")
    if not prob.is_feasible(z0):
        raise ValueError("starting control is infeasible")
    return _descend(prob, z0, cfg or DescentConfig(), projected=True)
