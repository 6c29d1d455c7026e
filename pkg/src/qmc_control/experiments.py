"""Convergence studies and optimal-control runs.

Each ``run_*`` function takes an :class:`ExperimentConfig` and returns an
:class:`ExperimentReport` whose CSV form starts with ``#`` metadata lines
(config echo, library versions, generating-vector digests, fitted rates)
followed by the data table.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from importlib import metadata as importlib_metadata

import numpy as np
import scipy

from .fem import (
    GridFunction,
    assemble_mass,
    build_mesh,
    export_grid_function,
    l2_norm,
    nodal_interpolant,
    prolongate,
)
from .field import build_model
from .lattice import (
    GeneratingVector,
    cbc_construct,
    lattice_points,
    load_generating_vector,
    random_shifts,
    weights_for_model,
)
from .optimize import (
    ControlProblem,
    DescentConfig,
    gradient_descent,
    quadrant_bounds,
    projected_gradient_descent,
)
from .pde import ParametricSolveContext

log = logging.getLogger(__name__)

KINDS = ("fe_error", "trunc_error", "qmc_error", "optimize", "cbc")
_DEFAULT_M = {"fe_error": 8, "trunc_error": 12, "qmc_error": 12, "optimize": 8, "cbc": 10}


def source_term(x1, x2):
    return x2


def target_state(x1, x2):
    return x1 * x1 - x2 * x2


@dataclass
class ExperimentConfig:
    """Settings for every experiment kind; each kind reads the fields it needs."""

    kind: str = "qmc_error"
    theta: float = 2.0
    s: int = 100
    s_list: tuple[int, ...] = (2, 4, 8, 16, 32, 64, 128)
    s_ref: int = 512
    level: int = 4
    levels: tuple[int, ...] = (2, 3, 4, 5, 6)
    ref_level: int = 7
    fe_mode: str = "single"  # "single" parameter draw or lattice-"averaged"
    m: int | None = None  # log2 of the lattice size; default depends on kind
    m_list: tuple[int, ...] = (7, 8, 9, 10, 11, 12)
    R: int = 8
    seed: int = 2024
    delta: float = 0.05
    alpha: float = 0.1
    bounds: str = "quadrant"  # or "none"
    tol: float = 1e-6
    max_iter: int = 1000
    genvec: str | None = None
    output: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if self.m is None:
            self.m = _DEFAULT_M[self.kind]
        if not 1 <= self.m <= 24:
            raise ValueError("m must lie in [1, 24]")
        for name in ("s_list", "levels", "m_list"):
            val = tuple(int(v) for v in getattr(self, name))
            if not val:
                raise ValueError(f"{name} must not be empty")
            setattr(self, name, val)
        for lev in (self.level, self.ref_level, *self.levels):
            build_mesh(lev)  # validates the range
        if self.fe_mode not in ("single", "averaged"):
            raise ValueError("fe_mode must be 'single' or 'averaged'")
        if self.bounds not in ("quadrant", "none"):
            raise ValueError("bounds must be 'quadrant' or 'none'")
        if self.R < 1:
            raise ValueError("R must be >= 1")

    def echo(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(map(str, v)) if isinstance(v, tuple) else v
        return out


@dataclass
class ExperimentReport:
    kind: str
    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)
    rates: dict[str, float] = field(default_factory=dict)
    metadata: dict[str, object] = field(default_factory=dict)
    elapsed: float = 0.0  # wall time; kept out of the CSV so reruns are bit-identical

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows], dtype=float)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            for key, val in self.metadata.items():
                fh.write(f"# {key}={val}\n")
            for key, val in self.rates.items():
                fh.write(f"# rate_{key}={val!r}\n")
            w = csv.writer(fh)
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])


def fit_rate(abscissa, errors) -> float:
    """Least-squares slope of ``log2(error)`` against ``log2(abscissa)``."""
    x = np.asarray(abscissa, dtype=float)
    e = np.asarray(errors, dtype=float)
    if len(x) < 2 or len(x) != len(e):
        raise ValueError("need at least two (abscissa, error) pairs")
    if np.any(e <= 0) or np.any(x <= 0):
        raise ValueError("errors and abscissae must be positive for a log-log fit")
    return float(np.polyfit(np.log2(x), np.log2(e), 1)[0])


def rms_over_shifts(estimates: list[GridFunction]) -> float:
    """RMS error estimate ``sqrt(sum_r ||Qbar - Q_r||^2 / (R (R - 1)))``."""
    R = len(estimates)
    if R < 2:
        raise ValueError("need at least two shifted estimates")
    mesh = estimates[0].mesh
    if any(e.mesh.level != mesh.level for e in estimates):
        raise ValueError("estimates live on different meshes")
    V = np.array([e.values for e in estimates])  # (R, vertices)
    # centring differences to the first estimate keeps identical inputs exactly at zero
    D = V - V[0]
    D -= D.mean(axis=0)
    M = assemble_mass(mesh)
    ss = float(np.sum(D * (M @ D.T).T))
    return float(np.sqrt(max(ss, 0.0) / (R * (R - 1))))


def _base_metadata(cfg: ExperimentConfig) -> dict:
    try:
        version = importlib_metadata.version("artifact")
    except importlib_metadata.PackageNotFoundError:
        version = "unknown"
    meta = {f"config.{k}": v for k, v in cfg.echo().items()}
    meta.update({"version": version, "numpy": np.__version__, "scipy": scipy.__version__})
    return meta


def _rule(cfg: ExperimentConfig, model, n: int, s: int) -> GeneratingVector:
    if cfg.genvec:
        # a "{m}" placeholder in the path selects one file per lattice size
        path = cfg.genvec.format(m=n.bit_length() - 1)
        gv = load_generating_vector(path)
        if gv.n != n or gv.s < s:
            raise ValueError(f"{path}: n={gv.n}, s={gv.s} does not fit n={n}, s={s}")
        return gv.truncated(s)
    w = weights_for_model(model, delta=cfg.delta, s=s)
    gv = cbc_construct(n, s, w)
    return dataclasses.replace(gv, theta=model.theta)


def _data(mesh):
    return nodal_interpolant(source_term, mesh), nodal_interpolant(target_state, mesh)


def run_fe_error(cfg: ExperimentConfig) -> ExperimentReport:
    """L2 errors of state and adjoint against a finer reference solution."""
    t0 = time.perf_counter()
    if cfg.ref_level <= max(cfg.levels):
        raise ValueError("reference level must exceed every study level")
    model = build_model(cfg.theta, cfg.s)
    meta = _base_metadata(cfg)
    if cfg.fe_mode == "single":
        y = np.random.default_rng(cfg.seed).uniform(-0.5, 0.5, cfg.s)
        meta["genvec_sha256"] = "none"
    else:
        gv = _rule(cfg, model, 2 ** cfg.m, cfg.s)
        y = lattice_points(gv, random_shifts(1, cfg.s, cfg.seed).shifts[0])
        meta["genvec_sha256"] = gv.digest()

    def solve(level):
        mesh = build_mesh(level)
        ctx = ParametricSolveContext(mesh, model)
        z, u0 = _data(mesh)
        if cfg.fe_mode == "single":
            return ctx.state_and_adjoint(y, z, u0)
        return ctx.mean_fields(y, z, u0)

    u_ref, q_ref = solve(cfg.ref_level)
    report = ExperimentReport("fe_error", ("level", "h", "err_state", "err_adjoint"), metadata=meta)
    for level in cfg.levels:
        u, q = solve(level)
        eu = l2_norm(prolongate(u, cfg.ref_level) - u_ref)
        eq = l2_norm(prolongate(q, cfg.ref_level) - q_ref)
        report.rows.append((level, 2.0 ** -level, eu, eq))
        log.info("fe level %d: state %.3e adjoint %.3e", level, eu, eq)
    if len(report.rows) >= 2:
        h = report.column("h")
        report.rates = {"state": fit_rate(h, report.column("err_state")),
                        "adjoint": fit_rate(h, report.column("err_adjoint"))}
    report.elapsed = time.perf_counter() - t0
    return report


def run_trunc_error(cfg: ExperimentConfig) -> ExperimentReport:
    """Error of lattice-averaged fields truncated to ``s`` against ``s_ref``.

    All dimensions share one rule of dimension ``s_ref`` and one shift;
    truncation keeps the leading coordinates of the same points.
    """
    t0 = time.perf_counter()
    if max(cfg.s_list) > cfg.s_ref:
        raise ValueError("reference dimension must be at least every study dimension")
    model = build_model(cfg.theta, cfg.s_ref)
    mesh = build_mesh(cfg.level)
    ctx = ParametricSolveContext(mesh, model)
    z, u0 = _data(mesh)
    gv = _rule(cfg, model, 2 ** cfg.m, cfg.s_ref)
    pts = lattice_points(gv, random_shifts(1, cfg.s_ref, cfg.seed).shifts[0])
    u_ref, q_ref = ctx.mean_fields(pts, z, u0)
    meta = _base_metadata(cfg)
    meta["genvec_sha256"] = gv.digest()
    report = ExperimentReport("trunc_error", ("s", "err_state", "err_adjoint"), metadata=meta)
    for s in cfg.s_list:
        u, q = ctx.mean_fields(pts[:, :s], z, u0)
        eu, eq = l2_norm(u - u_ref), l2_norm(q - q_ref)
        report.rows.append((s, eu, eq))
        log.info("truncation s=%d: state %.3e adjoint %.3e", s, eu, eq)
    rows = [r for r in report.rows if r[1] > 0 and r[2] > 0]
    if len(rows) >= 2:
        s_vals = [r[0] for r in rows]
        report.rates = {"state": fit_rate(s_vals, [r[1] for r in rows]),
                        "adjoint": fit_rate(s_vals, [r[2] for r in rows])}
    report.elapsed = time.perf_counter() - t0
    return report


def run_qmc_error(cfg: ExperimentConfig) -> ExperimentReport:
    """RMS error over ``R`` random shifts of the lattice-rule means."""
    t0 = time.perf_counter()
    if cfg.R < 2:
        raise ValueError("the RMS estimate needs R >= 2 shifts")
    model = build_model(cfg.theta, cfg.s)
    mesh = build_mesh(cfg.level)
    ctx = ParametricSolveContext(mesh, model)
    z, u0 = _data(mesh)
    shifts = random_shifts(cfg.R, cfg.s, cfg.seed)
    meta = _base_metadata(cfg)
    report = ExperimentReport("qmc_error", ("m", "n", "rms_state", "rms_adjoint"), metadata=meta)
    for m in cfg.m_list:
        gv = _rule(cfg, model, 2 ** m, cfg.s)
        meta[f"genvec_sha256_m{m}"] = gv.digest()
        Qu, Qq = [], []
        for shift in shifts.shifts:
            u, q = ctx.mean_fields(lattice_points(gv, shift), z, u0)
            Qu.append(u)
            Qq.append(q)
        ru, rq = rms_over_shifts(Qu), rms_over_shifts(Qq)
        report.rows.append((m, 2 ** m, ru, rq))
        log.info("qmc m=%d: state %.3e adjoint %.3e", m, ru, rq)
    if len(report.rows) >= 2:
        n = report.column("n")
        report.rates = {"state": fit_rate(n, report.column("rms_state")),
                        "adjoint": fit_rate(n, report.column("rms_adjoint"))}
    report.elapsed = time.perf_counter() - t0
    return report


def build_control_problem(cfg: ExperimentConfig, alpha: float | None = None) -> ControlProblem:
    model = build_model(cfg.theta, cfg.s)
    mesh = build_mesh(cfg.level)
    ctx = ParametricSolveContext(mesh, model)
    gv = _rule(cfg, model, 2 ** cfg.m, cfg.s)
    shift = random_shifts(1, cfg.s, cfg.seed).shifts[0]
    bounds = quadrant_bounds(mesh) if cfg.bounds == "quadrant" else None
    u0 = nodal_interpolant(target_state, mesh)
    return ControlProblem(ctx, u0, cfg.alpha if alpha is None else alpha, gv, shift, bounds)


def run_optimize(cfg: ExperimentConfig):
    """Descent from ``P(x2)`` (constrained) or ``x2`` (unconstrained).

    Returns ``(report, control, trace)``.  The report rows are the trace; its
    ``misfit`` column is ``(1/n) sum_i ||u_i - u0||^2`` without the 1/2.
    """
    t0 = time.perf_counter()
    prob = build_control_problem(cfg)
    z0 = nodal_interpolant(source_term, prob.mesh)
    dcfg = DescentConfig(tol=cfg.tol, max_iter=cfg.max_iter)
    if prob.bounds is None:
        z, trace = gradient_descent(prob, z0, dcfg)
    else:
        z, trace = projected_gradient_descent(prob, prob.project(z0), dcfg)
    meta = _base_metadata(cfg)
    meta["genvec_sha256"] = prob.rule.digest()
    meta["misfit"] = "(1/n) sum_i ||u_h(y_i) - u0||_L2^2"
    meta["converged"] = trace.converged
    meta["iterations"] = trace.iterations
    report = ExperimentReport("optimize", trace.COLUMNS, metadata=meta)
    report.rows = [tuple(r[c] for c in trace.COLUMNS) for r in trace.rows]
    report.elapsed = time.perf_counter() - t0
    return report, z, trace


def run_cbc(cfg: ExperimentConfig) -> GeneratingVector:
    model = build_model(cfg.theta, cfg.s)
    w = weights_for_model(model, delta=cfg.delta)
    return dataclasses.replace(cbc_construct(2 ** cfg.m, cfg.s, w), theta=cfg.theta)


def write_control(z: GridFunction, path) -> None:
    export_grid_function(z, path)
