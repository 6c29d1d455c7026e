"""Optimal control of an elliptic PDE with affine random diffusion.

Finite elements on the unit square, dimension truncation of the random
coefficient, randomly shifted rank-1 lattice rules built by fast CBC, and
(projected) gradient descent on the sample-averaged objective.
"""

from .experiments import ExperimentConfig, ExperimentReport, fit_rate, rms_over_shifts
from .fem import GridFunction, Mesh, SolverError, build_mesh
from .field import CoefficientModel, FrequencyTable, build_model, enumerate_frequencies
from .lattice import GeneratingVector, cbc_construct, lattice_points, pod_weights, random_shifts
from .optimize import Bounds, ControlProblem, DescentConfig, gradient_descent, projected_gradient_descent
from .pde import ParametricSolveContext

__version__ = "0.1.0"
