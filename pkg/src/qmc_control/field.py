"""Affine parametric diffusion coefficient on the unit square.

The coefficient is

    a(x, y) = mean + sum_j y_j * psi_j(x),   y_j in [-1/2, 1/2],

with the sine fluctuations

    psi_j(x) = (k_j^2 + l_j^2)^(-theta) * sin(pi k_j x1) * sin(pi l_j x2),

where the pairs (k_j, l_j) run over N x N ordered so that the sup norms
(k_j^2 + l_j^2)^(-theta) are non-increasing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = [
    "FrequencyTable",
    "CoefficientModel",
    "enumerate_frequencies",
    "psi_eval",
    "psi_matrix",
    "coeff_eval",
    "truncate",
    "tail_bound",
    "build_model",
    "export_frequencies",
]

# Radius up to which tail_bound sums lattice points exactly before
# switching to the integral comparison.
_EXACT_TAIL_RADIUS = 64


def _frozen(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FrequencyTable:
    """Ordered fluctuation frequencies ``(k_j, l_j)`` and their sup norms."""

    theta: float
    k: np.ndarray
    l: np.ndarray
    norms: np.ndarray

    @property
    def count(self) -> int:
        return len(self.k)

    @property
    def radii_sq(self) -> np.ndarray:
        return self.k * self.k + self.l * self.l

    @property
    def entries(self) -> list[tuple[int, int, float]]:
        return [(int(a), int(b), float(c)) for a, b, c in zip(self.k, self.l, self.norms)]


@dataclass(frozen=True)
class CoefficientModel:
    """Dimension-truncated affine coefficient with its rigorous bounds.

    ``a_min_bound`` and ``a_max_bound`` bound the *untruncated* coefficient
    for every admissible parameter, so they also bound any truncation.
    """

    freqs: FrequencyTable
    s: int
    mean: float = 1.0
    a_min_bound: float = field(init=False)
    a_max_bound: float = field(init=False)
    b: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.s < 0:
            raise ValueError("truncation dimension must be >= 0")
        if self.s > self.freqs.count:
            raise ValueError(f"frequency table has {self.freqs.count} entries, need s={self.s}")
        half_sum = 0.5 * (float(np.sum(self.freqs.norms[: self.s])) + tail_bound(self.freqs, self.s))
        a_min = self.mean - half_sum
        if a_min <= 0:
            raise ValueError(
                f"coefficient is not uniformly positive: a_min bound {a_min:.6g} <= 0"
            )
        object.__setattr__(self, "a_min_bound", a_min)
        object.__setattr__(self, "a_max_bound", self.mean + half_sum)
        object.__setattr__(self, "b", _frozen(self.freqs.norms[: self.s] / a_min))

    @property
    def theta(self) -> float:
        return self.freqs.theta


def _lattice_pairs(radius: float) -> tuple[np.ndarray, np.ndarray]:
    """All (k, l) in N x N with k^2 + l^2 <= radius^2, sorted by (k^2+l^2, k, l)."""
    r = int(math.floor(radius))
    k, l = np.meshgrid(np.arange(1, r + 1), np.arange(1, r + 1), indexing="ij")
    k = k.ravel()
    l = l.ravel()
    r2 = k * k + l * l
    keep = r2 <= radius * radius
    k, l, r2 = k[keep], l[keep], r2[keep]
    order = np.lexsort((l, k, r2))
    return k[order], l[order]


def enumerate_frequencies(theta: float, count: int) -> FrequencyTable:
    """Return the first ``count`` frequency pairs in non-increasing norm order.

    Pairs are sorted by ``k^2 + l^2`` ascending; ties go to the smaller
    ``k`` (then smaller ``l``).
    """
    if not theta > 1:
        raise ValueError(f"theta must exceed 1 for a summable coefficient, got {theta}")
    if count < 1:
        raise ValueError("count must be >= 1")
    # the quarter disc of radius R holds roughly pi R^2 / 4 lattice points
    radius = math.sqrt(4.0 * count / math.pi) + 2.0
    while True:
        k, l = _lattice_pairs(radius)
        if len(k) >= count:
            break
        radius *= 1.5
    k, l = k[:count], l[:count]
    norms = (k * k + l * l).astype(float) ** (-theta)
    return FrequencyTable(float(theta), _frozen(k), _frozen(l), _frozen(norms))


def psi_eval(freqs: FrequencyTable, j: int, x) -> float:
    """Evaluate the ``j``-th fluctuation (1-based) at the point ``x``."""
    if not 1 <= j <= freqs.count:
        raise IndexError(f"fluctuation index {j} outside 1..{freqs.count}")
    x1, x2 = x
    i = j - 1
    return float(
        freqs.norms[i] * math.sin(math.pi * freqs.k[i] * x1) * math.sin(math.pi * freqs.l[i] * x2)
    )


def psi_matrix(freqs: FrequencyTable, points: np.ndarray, s: int) -> np.ndarray:
    """Values ``psi_j(x)`` for every point (rows) and ``j = 1..s`` (columns)."""
    points = np.asarray(points, dtype=float)
    if s > freqs.count:
        raise IndexError(f"requested {s} fluctuations, table has {freqs.count}")
    k = freqs.k[:s].astype(float)
    l = freqs.l[:s].astype(float)
    sx = np.sin(np.pi * np.outer(points[:, 0], k))
    sy = np.sin(np.pi * np.outer(points[:, 1], l))
    return sx * sy * freqs.norms[:s]


def _check_cube(y: np.ndarray):
    if y.size and np.max(np.abs(y)) > 0.5 + 1e-14:
        raise ValueError("parameter vector leaves the cube [-1/2, 1/2]^s")


def coeff_eval(model: CoefficientModel, x, y) -> float:
    """Evaluate ``a(x, y)`` for the truncated model."""
    y = np.asarray(y, dtype=float)
    if y.shape != (model.s,):
        raise ValueError(f"expected parameter vector of length {model.s}, got shape {y.shape}")
    _check_cube(y)
    psi = psi_matrix(model.freqs, np.asarray([x], dtype=float), model.s)[0]
    return float(model.mean + psi @ y)


def truncate(y, s: int) -> np.ndarray:
    """Keep the first ``s`` parameters (the rest are implicitly zero)."""
    if s < 0:
        raise ValueError("s must be >= 0")
    return np.asarray(y, dtype=float)[:s].copy()


@lru_cache(maxsize=None)
def _exact_suffix_sums(theta: float) -> np.ndarray:
    """Suffix sums of norms over all pairs inside the exact radius.

    The pairs use the same ordering as ``enumerate_frequencies``, so entry
    ``s`` is exactly the sum over table indices ``j > s`` within the radius.
    """
    k, l = _lattice_pairs(_EXACT_TAIL_RADIUS)
    norms = (k * k + l * l).astype(float) ** (-theta)
    return np.concatenate([np.cumsum(norms[::-1])[::-1], [0.0]])


def _integral_tail(theta: float, rho: float) -> float:
    # unit cells of pairs with k^2+l^2 >= rho^2 lie in {|x| >= rho - sqrt 2}
    return 0.5 * math.pi * (rho - math.sqrt(2.0)) ** (2.0 - 2.0 * theta) / (2.0 * theta - 2.0)


def tail_bound(freqs: FrequencyTable, s: int) -> float:
    """Upper bound on ``sum_{j > s} (k_j^2 + l_j^2)^(-theta)``.

    Every pair with ``k^2 + l^2 >= r^2`` is dominated by the integral of
    ``|x|^(-2 theta)`` over its unit cell ``[k-1, k] x [l-1, l]``; those cells
    sit outside the disc of radius ``r - sqrt(2)``.  Pairs inside a fixed
    radius are summed exactly and only the remainder goes through the
    integral.  The result is non-increasing in ``s`` and tends to zero.
    """
    if s < 0:
        raise ValueError("s must be >= 0")
    theta = freqs.theta
    suffix = _exact_suffix_sums(theta)
    if s < len(suffix):
        return float(suffix[s]) + _integral_tail(theta, _EXACT_TAIL_RADIUS)
    if s <= freqs.count:
        rho2 = float(freqs.radii_sq[s - 1])
    else:
        rho2 = float(enumerate_frequencies(theta, s).radii_sq[-1])
    # rho2 > _EXACT_TAIL_RADIUS**2 here, so this never exceeds the branch above
    return _integral_tail(theta, math.sqrt(rho2))


def build_model(theta: float, s: int, mean: float = 1.0) -> CoefficientModel:
    """Coefficient model with the first ``s`` fluctuations of decay ``theta``."""
    freqs = enumerate_frequencies(theta, max(s, 1))
    return CoefficientModel(freqs, s, mean)


def export_frequencies(freqs: FrequencyTable, path) -> None:
    """Write the table as CSV with columns j, k, l, norm."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["j", "k", "l", "norm"])
        for j, (k, l, nrm) in enumerate(freqs.entries, start=1):
            w.writerow([j, k, l, repr(nrm)])
