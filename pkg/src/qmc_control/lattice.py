"""Randomly shifted rank-1 lattice rules with POD weights.

Generating vectors are built component by component (CBC), minimizing the
shift-averaged worst-case error in the weighted unanchored Sobolev space,

    e^2(gen) = sum_{u != {}} gamma_u (1/n) sum_{i<n} prod_{j in u} B2({i gen_j / n}),

with ``B2(t) = t^2 - t + 1/6`` and product-and-order dependent weights
``gamma_u = Gamma_{|u|} prod_{j in u} gamma_j``.  Sums over subsets are
carried by the order recursion on

    q[i, l] = Gamma_l * (elementary symmetric polynomial of degree l in the
              values gamma_j * B2({i gen_j / n}) over the dimensions so far),

which stays in floating-point range because ``Gamma_l / Gamma_{l-1}`` is
only polynomial in ``l``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "WeightSpec",
    "GeneratingVector",
    "ShiftSet",
    "choose_lambda",
    "zeta",
    "pod_weights",
    "weights_for_model",
    "wce_squared",
    "cbc_construct",
    "lattice_points",
    "random_shifts",
    "pod_constant",
    "save_generating_vector",
    "load_generating_vector",
]

# relative width (w.r.t. the size of the summed terms) of the band in which
# CBC candidates count as tied; the smallest tied candidate wins
TIE_TOLERANCE = 1e-11


def bernoulli2(t):
    return t * t - t + 1.0 / 6.0


def choose_lambda(p: float, delta: float = 0.05) -> float:
    """Smallest admissible weighted-space exponent for summability ``p``."""
    if not 0 < p < 1:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if not 0 < delta < 0.5:
        raise ValueError(f"delta must lie in (0, 1/2), got {delta}")
    if p <= 2.0 / 3.0 + 1e-12:
        return 1.0 / (2.0 - 2.0 * delta)
    return p / (2.0 - p)


_BERNOULLI = (1 / 6, -1 / 30, 1 / 42, -1 / 30, 5 / 66, -691 / 2730)


def zeta(x: float) -> float:
    """Riemann zeta for real ``x > 1`` (Euler-Maclaurin summation)."""
    if not x > 1:
        raise ValueError(f"zeta is only defined here for x > 1, got {x}")
    N = 32
    k = np.arange(1, N, dtype=float)
    total = math.fsum(k ** (-x))
    total += N ** (1.0 - x) / (x - 1.0) + 0.5 * N ** (-x)
    rising = x  # x (x+1) ... (x+2i-2)
    for i, B in enumerate(_BERNOULLI, start=1):
        total += B / math.factorial(2 * i) * rising * N ** (-x - 2 * i + 1)
        rising *= (x + 2 * i - 1) * (x + 2 * i)
    return total


@dataclass(frozen=True)
class WeightSpec:
    """POD weights ``gamma_u = Gamma_{|u|} * prod_{j in u} gamma_j``."""

    lam: float
    b: np.ndarray
    gamma: np.ndarray  # product factors gamma_j
    log_order: np.ndarray  # log Gamma_l, l = 0..s
    p: float | None = None
    delta: float | None = None

    @property
    def s(self) -> int:
        return len(self.gamma)

    @property
    def rho(self) -> float:
        return _rho(self.lam)

    @property
    def order_factors(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.log_order)

    @property
    def order_ratios(self) -> np.ndarray:
        """``Gamma_l / Gamma_{l-1}`` for ``l = 1..s``."""
        ell = np.arange(1, self.s + 1, dtype=float)
        return (ell + 1.0) ** (2.0 / (1.0 + self.lam))

    def weight(self, u) -> float:
        u = [int(j) for j in u]
        if not u:
            return 1.0
        return math.exp(self.log_order[len(u)] + sum(math.log(self.gamma[j - 1]) for j in u))

    def truncated(self, s: int) -> "WeightSpec":
        return WeightSpec(self.lam, self.b[:s], self.gamma[:s], self.log_order[: s + 1], self.p, self.delta)


def _rho(lam: float) -> float:
    return 2.0 * zeta(2.0 * lam) / (2.0 * math.pi ** 2) ** lam


def pod_weights(b, lam: float, s: int | None = None, p: float | None = None, delta: float | None = None) -> WeightSpec:
    """Weights minimizing the lattice-rule error bound for the adjoint."""
    b = np.asarray(b, dtype=float)
    if s is not None:
        if s > len(b):
            raise ValueError(f"need {s} values of b, got {len(b)}")
        b = b[:s]
    if np.any(b <= 0):
        raise ValueError("b_j must be positive")
    if not 0.5 < lam <= 1.0:
        raise ValueError(f"lambda must lie in (1/2, 1], got {lam}")
    expo = 2.0 / (1.0 + lam)
    gamma = (b / math.sqrt(_rho(lam))) ** expo
    ell = np.arange(len(b) + 1)
    log_order = expo * np.array([math.lgamma(l + 2.0) for l in ell])
    b.setflags(write=False)
    gamma.setflags(write=False)
    log_order.setflags(write=False)
    return WeightSpec(lam, b, gamma, log_order, p, delta)


def weights_for_model(model, p: float | None = None, delta: float = 0.05, s: int | None = None) -> WeightSpec:
    """Weights for a coefficient model; ``p`` defaults to ``1 / theta``."""
    if p is None:
        p = 1.0 / model.theta
    lam = choose_lambda(p, delta)
    return pod_weights(model.b, lam, s=s, p=p, delta=delta)


def pod_constant(w: WeightSpec) -> float:
    """The weight-dependent constant of the lattice-rule RMS error bound.

    ``(sum_u gamma_u^lam rho^|u|)^(1/(2 lam)) * (sum_u ((|u|+1)!)^2 prod b_j^2 / gamma_u)^(1/2)``
    Diagnostic only.
    """
    lam = w.lam
    ell = np.arange(w.s + 1)
    lf = np.array([math.lgamma(l + 2.0) for l in ell])
    first = _log_pod_sum(lam * w.log_order, lam * np.log(w.gamma) + math.log(w.rho))
    second = _log_pod_sum(2.0 * lf - w.log_order, 2.0 * np.log(w.b) - np.log(w.gamma))
    return math.exp(first / (2.0 * lam) + 0.5 * second)


def _log_pod_sum(log_a: np.ndarray, log_c: np.ndarray) -> float:
    """``log sum_u exp(log_a[|u|]) prod_{j in u} exp(log_c[j])``."""
    s = len(log_c)
    # log of elementary symmetric polynomials, built one variable at a time
    log_e = np.full(s + 1, -np.inf)
    log_e[0] = 0.0
    for j in range(s):
        shifted = np.concatenate([[-np.inf], log_e[:-1] + log_c[j]])
        log_e = np.logaddexp(log_e, shifted)
    terms = log_a + log_e
    top = np.max(terms)
    return float(top + math.log(np.sum(np.exp(terms - top))))


# ---------------------------------------------------------------------------
# generating vectors and point sets


@dataclass(frozen=True)
class GeneratingVector:
    n: int
    gen: tuple[int, ...]
    lam: float | None = None
    p: float | None = None
    theta: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "gen", tuple(int(g) for g in self.gen))
        if self.n < 1 or self.n & (self.n - 1):
            raise ValueError(f"n must be a power of two, got {self.n}")
        hi = max(self.n, 2)
        for g in self.gen:
            if g % 2 == 0 or not 1 <= g < hi:
                raise ValueError(f"generating vector component {g} is not an odd integer in [1, {hi})")

    @property
    def s(self) -> int:
        return len(self.gen)

    def truncated(self, s: int) -> "GeneratingVector":
        return GeneratingVector(self.n, self.gen[:s], self.lam, self.p, self.theta)

    def to_text(self) -> str:
        lines = [f"n={self.n}", f"s={self.s}"]
        for key in ("lam", "p", "theta"):
            val = getattr(self, key)
            name = "lambda" if key == "lam" else key
            lines.append(f"{name}={'none' if val is None else repr(float(val))}")
        lines.extend(str(g) for g in self.gen)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GeneratingVector":
        header = {}
        gen = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if "=" in line:
                key, val = (part.strip() for part in line.split("=", 1))
                header[key] = val
            else:
                gen.append(int(line))
        for key in ("n", "s"):
            if key not in header:
                raise ValueError(f"generating vector file lacks the {key}= header")
        if int(header["s"]) != len(gen):
            raise ValueError(f"header says s={header['s']} but {len(gen)} components follow")

        def opt(key):
            val = header.get(key, "none")
            return None if val == "none" else float(val)

        return cls(int(header["n"]), tuple(gen), opt("lambda"), opt("p"), opt("theta"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def save_generating_vector(gv: GeneratingVector, path) -> None:
    with open(path, "w") as fh:
        fh.write(gv.to_text())


def load_generating_vector(path) -> GeneratingVector:
    with open(path) as fh:
        return GeneratingVector.from_text(fh.read())


@dataclass(frozen=True)
class ShiftSet:
    seed: int
    shifts: np.ndarray = field(repr=False)

    @property
    def R(self) -> int:
        return self.shifts.shape[0]


def random_shifts(R: int, s: int, seed: int) -> ShiftSet:
    """``R`` uniform shifts in ``[0, 1)^s`` from a seeded PCG64 generator."""
    if R < 1:
        raise ValueError("need at least one shift")
    shifts = np.random.default_rng(seed).random((R, s))
    shifts.setflags(write=False)
    return ShiftSet(seed, shifts)


def lattice_points(gv: GeneratingVector, shift=None) -> np.ndarray:
    """Points ``frac(i gen / n + shift) - 1/2`` for ``i = 1..n``, shape ``(n, s)``."""
    n = gv.n
    gen = np.asarray(gv.gen, dtype=np.int64)
    shift = np.zeros(gv.s) if shift is None else np.asarray(shift, dtype=float)
    if shift.shape != (gv.s,):
        raise ValueError(f"shift must have length {gv.s}")
    i = np.arange(1, n + 1, dtype=np.int64)
    x = ((np.outer(i, gen) % n) / n) + shift
    return x - np.floor(x) - 0.5


# ---------------------------------------------------------------------------
# worst-case error and CBC


def _kernel_column(n: int, g: int, dtype=float) -> np.ndarray:
    # B2(k/n) = (6k^2 - 6kn + n^2) / (6n^2); the integer numerator keeps the
    # constant 1/6 from being rounded into every term
    k = (np.arange(n, dtype=np.int64) * g) % n
    num = 6 * k * k - 6 * k * n + n * n
    return num.astype(dtype) / dtype(6 * n * n)


def _update_orders(q: np.ndarray, j: int, gamma_j: float, omega: np.ndarray, ratios: np.ndarray):
    """Add dimension ``j`` (1-based) to the order table in place."""
    # the right-hand side is evaluated from the old table before the add
    q[:, 1 : j + 1] += gamma_j * omega[:, None] * ratios[:j] * q[:, 0:j]


def _order_weights(q: np.ndarray, j: int, ratios: np.ndarray) -> np.ndarray:
    return q[:, 0:j] @ ratios[:j]


def wce_squared(gv: GeneratingVector, w: WeightSpec) -> float:
    """Shift-averaged squared worst-case error of the lattice rule.

    Terms of size O(1) cancel down to a total of order ``1/n^2``, so the
    recursion runs in extended precision where the platform has it.
    """
    if w.s < gv.s:
        raise ValueError(f"weights cover {w.s} dimensions, vector has {gv.s}")
    n = gv.n
    ext = np.longdouble
    ratios = w.order_ratios.astype(ext)
    gamma = w.gamma.astype(ext)
    q = np.zeros((n, gv.s + 1), dtype=ext)
    q[:, 0] = 1
    for j, g in enumerate(gv.gen, start=1):
        omega = _kernel_column(n, g, ext)
        q[:, 1 : j + 1] = q[:, 1 : j + 1] + gamma[j - 1] * omega[:, None] * ratios[:j] * q[:, 0:j]
    return float(np.sum(q[:, 1:]) / n)


def _pick(errors: np.ndarray, candidates: np.ndarray, scale: float) -> int:
    best = np.min(errors)
    tied = errors <= best + TIE_TOLERANCE * scale
    return int(np.min(candidates[tied]))


def _cbc_naive_step(n: int, wvec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cand = np.arange(1, n, 2, dtype=np.int64)
    i = np.arange(n, dtype=np.int64)
    omega = bernoulli2((np.outer(cand, i) % n) / n)
    return cand, omega @ wvec


def _cbc_fast_step(n: int, wvec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Errors of every odd candidate via the structure of the odd residues.

    The odd residues modulo ``2^k`` (``k >= 3``) are ``+-5^a``, and ``B2`` is
    symmetric about 1/2, so every 2-adic level of the point index turns into
    a cyclic correlation over the exponent ``a``, evaluated by FFT.
    """
    m = n.bit_length() - 1
    if m < 3:
        return _cbc_naive_step(n, wvec)
    L0 = n // 4
    a = np.arange(L0)
    total = np.full(L0, bernoulli2(0.0) * wvec[0])
    for v in range(m):
        M = n >> v
        step = 1 << v
        if M == 2:
            total += bernoulli2(0.5) * wvec[step]
            continue
        if M == 4:
            total += bernoulli2(0.25) * (wvec[step] + wvec[3 * step])
            continue
        L = M // 4
        powers = np.empty(L, dtype=np.int64)
        pw = 1
        for b in range(L):
            powers[b] = pw
            pw = (pw * 5) % M
        c = bernoulli2(powers / M)
        W = wvec[step * powers] + wvec[step * ((M - powers) % M)]
        corr = np.fft.irfft(np.fft.rfft(c) * np.conj(np.fft.rfft(W)), n=L)
        total += corr[a % L]
    gens = np.empty(L0, dtype=np.int64)
    pw = 1
    for b in range(L0):
        gens[b] = pw
        pw = (pw * 5) % n
    cand = np.concatenate([gens, n - gens])
    return cand, np.concatenate([total, total])


def cbc_construct(n: int, s: int, w: WeightSpec, method: str = "fast") -> GeneratingVector:
    """Component-by-component generating vector for ``n = 2^m`` points.

    Each component is the odd candidate minimizing the squared worst-case
    error of the partial vector; ties go to the smallest candidate.
    ``method`` is ``"fast"`` (FFT, ``O(n log n)`` per candidate sweep) or
    ``"naive"`` (direct ``O(n^2)`` sweep, kept as a reference).
    """
    if n < 2 or n & (n - 1):
        raise ValueError(f"n must be a power of two >= 2, got {n}")
    if s < 1:
        raise ValueError("s must be >= 1")
    if w.s < s:
        raise ValueError(f"weights cover {w.s} dimensions, need {s}")
    step_fn = {"fast": _cbc_fast_step, "naive": _cbc_naive_step}[method]
    ratios = w.order_ratios
    q = np.zeros((n, s + 1))
    q[:, 0] = 1.0
    gen = []
    for j in range(1, s + 1):
        wvec = _order_weights(q, j, ratios)
        cand, err = step_fn(n, wvec)
        scale = np.sum(np.abs(wvec)) / 6.0
        g = _pick(err, cand, scale)
        gen.append(g)
        _update_orders(q, j, w.gamma[j - 1], _kernel_column(n, g), ratios)
    return GeneratingVector(n, tuple(gen), lam=w.lam, p=w.p)
