"""Numerical checks of the ternary transform's theory, plus cost calculators.

Contents:

* ``epsilon_theoretical``: isometry error from a bivariate-normal double
  integral, evaluated by adaptive quadrature;
* ``isometry_mc``: the same error measured on exact-angle pairs;
* ``codebook_log_size`` / ``optimal_alpha``: size of the ternary codebook;
* ``order_stat_check`` and ``gaussian_pair_error``: Monte-Carlo checks of the
  order-statistic threshold and of the Gaussian pair construction;
* communication and storage cost formulas, with unit helpers.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import integrate
from scipy.special import erfinv, gammaln

from .ahe import BackendDescriptor
from .dbenc import encrypted_size_bytes
from .errors import InvalidAngle, QuadratureFailure
from .packing import capacity
from .transform import (
    sample_pair_gaussian,
    sample_pairs_exact_angle,
    ternarize,
)

__all__ = [
    "threshold_c",
    "p_theta",
    "epsilon_theoretical",
    "IsometryRow",
    "isometry_mc",
    "isometry_report",
    "theta_grid",
    "codebook_log_size",
    "optimal_alpha",
    "two_thirds_alpha",
    "OrderStatReport",
    "order_stat_check",
    "gaussian_pair_error",
    "CostModel",
    "comm_cost",
    "twopc_bits",
    "multi_identify_bits",
    "enroll_broadcast_bits",
    "idface_comm_bytes",
    "storage_bytes",
    "KB", "KiB", "MB", "MiB", "GB", "GiB",
    "to_unit",
    "paper_mb",
    "rows_to_csv",
]

KB, KiB = 10**3, 2**10
MB, MiB = 10**6, 2**20
GB, GiB = 10**9, 2**30

TRUNCATION_SIGMAS = 12.0


def to_unit(nbytes: float, unit: int) -> float:
    return nbytes / unit


def paper_mb(nbytes: float) -> float:
    """KiB counted in thousands: the mixed convention behind the tabulated HE costs."""
    return nbytes / KiB / 1000


# -- isometry error ------------------------------------------------------------------

def threshold_c(d: int, alpha: int) -> float:
    """Magnitude threshold ``sqrt(2) * erfinv(1 - alpha/d)`` of a standard normal coordinate."""
    if not 1 <= alpha < d:
        raise ValueError(f"need 1 <= alpha < d, got alpha={alpha}, d={d}")
    return math.sqrt(2.0) * float(erfinv(1.0 - alpha / d))


def _check_theta(theta: float) -> None:
    if not 0.0 < theta < math.pi:
        raise InvalidAngle(f"theta={theta} outside (0, pi)")
    if abs(math.cos(theta)) < 1e-12:
        raise InvalidAngle("theta = pi/2 is excluded")


def p_theta(d: int, alpha: int, theta: float, atol: float = 1e-6) -> float:
    """Signed probability mass ``P(theta)`` by two double integrals.

    U ~ N(0, 1) and V ~ N(0, tan^2 theta) are independent; the first region is
    ``u > c, v > c/cos - u``, the second ``u > c, v < -c/cos - u``.  Both are
    truncated at 12 standard deviations.  For an obtuse angle the integrals
    are taken at ``pi - theta`` and the result is negated, which keeps
    ``P(pi - theta) = -P(theta)``.
    """
    _check_theta(theta)
    c = threshold_c(d, alpha)
    cos = math.cos(theta)
    sign = 1.0 if cos > 0 else -1.0
    cos = abs(cos)
    s = math.sqrt(1.0 - cos * cos) / cos  # |tan theta|
    u_hi = TRUNCATION_SIGMAS
    v_lo, v_hi = -TRUNCATION_SIGMAS * s, TRUNCATION_SIGMAS * s
    norm = 1.0 / (2.0 * math.pi * s)

    def f(v, u):
        return norm * math.exp(-0.5 * (u * u + (v / s) ** 2))

    def lower_a(u):
        return min(max(c / cos - u, v_lo), v_hi)

    def upper_b(u):
        return max(min(-c / cos - u, v_hi), v_lo)

    opts = dict(epsabs=atol / 4, epsrel=1e-9)
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            a, err_a = integrate.dblquad(f, c, u_hi, lower_a, lambda u: v_hi, **opts)
            b, err_b = integrate.dblquad(f, c, u_hi, lambda u: v_lo, upper_b, **opts)
        except integrate.IntegrationWarning as exc:
            raise QuadratureFailure(str(exc)) from exc
    if err_a + err_b > atol:
        raise QuadratureFailure(f"quadrature error {err_a + err_b:.2e} exceeds {atol:.0e}")
    return sign * (a - b)


def epsilon_theoretical(d: int, alpha: int, theta: float, atol: float = 1e-6) -> float:
    """``|cos(theta) - 2 P(theta) d / alpha|``."""
    return abs(math.cos(theta) - 2.0 * p_theta(d, alpha, theta, atol) * d / alpha)


def theta_grid(n: int, margin: float = 1e-3) -> np.ndarray:
    """``n`` angles evenly spread over (0, pi), nudged off pi/2."""
    grid = np.linspace(margin, math.pi - margin, n)
    mid = np.isclose(grid, math.pi / 2, atol=1e-9)
    grid[mid] += 1e-3
    return grid


@dataclass(frozen=True)
class IsometryRow:
    theta: float
    cos_theta: float
    epsilon_theory: float
    mean_abs_delta: float
    max_abs_delta: float
    trials: int


def isometry_mc(d: int, alpha: int, beta: int, theta: float, trials: int,
                rng=None) -> tuple[float, float]:
    """Mean and max of ``|rescaled <T_a x, T_b w> - cos(theta)|`` over exact-angle pairs."""
    if trials < 1:
        raise ValueError("trials must be positive")
    X, W = sample_pairs_exact_angle(d, theta, trials, np.random.default_rng(rng))
    zx = ternarize(X, alpha).astype(np.int64)
    zw = ternarize(W, beta).astype(np.int64)
    scores = np.einsum("ij,ij->i", zx, zw)
    est = scores / math.sqrt(alpha * beta)
    delta = np.abs(est - math.cos(theta))
    return float(delta.mean()), float(delta.max())


def isometry_report(d: int, alpha: int, beta: int, thetas: Iterable[float], trials: int,
                    rng=None, theory: bool = True) -> list[IsometryRow]:
    rng = np.random.default_rng(rng)
    rows = []
    for t in thetas:
        mean, mx = isometry_mc(d, alpha, beta, float(t), trials, rng)
        eps = epsilon_theoretical(d, alpha, float(t)) if theory and alpha == beta else float("nan")
        rows.append(IsometryRow(float(t), math.cos(t), eps, mean, mx, trials))
    return rows


# -- codebook size ---------------------------------------------------------------------

def codebook_log_size(d: int, alpha: int) -> float:
    """Natural log of ``C(d, alpha) * 2^alpha``."""
    if not 0 < alpha <= d:
        raise ValueError(f"alpha={alpha} outside (0, {d}]")
    return float(gammaln(d + 1) - gammaln(alpha + 1) - gammaln(d - alpha + 1) + alpha * math.log(2))


def optimal_alpha(d: int) -> int:
    """Smallest maximiser of the codebook size, from the exact ratio test.

    ``f(a+1)/f(a) = 2(d-a)/(a+1)``, so ``f`` grows until ``2(d-a) <= a+1``,
    i.e. up to ``a = ceil((2d-1)/3)``; when ``2(d-a) = a+1`` the next value
    ties.  This equals ``floor(2d/3)`` unless ``d % 3 == 1``, where it is one
    larger.
    """
    if d < 1:
        raise ValueError("d must be positive")
    return max(1, -(-(2 * d - 1) // 3))


def two_thirds_alpha(d: int) -> int:
    """The rule of thumb ``floor(2d/3)``."""
    return (2 * d) // 3


# -- order statistic / Gaussian pairs -------------------------------------------------

@dataclass(frozen=True)
class OrderStatReport:
    d: int
    alpha: int
    trials: int
    empirical: float
    theoretical: float
    deviation: float
    stderr: float


def order_stat_check(d: int, alpha: int, trials: int, rng=None) -> OrderStatReport:
    """Mean (d-alpha)-th order statistic of d half-normal draws vs its quantile."""
    if trials < 100:
        raise ValueError("use at least 100 trials")
    rng = np.random.default_rng(rng)
    k = d - alpha  # 1-based rank from the bottom
    vals = np.empty(trials)
    chunk = max(1, min(trials, 4_000_000 // d))
    for start in range(0, trials, chunk):
        n = min(chunk, trials - start)
        A = np.abs(rng.standard_normal((n, d)))
        vals[start:start + n] = np.partition(A, k - 1, axis=1)[:, k - 1]
    theo = math.sqrt(2.0) * float(erfinv(1.0 - alpha / d))
    emp = float(vals.mean())
    return OrderStatReport(d, alpha, trials, emp, theo, abs(emp - theo),
                           float(vals.std(ddof=1) / math.sqrt(trials)))


def gaussian_pair_error(d: int, theta: float, samples: int, rng=None) -> tuple[float, float]:
    """For Gaussian pairs at nominal angle theta: ``|mean C - cos|`` and ``mean |C - cos|``,
    with ``C`` the normalised inner product."""
    X, W = sample_pair_gaussian(d, theta, np.random.default_rng(rng), n=samples)
    C = np.einsum("ij,ij->i", X, W) / (np.linalg.norm(X, axis=1) * np.linalg.norm(W, axis=1))
    cos = math.cos(theta)
    return float(abs(C.mean() - cos)), float(np.abs(C - cos).mean())


# -- costs --------------------------------------------------------------------------------

def twopc_bits(D: int, beta: int, d: int) -> int:
    """Query broadcast (2d bits) plus one 2*beta-bit subvector reply per identity."""
    return 2 * D * beta + 2 * d


def multi_identify_bits(D: int, beta: int, d: int, parties: int) -> int:
    return (parties - 1) * twopc_bits(D, beta, d)


def enroll_broadcast_bits(d: int, parties: int, id_bits: int) -> int:
    return (parties - 1) * (2 * d + id_bits)


def idface_comm_bytes(D: int, slot_count: int, m: int, ciphertext_bytes: int) -> float:
    """Two ciphertexts per batch one way, an index of ``ceil(log2 D)`` bits back."""
    batches = math.ceil(D / (slot_count * m))
    return 2 * batches * ciphertext_bytes + math.ceil(math.log2(max(D, 2))) / 8


@dataclass(frozen=True)
class CostModel:
    D: int
    d: int
    alpha: int
    beta: int
    descriptor: BackendDescriptor
    parties: int = 2

    def __post_init__(self):
        if min(self.D, self.d, self.alpha, self.beta, self.parties) < 1:
            raise ValueError("cost model fields must be positive")

    @property
    def m(self) -> int:
        return capacity(self.descriptor.slot_bits, self.alpha, self.beta).m


def comm_cost(model: CostModel, protocol: str) -> float:
    """Bytes exchanged by one identification."""
    if protocol == "idface":
        return idface_comm_bytes(model.D, model.descriptor.slot_count, model.m,
                                 model.descriptor.ciphertext_bytes)
    if protocol == "twopc":
        return twopc_bits(model.D, model.beta, model.d) / 8
    if protocol == "multi":
        return multi_identify_bits(model.D, model.beta, model.d, model.parties) / 8
    raise ValueError(f"unknown protocol {protocol!r}")


def storage_bytes(D: int, d: int, alpha: int, beta: int, descriptor: BackendDescriptor) -> int:
    m = capacity(descriptor.slot_bits, alpha, beta).m
    return encrypted_size_bytes(D, m, descriptor.slot_count, d, descriptor.ciphertext_bytes)


# -- CSV ----------------------------------------------------------------------------------

def rows_to_csv(rows: Sequence, fh=None) -> str:
    """Write dataclass rows (or dicts) as CSV; returns the text."""
    dicts = [asdict(r) if hasattr(r, "__dataclass_fields__") else dict(r) for r in rows]
    out = io.StringIO()
    if dicts:
        w = csv.DictWriter(out, fieldnames=list(dicts[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(dicts)
    text = out.getvalue()
    if fh is not None:
        fh.write(text)
    return text
