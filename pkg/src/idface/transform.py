"""Ternary top-k transformation of real templates and related helpers.

A template ``x`` in R^d is mapped to a vector in {-1, 0, +1}^d keeping the
signs of its ``k`` largest-magnitude coordinates.  The result has exactly
``k`` nonzero entries, so inner products between transformed templates are
integers in ``[-k, k]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DegenerateInput, DimensionMismatch, InvalidAngle, RangeViolation

__all__ = [
    "BinarySplit",
    "ternarize",
    "split",
    "ternary_inner",
    "rescaled_cosine",
    "sample_pair_exact_angle",
    "sample_pairs_exact_angle",
    "sample_pair_gaussian",
    "read_templates",
    "write_templates",
    "read_ternary",
    "write_ternary",
]


@dataclass(frozen=True)
class BinarySplit:
    """Disjoint-support binary vectors with ``plus - minus == z``."""

    plus: np.ndarray
    minus: np.ndarray

    @property
    def k(self) -> int:
        return int(self.plus.sum() + self.minus.sum())

    def reconstruct(self) -> np.ndarray:
        return self.plus.astype(np.int8) - self.minus.astype(np.int8)


def ternarize(x, k: int) -> np.ndarray:
    """Keep the signs of the ``k`` largest ``|x_j|``; zero everything else.

    Accepts a single template (1-D) or a batch of templates (2-D, one per
    row).  Equal magnitudes are resolved in favour of the lower index.

    Raises
    ------
    DimensionMismatch
        If ``k`` is outside ``[1, d]``.
    DegenerateInput
        If a template has fewer than ``k`` nonzero entries.
    """
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    X = np.atleast_2d(arr)
    if X.ndim != 2:
        raise DimensionMismatch(f"expected 1-D or 2-D input, got shape {arr.shape}")
    n, d = X.shape
    k = int(k)
    if k < 1 or k > d:
        raise DimensionMismatch(f"k={k} must lie in [1, d={d}]")
    if not np.all(np.isfinite(X)):
        raise DegenerateInput("template contains non-finite values")
    nnz = np.count_nonzero(X, axis=1)
    if np.any(nnz < k):
        bad = int(np.argmax(nnz < k))
        raise DegenerateInput(
            f"row {bad} has {int(nnz[bad])} nonzero entries, fewer than k={k}"
        )
    # stable sort on -|x| keeps the lower index first among equal magnitudes
    order = np.argsort(-np.abs(X), axis=1, kind="stable")[:, :k]
    Z = np.zeros((n, d), dtype=np.int8)
    rows = np.arange(n)[:, None]
    Z[rows, order] = np.sign(X[rows, order]).astype(np.int8)
    return Z[0] if single else Z


def split(z) -> BinarySplit:
    """Sign split ``z = plus - minus`` into two binary vectors."""
    z = np.asarray(z)
    return BinarySplit(plus=(z > 0).astype(np.uint8), minus=(z < 0).astype(np.uint8))


def ternary_inner(a, b) -> int:
    """Exact integer inner product of two ternary templates."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes {a.shape} and {b.shape} differ")
    return int(a @ b)


def rescaled_cosine(score: int, k_enroll: int, k_query: int) -> float:
    """Map an integer ternary score onto the cosine scale ``[-1, 1]``."""
    bound = min(k_enroll, k_query)
    if k_enroll < 1 or k_query < 1 or abs(score) > bound:
        raise RangeViolation(
            f"|score|={abs(score)} exceeds min(k_enroll, k_query)={bound}"
        )
    return score / float(np.sqrt(k_enroll * k_query))


def _check_angle(theta: float, exclude_right: bool = False) -> None:
    if not (0.0 < theta < np.pi):
        raise InvalidAngle(f"theta={theta} must lie in (0, pi)")
    if exclude_right and np.isclose(theta, np.pi / 2, rtol=0, atol=1e-12):
        raise InvalidAngle("theta = pi/2 is excluded for this construction")


def sample_pairs_exact_angle(
    d: int, theta: float, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` pairs of unit vectors whose inner product is exactly cos(theta).

    ``x`` is uniform on the sphere and the partner is
    ``cos(theta) * x + sin(theta) * u`` with ``u`` uniform on the unit sphere
    of the orthogonal complement of ``x``.
    """
    _check_angle(theta)
    if d < 2:
        raise DimensionMismatch("d must be at least 2")
    x = rng.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    u = rng.standard_normal((n, d))
    u -= np.sum(u * x, axis=1, keepdims=True) * x
    # second projection pass removes rounding residue
    u -= np.sum(u * x, axis=1, keepdims=True) * x
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    w = np.cos(theta) * x + np.sin(theta) * u
    return x, w


def sample_pair_exact_angle(
    d: int, theta: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    x, w = sample_pairs_exact_angle(d, theta, 1, rng)
    return x[0], w[0]


def sample_pair_gaussian(
    d: int, theta: float, rng: np.random.Generator, n: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized Gaussian pair ``(X, W)`` with ``W = cos(theta) (X + tan(theta) Y)``.

    For ``theta < pi/2`` this equals ``(X + tan(theta) Y) / sqrt(1 + tan^2)``;
    the explicit cosine factor keeps the sign right beyond ``pi/2``.  The
    normalized inner product only concentrates around cos(theta).
    """
    _check_angle(theta, exclude_right=True)
    shape = (d,) if n is None else (n, d)
    X = rng.standard_normal(shape)
    Y = rng.standard_normal(shape)
    W = np.cos(theta) * (X + np.tan(theta) * Y)
    return X, W


# -- template files ---------------------------------------------------------

def write_templates(path: str | Path, X) -> None:
    """One template per line, comma-separated floats (round-trip precision)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for row in X:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def read_templates(path: str | Path) -> np.ndarray:
    rows = []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: no templates found")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise DimensionMismatch(f"{path}: rows have differing lengths {sorted(widths)}")
    return np.array(rows, dtype=np.float64)


def write_ternary(path: str | Path, Z: Iterable) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for row in np.atleast_2d(np.asarray(Z)):
            fh.write(",".join(str(int(v)) for v in row))
            fh.write("\n")


def read_ternary(path: str | Path) -> np.ndarray:
    rows = []
    with open(path, encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([int(v) for v in line.split(",")])
    Z = np.array(rows, dtype=np.int8)
    if not np.all(np.isin(Z, (-1, 0, 1))):
        raise ValueError(f"{path}: entries outside {{-1, 0, 1}}")
    return Z
