# exterior.py
"""
Pointwise exterior algebra on R^n for n in {2, 3}.

A k-form is stored by its coefficients in the basis of strictly ascending
multi-indices taken in lexicographic order, e.g. for n=3, k=2 the basis is
(dx^dy, dx^dz, dy^dz).  Every sign convention in the repository follows from
this ordering.

The array-level kernels (``wedge_coeffs``, ``hodge_matrix``, ``pullback_matrix``)
act on the last axis so the grid and mesh modules can apply them to whole
fields at once; ``KFormPoint`` and friends wrap them for single points.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations
from math import comb
from typing import Dict, Iterable, Mapping, Tuple

import numpy as np

logger = logging.getLogger(__name__)

SUPPORTED_DIMS = (2, 3)
AXIS_NAMES = ('x', 'y', 'z')

MultiIndex = Tuple[int, ...]


def _check_dim(n: int):
    if n not in SUPPORTED_DIMS:
        raise ValueError(f"Unsupported dimension {n}; expected one of {SUPPORTED_DIMS}")


@lru_cache(maxsize=None)
def basis(n: int, k: int) -> Tuple[MultiIndex, ...]:
    """Ascending multi-indices of length k over range(n), lexicographic."""
    _check_dim(n)
    if not 0 <= k <= n:
        raise ValueError(f"Degree {k} outside [0, {n}]")
    return tuple(combinations(range(n), k))


@lru_cache(maxsize=None)
def basis_index(n: int, k: int) -> Dict[MultiIndex, int]:
    return {multi: pos for pos, multi in enumerate(basis(n, k))}


def permutation_sign(seq: Iterable[int]) -> int:
    """Sign of the permutation sorting ``seq``; 0 when an entry repeats."""
    items = list(seq)
    if len(set(items)) != len(items):
        return 0
    inversions = sum(
        1 for i in range(len(items)) for j in range(i + 1, len(items)) if items[i] > items[j]
    )
    return -1 if inversions % 2 else 1


def complement(n: int, multi: MultiIndex) -> MultiIndex:
    return tuple(i for i in range(n) if i not in multi)


@lru_cache(maxsize=None)
def _wedge_table(n: int, k: int, l: int):
    if k + l > n:
        raise ValueError(f"Wedge of degrees {k} and {l} exceeds dimension {n}")
    target_index = basis_index(n, k + l)
    left, right, target, sign = [], [], [], []
    for i, multi_a in enumerate(basis(n, k)):
        for j, multi_b in enumerate(basis(n, l)):
            s = permutation_sign(multi_a + multi_b)
            if s == 0:
                continue
            left.append(i)
            right.append(j)
            target.append(target_index[tuple(sorted(multi_a + multi_b))])
            sign.append(float(s))
    return (np.array(left, dtype=int), np.array(right, dtype=int),
            np.array(target, dtype=int), np.array(sign))


def wedge_coeffs(a: np.ndarray, b: np.ndarray, n: int, k: int, l: int) -> np.ndarray:
    """Wedge product on coefficient arrays (last axis), broadcasting leading axes."""
    left, right, target, sign = _wedge_table(n, k, l)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lead = np.broadcast_shapes(a.shape[:-1], b.shape[:-1])
    out = np.zeros(lead + (comb(n, k + l),))
    if len(target) == 0:
        return out
    terms = sign * a[..., left] * b[..., right]
    # fixed accumulation order keeps results bit-reproducible
    for t in range(len(target)):
        out[..., target[t]] += terms[..., t]
    return out


def _minor(matrix: np.ndarray, rows: MultiIndex, cols: MultiIndex) -> float:
    if not rows:
        return 1.0
    return float(np.linalg.det(matrix[np.ix_(rows, cols)]))


def gram_matrix(n: int, k: int, g: np.ndarray) -> np.ndarray:
    """Induced inner product on k-forms: <dx^I, dx^J>_g = det(g^{-1}[I, J])."""
    g_inv = np.linalg.inv(g)
    multis = basis(n, k)
    return np.array([[_minor(g_inv, I, J) for J in multis] for I in multis]).reshape(len(multis), len(multis))


def hodge_matrix(n: int, k: int, g: np.ndarray) -> np.ndarray:
    """
    Matrix of the Hodge star from k-forms to (n-k)-forms.

    Built from the defining relation beta ^ *alpha = <beta, alpha>_g vol_g:
    (*alpha)_{I^c} = sign(I, I^c) * sqrt(det g) * sum_J G_k[I, J] alpha_J.
    """
    gram = gram_matrix(n, k, g)
    sqrt_det = np.sqrt(np.linalg.det(g))
    out_index = basis_index(n, n - k)
    star = np.zeros((comb(n, n - k), comb(n, k)))
    for i, multi in enumerate(basis(n, k)):
        comp = complement(n, multi)
        sign = permutation_sign(multi + comp)
        star[out_index[comp], :] = sign * sqrt_det * gram[i, :]
    return star


def pullback_matrix(n: int, k: int, F: np.ndarray) -> np.ndarray:
    """(F^* alpha)_I = sum_J alpha_J det(F[J, I])."""
    multis = basis(n, k)
    return np.array([[_minor(F, J, I) for J in multis] for I in multis]).reshape(len(multis), len(multis))


def format_coeffs(coeffs: np.ndarray, n: int, k: int) -> str:
    terms = []
    for c, multi in zip(coeffs, basis(n, k)):
        name = '^'.join(f"d{AXIS_NAMES[i]}" for i in multi) if multi else '1'
        terms.append(f"{c:.17e}·{name}")
    return ' + '.join(terms)


@dataclass(frozen=True)
class KFormPoint:
    """Coefficients of an alternating k-form at a single point."""
    dim: int
    degree: int
    coeffs: np.ndarray

    def __post_init__(self):
        _check_dim(self.dim)
        if not 0 <= self.degree <= self.dim:
            raise ValueError(f"Degree {self.degree} outside [0, {self.dim}]")
        coeffs = np.array(self.coeffs, dtype=float).reshape(-1)
        if coeffs.shape[0] != comb(self.dim, self.degree):
            raise ValueError(
                f"{self.degree}-form in dimension {self.dim} needs {comb(self.dim, self.degree)} "
                f"coefficients, got {coeffs.shape[0]}"
            )
        coeffs.setflags(write=False)
        object.__setattr__(self, 'coeffs', coeffs)

    @classmethod
    def zeros(cls, n: int, k: int) -> 'KFormPoint':
        return cls(n, k, np.zeros(comb(n, k)))

    @classmethod
    def from_terms(cls, n: int, k: int, terms: Mapping[MultiIndex, float]) -> 'KFormPoint':
        """Build from {multi-index: coefficient}; unsorted indices pick up their permutation sign."""
        coeffs = np.zeros(comb(n, k))
        index = basis_index(n, k)
        for multi, value in terms.items():
            if len(multi) != k:
                raise ValueError(f"Multi-index {multi} is not of length {k}")
            sign = permutation_sign(multi)
            if sign:
                coeffs[index[tuple(sorted(multi))]] += sign * value
        return cls(n, k, coeffs)

    @classmethod
    def volume(cls, n: int) -> 'KFormPoint':
        return cls(n, n, np.ones(1))

    def __add__(self, other: 'KFormPoint') -> 'KFormPoint':
        self._check_same(other)
        return KFormPoint(self.dim, self.degree, self.coeffs + other.coeffs)

    def __sub__(self, other: 'KFormPoint') -> 'KFormPoint':
        self._check_same(other)
        return KFormPoint(self.dim, self.degree, self.coeffs - other.coeffs)

    def __mul__(self, scalar: float) -> 'KFormPoint':
        return KFormPoint(self.dim, self.degree, self.coeffs * float(scalar))

    __rmul__ = __mul__

    def __neg__(self) -> 'KFormPoint':
        return KFormPoint(self.dim, self.degree, -self.coeffs)

    def _check_same(self, other: 'KFormPoint'):
        if (self.dim, self.degree) != (other.dim, other.degree):
            raise ValueError(
                f"Form shapes differ: ({self.dim},{self.degree}) vs ({other.dim},{other.degree})"
            )

    def __str__(self) -> str:
        return format_coeffs(self.coeffs, self.dim, self.degree)


@dataclass(frozen=True)
class MetricPoint:
    """Symmetric positive-definite metric at a point."""
    g: np.ndarray

    def __post_init__(self):
        g = np.array(self.g, dtype=float)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ValueError(f"Metric must be square, got shape {g.shape}")
        _check_dim(g.shape[0])
        if not np.array_equal(g, g.T):
            raise ValueError("Metric is not symmetric")
        for m in range(1, g.shape[0] + 1):
            if np.linalg.det(g[:m, :m]) <= 0.0:
                raise ValueError(f"Metric is not positive definite (leading minor {m})")
        g.setflags(write=False)
        object.__setattr__(self, 'g', g)

    @classmethod
    def identity(cls, n: int) -> 'MetricPoint':
        return cls(np.eye(n))

    @property
    def dim(self) -> int:
        return self.g.shape[0]

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.g)

    @property
    def volume_factor(self) -> float:
        return float(np.sqrt(np.linalg.det(self.g)))


def wedge(alpha: KFormPoint, beta: KFormPoint) -> KFormPoint:
    if alpha.dim != beta.dim:
        raise ValueError(f"Dimension mismatch in wedge: {alpha.dim} vs {beta.dim}")
    n = alpha.dim
    coeffs = wedge_coeffs(alpha.coeffs, beta.coeffs, n, alpha.degree, beta.degree)
    return KFormPoint(n, alpha.degree + beta.degree, coeffs)


def inner(alpha: KFormPoint, beta: KFormPoint, metric: MetricPoint) -> float:
    """Metric inner product of two forms of equal degree."""
    alpha._check_same(beta)
    if metric.dim != alpha.dim:
        raise ValueError("Metric dimension does not match the forms")
    gram = gram_matrix(alpha.dim, alpha.degree, metric.g)
    return float(alpha.coeffs @ gram @ beta.coeffs)


def hodge(alpha: KFormPoint, metric: MetricPoint) -> KFormPoint:
    if metric.dim != alpha.dim:
        raise ValueError("Metric dimension does not match the form")
    n, k = alpha.dim, alpha.degree
    return KFormPoint(n, n - k, hodge_matrix(n, k, metric.g) @ alpha.coeffs)


def sharp(alpha: KFormPoint, metric: MetricPoint) -> np.ndarray:
    if alpha.degree != 1 or metric.dim != alpha.dim:
        raise ValueError("sharp expects a 1-form and a metric of matching dimension")
    return metric.inverse @ alpha.coeffs


def flat(vector: np.ndarray, metric: MetricPoint) -> KFormPoint:
    vector = np.asarray(vector, dtype=float)
    if vector.shape != (metric.dim,):
        raise ValueError(f"Vector of shape {vector.shape} does not match metric dimension {metric.dim}")
    return KFormPoint(metric.dim, 1, metric.g @ vector)


def pullback(alpha: KFormPoint, F: np.ndarray) -> KFormPoint:
    """Pull a form on the target back through the linear map F: (F^*a)(v..) = a(Fv..)."""
    F = np.asarray(F, dtype=float)
    if F.shape != (alpha.dim, alpha.dim):
        raise ValueError(f"Map of shape {F.shape} does not act on dimension {alpha.dim}")
    return KFormPoint(alpha.dim, alpha.degree, pullback_matrix(alpha.dim, alpha.degree, F) @ alpha.coeffs)


@dataclass(frozen=True)
class _LeggedForm:
    """n scalar forms of equal degree indexed by an orthonormal frame leg a = 1..n."""
    parts: Tuple[KFormPoint, ...]

    def __post_init__(self):
        parts = tuple(self.parts)
        if not parts:
            raise ValueError("A vector-valued form needs at least one leg")
        dim, degree = parts[0].dim, parts[0].degree
        for part in parts:
            if (part.dim, part.degree) != (dim, degree):
                raise ValueError("All legs must share dimension and degree")
        if len(parts) != dim:
            raise ValueError(f"Expected {dim} legs, got {len(parts)}")
        object.__setattr__(self, 'parts', parts)

    @property
    def dim(self) -> int:
        return self.parts[0].dim

    @property
    def leg_dim(self) -> int:
        return len(self.parts)

    @property
    def degree(self) -> int:
        return self.parts[0].degree

    def matrix(self) -> np.ndarray:
        """Rows are legs, columns the coefficient basis of each leg."""
        return np.vstack([p.coeffs for p in self.parts])

    @classmethod
    def from_matrix(cls, rows: np.ndarray, degree: int):
        rows = np.asarray(rows, dtype=float)
        n = rows.shape[0]
        return cls(tuple(KFormPoint(n, degree, rows[a]) for a in range(n)))


class VectorValuedForm(_LeggedForm):
    """Legs along the deformed frame vectors f_a."""


class CoVectorValuedForm(_LeggedForm):
    """Legs along the dual frame f^a."""


def pair_forms(tau: CoVectorValuedForm, u: VectorValuedForm) -> KFormPoint:
    """
    Contract the legs of a covector-valued (n-1)-form with a vector-valued
    1-form: sum_a u^a ^ tau_a, an n-form.  The 1-form goes first so that
    pair_forms(traction_forms(P), U) = (P:U) vol in both n = 2 and n = 3; for
    n = 3 the order is immaterial.
    """
    if tau.dim != u.dim or tau.leg_dim != u.leg_dim:
        raise ValueError("Pairing needs matching dimension and leg count")
    n = tau.dim
    if tau.degree != n - 1 or u.degree != 1:
        raise ValueError(
            f"Pairing expects degrees ({n - 1}, 1), got ({tau.degree}, {u.degree})"
        )
    total = KFormPoint.zeros(n, n)
    for a in range(n):
        total = total + wedge(u.parts[a], tau.parts[a])
    return total
