# frames.py
"""
Cartan moving frames on rectangular chart grids.

Sign conventions (fixed repo-wide):
    first structure equation   d theta^i + omega^i_j ^ theta^j = 0
    second structure equation  Omega^i_j = d omega^i_j + omega^i_k ^ omega^k_j
with omega antisymmetric (orthonormal frames).  A coframe is stored as the
matrix Theta[i, j] = coefficient of dx^j in theta^i, so "coframe rotated by
alpha" means Theta = R(alpha) and then omega^1_2 = d alpha.

Curvilinear examples live on rectangular charts in their own coordinates,
e.g. (r, phi).  Convergence metrics are taken on the interior subgrid, two
cells away from the boundary, where every difference stencil is centred.
"""
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from math import comb
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from exterior import (
    SUPPORTED_DIMS, AXIS_NAMES, KFormPoint, MetricPoint,
    basis, basis_index, permutation_sign, wedge_coeffs,
)

logger = logging.getLogger(__name__)

INTERIOR_MARGIN = 2
SINGULAR_FRAME_TOL = 1e-12


class SingularFrameError(ValueError):
    def __init__(self, node: Tuple[int, ...], message: str):
        super().__init__(f"{message} at node {node}")
        self.node = node


@dataclass(frozen=True)
class ChartGrid:
    """Uniform rectangular grid on a chart; ``bounds`` per axis as (lo, hi)."""
    bounds: Tuple[Tuple[float, float], ...]
    divisions: Tuple[int, ...]

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        divisions = tuple(int(d) for d in self.divisions)
        if len(bounds) not in SUPPORTED_DIMS or len(divisions) != len(bounds):
            raise ValueError(f"Grid needs 2 or 3 axes with matching divisions, got {bounds}, {divisions}")
        for (lo, hi), d in zip(bounds, divisions):
            if hi <= lo:
                raise ValueError(f"Empty axis interval [{lo}, {hi}]")
            if d < 4:
                raise ValueError(f"At least 4 divisions per axis are required, got {d}")
        object.__setattr__(self, 'bounds', bounds)
        object.__setattr__(self, 'divisions', divisions)

    @classmethod
    def uniform(cls, bounds: Sequence[Tuple[float, float]], divisions: int) -> 'ChartGrid':
        return cls(tuple(bounds), tuple(divisions for _ in bounds))

    @property
    def dim(self) -> int:
        return len(self.bounds)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(d + 1 for d in self.divisions)

    @property
    def node_count(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacing(self) -> np.ndarray:
        return np.array([(hi - lo) / d for (lo, hi), d in zip(self.bounds, self.divisions)])

    def axes(self) -> List[np.ndarray]:
        return [np.linspace(lo, hi, d + 1) for (lo, hi), d in zip(self.bounds, self.divisions)]

    def coordinates(self) -> np.ndarray:
        """Node coordinates, shape grid.shape + (n,), 'ij' indexing."""
        return np.stack(np.meshgrid(*self.axes(), indexing='ij'), axis=-1)

    def interior_mask(self, margin: int = INTERIOR_MARGIN) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[tuple(slice(margin, s - margin) for s in self.shape)] = True
        return mask


@dataclass(frozen=True)
class FormFieldGrid:
    """A k-form sampled at every grid node: coeffs has shape grid.shape + (C(n,k),)."""
    grid: ChartGrid
    degree: int
    coeffs: np.ndarray

    def __post_init__(self):
        expected = self.grid.shape + (comb(self.grid.dim, self.degree),)
        coeffs = np.asarray(self.coeffs, dtype=float)
        if coeffs.shape != expected:
            raise ValueError(f"Form field of shape {coeffs.shape}, expected {expected}")
        object.__setattr__(self, 'coeffs', coeffs)

    def at(self, node: Tuple[int, ...]) -> KFormPoint:
        return KFormPoint(self.grid.dim, self.degree, self.coeffs[tuple(node)])

    def max_norm(self, margin: int = 0) -> float:
        values = np.abs(self.coeffs)[self.grid.interior_mask(margin)]
        return float(values.max()) if values.size else 0.0


def numeric_d(form: FormFieldGrid) -> FormFieldGrid:
    """
    Exterior derivative by finite differences: second-order centred in the
    interior, second-order one-sided at boundary nodes.
    """
    grid = form.grid
    n, k = grid.dim, form.degree
    if k >= n:
        raise ValueError(f"Cannot differentiate a {k}-form in dimension {n}")
    h = grid.spacing
    partials = [np.gradient(form.coeffs, h[j], axis=j, edge_order=2) for j in range(n)]
    source_index = basis_index(n, k)
    out = np.zeros(grid.shape + (comb(n, k + 1),))
    for pos, multi in enumerate(basis(n, k + 1)):
        for slot, j in enumerate(multi):
            rest = multi[:slot] + multi[slot + 1:]
            sign = -1.0 if slot % 2 else 1.0
            out[..., pos] += sign * partials[j][..., source_index[rest]]
    return FormFieldGrid(grid, k + 1, out)


@dataclass(frozen=True)
class CoframeSource:
    """Analytic coframe: ``coframe(X)`` -> (..., n, n), ``derivative(X)`` -> (..., n, n, n) with last axis d/dx^k."""
    name: str
    coframe: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]

    def exact_d(self, coords: np.ndarray) -> np.ndarray:
        """Coefficients of d theta^i, shape (..., n, C(n,2))."""
        deriv = self.derivative(coords)
        n = coords.shape[-1]
        out = np.zeros(coords.shape[:-1] + (n, comb(n, 2)))
        for pos, (j, k) in enumerate(basis(n, 2)):
            out[..., pos] = deriv[..., :, k, j] - deriv[..., :, j, k]
        return out


@dataclass(frozen=True)
class CoframeField:
    """Sampled coframe; ``matrix[..., i, j]`` is the dx^j coefficient of theta^i."""
    grid: ChartGrid
    matrix: np.ndarray
    source: Optional[CoframeSource] = None

    def __post_init__(self):
        n = self.grid.dim
        matrix = np.asarray(self.matrix, dtype=float)
        if matrix.shape != self.grid.shape + (n, n):
            raise ValueError(f"Coframe of shape {matrix.shape}, expected {self.grid.shape + (n, n)}")
        dets = np.linalg.det(matrix)
        bad = np.argwhere(dets <= 0.0)
        if bad.size:
            raise SingularFrameError(tuple(int(i) for i in bad[0]), "Coframe is not positively oriented")
        object.__setattr__(self, 'matrix', matrix)

    def component(self, i: int) -> FormFieldGrid:
        return FormFieldGrid(self.grid, 1, self.matrix[..., i, :])

    def exterior_derivative(self, exact: bool = True) -> np.ndarray:
        """d theta^i for every i, shape grid.shape + (n, C(n,2)); exact when a source is attached."""
        if exact and self.source is not None:
            return self.source.exact_d(self.grid.coordinates())
        return np.stack([numeric_d(self.component(i)).coeffs for i in range(self.grid.dim)], axis=-2)


def sample_coframe(source: CoframeSource, grid: ChartGrid) -> CoframeField:
    return CoframeField(grid, source.coframe(grid.coordinates()), source)


def _antisymmetric(values: np.ndarray) -> bool:
    return bool(np.array_equal(values, -np.swapaxes(values, -3, -2)))


def _assemble_antisymmetric(grid: ChartGrid, upper: Dict[Tuple[int, int], np.ndarray], width: int) -> np.ndarray:
    n = grid.dim
    values = np.zeros(grid.shape + (n, n, width))
    for (i, j), coeffs in upper.items():
        values[..., i, j, :] = coeffs
        values[..., j, i, :] = -coeffs
    return values


@dataclass(frozen=True)
class ConnectionField:
    """omega^i_j as 1-form fields: coeffs[..., i, j, :]; antisymmetric exactly as stored."""
    grid: ChartGrid
    coeffs: np.ndarray

    def __post_init__(self):
        n = self.grid.dim
        coeffs = np.asarray(self.coeffs, dtype=float)
        if coeffs.shape != self.grid.shape + (n, n, n):
            raise ValueError(f"Connection of shape {coeffs.shape}, expected {self.grid.shape + (n, n, n)}")
        if not _antisymmetric(coeffs):
            raise ValueError("Connection 1-forms must be antisymmetric in (i, j)")
        object.__setattr__(self, 'coeffs', coeffs)

    @classmethod
    def from_upper(cls, grid: ChartGrid, upper: Dict[Tuple[int, int], np.ndarray]) -> 'ConnectionField':
        return cls(grid, _assemble_antisymmetric(grid, upper, grid.dim))

    @classmethod
    def zeros(cls, grid: ChartGrid) -> 'ConnectionField':
        return cls.from_upper(grid, {})

    def entry(self, i: int, j: int) -> FormFieldGrid:
        return FormFieldGrid(self.grid, 1, self.coeffs[..., i, j, :])


@dataclass(frozen=True)
class CurvatureField:
    """Omega^i_j as 2-form fields: coeffs[..., i, j, :]; antisymmetric in (i, j)."""
    grid: ChartGrid
    coeffs: np.ndarray

    def __post_init__(self):
        n = self.grid.dim
        coeffs = np.asarray(self.coeffs, dtype=float)
        if coeffs.shape != self.grid.shape + (n, n, comb(n, 2)):
            raise ValueError(f"Curvature of shape {coeffs.shape} does not match the grid")
        if not _antisymmetric(coeffs):
            raise ValueError("Curvature 2-forms must be antisymmetric in (i, j)")
        object.__setattr__(self, 'coeffs', coeffs)

    def entry(self, i: int, j: int) -> FormFieldGrid:
        return FormFieldGrid(self.grid, 2, self.coeffs[..., i, j, :])

    def max_norm(self, margin: int = INTERIOR_MARGIN) -> float:
        values = np.abs(self.coeffs)[self.grid.interior_mask(margin)]
        return float(values.max()) if values.size else 0.0


@dataclass(frozen=True)
class MetricField:
    grid: ChartGrid
    g: np.ndarray

    def at(self, node: Tuple[int, ...]) -> MetricPoint:
        return MetricPoint(self.g[tuple(node)])


def _check_nondegenerate(matrices: np.ndarray, what: str):
    n = matrices.shape[-1]
    dets = np.linalg.det(matrices)
    scale = np.max(np.abs(matrices), axis=(-2, -1)) ** n
    bad = np.argwhere(np.abs(dets) < SINGULAR_FRAME_TOL * np.maximum(scale, 1e-300))
    if bad.size:
        raise SingularFrameError(tuple(int(i) for i in bad[0]), f"Singular {what}")


def coframe_from_frame(grid: ChartGrid, frame: np.ndarray) -> CoframeField:
    """Pointwise inverse of the frame matrix (columns are the frame vectors e_j)."""
    frame = np.asarray(frame, dtype=float)
    if frame.shape != grid.shape + (grid.dim, grid.dim):
        raise ValueError(f"Frame of shape {frame.shape} does not match the grid")
    _check_nondegenerate(frame, "frame")
    return CoframeField(grid, np.linalg.inv(frame))


def _second_compound(matrices: np.ndarray) -> np.ndarray:
    """2x2 minors: out[..., K, J] = det(M[K, J]), so theta^K = sum_J out[K, J] dx^J."""
    n = matrices.shape[-1]
    pairs = basis(n, 2)
    out = np.zeros(matrices.shape[:-2] + (len(pairs), len(pairs)))
    for a, (k1, k2) in enumerate(pairs):
        for b, (j1, j2) in enumerate(pairs):
            out[..., a, b] = (matrices[..., k1, j1] * matrices[..., k2, j2]
                              - matrices[..., k1, j2] * matrices[..., k2, j1])
    return out


@lru_cache(maxsize=None)
def _torsion_free_system(n: int) -> np.ndarray:
    """
    Inverse of the constant linear map sending the frame-basis coefficients
    c[p, k] of omega^i_j = c[p, k] theta^k (p enumerates i < j) to the
    frame-basis coefficients of sum_j omega^i_j ^ theta^j.
    """
    pairs = basis(n, 2)
    pair_index = basis_index(n, 2)
    size = n * len(pairs)
    system = np.zeros((size, size))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            p = pair_index[(min(i, j), max(i, j))]
            orient = 1.0 if i < j else -1.0
            for k in range(n):
                sign = permutation_sign((k, j))
                if sign == 0:
                    continue
                K = pair_index[tuple(sorted((k, j)))]
                system[i * len(pairs) + K, p * n + k] += orient * sign
    return np.linalg.inv(system)


def connection_from_coframe(theta: CoframeField) -> ConnectionField:
    """Unique torsion-free antisymmetric connection of the coframe, solved node by node."""
    grid = theta.grid
    n = grid.dim
    _check_nondegenerate(theta.matrix, "coframe")
    dtheta = theta.exterior_derivative(exact=False)           # (..., n, m) in dx^J basis
    compound = _second_compound(theta.matrix)                 # (..., m, m)
    # d theta^i = sum_K b[K, i] theta^K  <=>  dtheta_dx = compound^T b
    frame_coeffs = np.linalg.solve(np.swapaxes(compound, -1, -2), np.swapaxes(dtheta, -1, -2))
    rhs = -np.swapaxes(frame_coeffs, -1, -2).reshape(grid.shape + (-1,))
    solution = np.einsum('uv,...v->...u', _torsion_free_system(n), rhs)
    upper = {}
    for p, (i, j) in enumerate(basis(n, 2)):
        c = solution[..., p * n:(p + 1) * n]
        upper[(i, j)] = np.einsum('...k,...km->...m', c, theta.matrix)
    return ConnectionField.from_upper(grid, upper)


def _connection_wedge_coframe(omega: ConnectionField, theta: CoframeField) -> np.ndarray:
    n = omega.grid.dim
    out = np.zeros(omega.grid.shape + (n, comb(n, 2)))
    for i in range(n):
        for j in range(n):
            out[..., i, :] += wedge_coeffs(omega.coeffs[..., i, j, :], theta.matrix[..., j, :], n, 1, 1)
    return out


def torsion_residual(theta: CoframeField, omega: ConnectionField,
                     margin: int = INTERIOR_MARGIN) -> Tuple[np.ndarray, float]:
    """
    |d theta^i + omega^i_j ^ theta^j| per node (max over i and coefficients),
    and its maximum over the interior subgrid.  d theta is exact when the
    coframe carries an analytic source, otherwise numeric.
    """
    if omega.grid != theta.grid:
        raise ValueError("Coframe and connection live on different grids")
    residual = theta.exterior_derivative(exact=True) + _connection_wedge_coframe(omega, theta)
    per_node = np.max(np.abs(residual), axis=(-2, -1))
    values = per_node[theta.grid.interior_mask(margin)]
    return per_node, float(values.max()) if values.size else 0.0


def curvature(omega: ConnectionField) -> CurvatureField:
    grid = omega.grid
    n = grid.dim
    upper = {}
    for i, j in basis(n, 2):
        total = numeric_d(omega.entry(i, j)).coeffs
        for k in range(n):
            total = total + wedge_coeffs(omega.coeffs[..., i, k, :], omega.coeffs[..., k, j, :], n, 1, 1)
        upper[(i, j)] = total
    return CurvatureField(grid, _assemble_antisymmetric(grid, upper, comb(n, 2)))


def metric_from_coframe(theta: CoframeField) -> MetricField:
    """g = delta_ij theta^i (x) theta^j = Theta^T Theta, symmetrised exactly."""
    g = np.einsum('...ki,...kj->...ij', theta.matrix, theta.matrix)
    return MetricField(theta.grid, 0.5 * (g + np.swapaxes(g, -1, -2)))


def frame_basis_curvature(curv: CurvatureField, theta: CoframeField) -> np.ndarray:
    """Omega^i_j re-expanded in the theta^K basis; for n=2 entry [0,1,0] is the Gauss curvature."""
    compound_t = np.swapaxes(_second_compound(theta.matrix), -1, -2)
    n = theta.grid.dim
    out = np.zeros_like(curv.coeffs)
    for i in range(n):
        for j in range(n):
            out[..., i, j, :] = np.linalg.solve(compound_t, curv.coeffs[..., i, j, :, None])[..., 0]
    return out


@dataclass
class FlatnessReport:
    grid: ChartGrid
    connection: ConnectionField
    curvature: CurvatureField
    frame_curvature: np.ndarray
    torsion_field: np.ndarray
    max_torsion: float
    max_curvature: float
    tolerance: float
    compatible: bool

    def summary(self) -> str:
        verdict = "compatible" if self.compatible else "incompatible"
        return (f"max torsion residual {self.max_torsion:.6e}, max curvature {self.max_curvature:.6e} "
                f"({verdict} at tol {self.tolerance:.1e})")

    def to_frame(self) -> pd.DataFrame:
        """One row per node: coordinates, omega, Omega and the torsion residual."""
        n = self.grid.dim
        coords = self.grid.coordinates().reshape(-1, n)
        columns = {AXIS_NAMES[a]: coords[:, a] for a in range(n)}
        for i, j in basis(n, 2):
            for c, (k,) in enumerate(basis(n, 1)):
                columns[f"omega_{i + 1}{j + 1}_d{AXIS_NAMES[k]}"] = self.connection.coeffs[..., i, j, c].reshape(-1)
            for c, multi in enumerate(basis(n, 2)):
                name = ''.join(AXIS_NAMES[m] for m in multi)
                columns[f"Omega_{i + 1}{j + 1}_d{name}"] = self.curvature.coeffs[..., i, j, c].reshape(-1)
                columns[f"Omega_{i + 1}{j + 1}_frame_{name}"] = self.frame_curvature[..., i, j, c].reshape(-1)
        columns['torsion'] = self.torsion_field.reshape(-1)
        return pd.DataFrame(columns)


def flatness_report(theta: CoframeField, tol: float = 1e-6) -> FlatnessReport:
    """Euclidean realizability diagnostics: connection solve, torsion check, curvature."""
    omega = connection_from_coframe(theta)
    per_node, max_torsion = torsion_residual(theta, omega)
    curv = curvature(omega)
    max_curv = curv.max_norm()
    report = FlatnessReport(
        grid=theta.grid,
        connection=omega,
        curvature=curv,
        frame_curvature=frame_basis_curvature(curv, theta),
        torsion_field=per_node,
        max_torsion=max_torsion,
        max_curvature=max_curv,
        tolerance=tol,
        compatible=max_curv < tol,
    )
    logger.debug(f"Flatness report: {report.summary()}")
    return report


# ---------------------------------------------------------------- frame catalog

def _plane_rotation(angle: np.ndarray, n: int = 2, i: int = 0, j: int = 1, prime: bool = False) -> np.ndarray:
    """Rotation by ``angle`` in the (i, j) coordinate plane, or its derivative in the angle."""
    c, s = np.cos(angle), np.sin(angle)
    out = np.zeros(np.shape(angle) + (n, n))
    if prime:
        c, s = -s, c
    else:
        for k in range(n):
            if k not in (i, j):
                out[..., k, k] = 1.0
    out[..., i, i] = c
    out[..., i, j] = -s
    out[..., j, i] = s
    out[..., j, j] = c
    return out


def _rotation(alpha: np.ndarray) -> np.ndarray:
    return _plane_rotation(alpha)


def _rotation_prime(alpha: np.ndarray) -> np.ndarray:
    return _plane_rotation(alpha, prime=True)


def _rotated_source(name: str, angle: Callable, angle_grad: Callable) -> CoframeSource:
    def coframe(X):
        return _rotation(angle(X))

    def derivative(X):
        return _rotation_prime(angle(X))[..., None] * angle_grad(X)[..., None, None, :]

    return CoframeSource(name, coframe, derivative)


def _cartesian_source() -> CoframeSource:
    def coframe(X):
        n = X.shape[-1]
        return np.broadcast_to(np.eye(n), X.shape[:-1] + (n, n)).copy()

    def derivative(X):
        n = X.shape[-1]
        return np.zeros(X.shape[:-1] + (n, n, n))

    return CoframeSource('cartesian', coframe, derivative)


def _warped_source(name: str, profile: Callable, profile_prime: Callable) -> CoframeSource:
    """theta^1 = dr, theta^2 = f(r) dphi on an (r, phi) chart."""
    def coframe(X):
        out = np.zeros(X.shape[:-1] + (2, 2))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = profile(X[..., 0])
        return out

    def derivative(X):
        out = np.zeros(X.shape[:-1] + (2, 2, 2))
        out[..., 1, 1, 0] = profile_prime(X[..., 0])
        return out

    return CoframeSource(name, coframe, derivative)


def _polar_map_source() -> CoframeSource:
    """theta^i = dF^i for F(r, phi) = (r cos phi, r sin phi)."""
    def coframe(X):
        r, phi = X[..., 0], X[..., 1]
        c, s = np.cos(phi), np.sin(phi)
        return np.stack([np.stack([c, -r * s], axis=-1), np.stack([s, r * c], axis=-1)], axis=-2)

    def derivative(X):
        r, phi = X[..., 0], X[..., 1]
        c, s = np.cos(phi), np.sin(phi)
        zero = np.zeros_like(r)
        d_r = np.stack([np.stack([zero, -s], axis=-1), np.stack([zero, c], axis=-1)], axis=-2)
        d_phi = np.stack([np.stack([-s, -r * c], axis=-1), np.stack([c, -r * s], axis=-1)], axis=-2)
        return np.stack([d_r, d_phi], axis=-1)

    return CoframeSource('polar-map', coframe, derivative)


def _twisted_source() -> CoframeSource:
    """theta = Rz(xy) Rx(yz) dX: a flat 3D coframe whose connection has every component."""
    def angles(X):
        x, y, z = X[..., 0], X[..., 1], X[..., 2]
        zero = np.zeros_like(x)
        return x * y, y * z, np.stack([y, x, zero], axis=-1), np.stack([zero, z, y], axis=-1)

    def coframe(X):
        a, b, _, _ = angles(X)
        return _plane_rotation(a, 3, 0, 1) @ _plane_rotation(b, 3, 1, 2)

    def derivative(X):
        a, b, grad_a, grad_b = angles(X)
        d_a = _plane_rotation(a, 3, 0, 1, prime=True) @ _plane_rotation(b, 3, 1, 2)
        d_b = _plane_rotation(a, 3, 0, 1) @ _plane_rotation(b, 3, 1, 2, prime=True)
        return d_a[..., None] * grad_a[..., None, None, :] + d_b[..., None] * grad_b[..., None, None, :]

    return CoframeSource('twist-3d', coframe, derivative)


@dataclass(frozen=True)
class CatalogEntry:
    source: CoframeSource
    bounds: Tuple[Tuple[float, float], ...]
    description: str
    dims: Tuple[int, ...] = (2,)

    def grid(self, divisions: int, dim: int = 2) -> ChartGrid:
        if dim not in self.dims:
            raise ValueError(f"Frame field '{self.source.name}' is not available in dimension {dim}")
        return ChartGrid.uniform(self.bounds[:dim], divisions)

    def sample(self, divisions: int, dim: int = 2) -> CoframeField:
        return sample_coframe(self.source, self.grid(divisions, dim))


FRAME_CATALOG: Dict[str, CatalogEntry] = {
    'cartesian': CatalogEntry(_cartesian_source(), ((0.0, 1.0),) * 3, "theta^i = dx^i", (2, 3)),
    'rot-xy': CatalogEntry(
        _rotated_source('rot-xy', lambda X: X[..., 0] * X[..., 1],
                        lambda X: np.stack([X[..., 1], X[..., 0]], axis=-1)),
        ((0.0, 1.0), (0.0, 1.0)), "coframe rotated by alpha = xy"),
    'rot-atan2': CatalogEntry(
        _rotated_source('rot-atan2', lambda X: np.arctan2(X[..., 1], X[..., 0]),
                        lambda X: np.stack([-X[..., 1], X[..., 0]], axis=-1)
                        / (X[..., 0] ** 2 + X[..., 1] ** 2)[..., None]),
        ((1.0, 2.0), (0.5, 1.5)), "coframe rotated by alpha = atan2(y, x)"),
    'polar': CatalogEntry(_warped_source('polar', lambda r: r, np.ones_like),
                          ((0.5, 1.5), (0.0, 1.0)), "theta^1 = dr, theta^2 = r dphi (flat)"),
    'polar-map': CatalogEntry(_polar_map_source(), ((0.5, 1.5), (0.0, 1.0)),
                              "pullback of Cartesian coordinates by the polar map (flat)"),
    'sphere': CatalogEntry(_warped_source('sphere', np.sin, np.cos),
                           ((0.5, 1.5), (0.0, 1.0)), "theta^1 = dr, theta^2 = sin r dphi (unit curvature)"),
    'twist-3d': CatalogEntry(_twisted_source(), ((0.0, 1.0),) * 3,
                             "coframe rotated by Rz(xy) Rx(yz) (flat)", (3,)),
}


def catalog_entry(name: str) -> CatalogEntry:
    if name not in FRAME_CATALOG:
        raise ValueError(f"Unknown frame field '{name}'; choose from {sorted(FRAME_CATALOG)}")
    return FRAME_CATALOG[name]


def convergence_slope(h: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(h); nan if any error vanishes."""
    h = np.asarray(h, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if len(h) < 2 or np.any(errors <= 0.0):
        return float('nan')
    return float(np.polyfit(np.log(h), np.log(errors), 1)[0])


def refinement_study(name: str, divisions: Sequence[int], dim: int = 2) -> Tuple[pd.DataFrame, Dict[str, float]]:
    """Run the flatness pipeline on a catalog field at each resolution."""
    entry = catalog_entry(name)
    rows = []
    for div in divisions:
        theta = entry.sample(div, dim)
        report = flatness_report(theta)
        interior = theta.grid.interior_mask()
        frame_k = report.frame_curvature[..., 0, 1, 0][interior] if dim == 2 else np.zeros(1)
        rows.append({
            'divisions': div,
            'h': float(theta.grid.spacing.max()),
            'max_torsion': report.max_torsion,
            'max_curvature': report.max_curvature,
            'frame_curvature_min': float(frame_k.min()),
            'frame_curvature_max': float(frame_k.max()),
        })
        logger.info(f"{name} @ {div} divisions: torsion {report.max_torsion:.3e}, "
                    f"curvature {report.max_curvature:.3e}")
    table = pd.DataFrame(rows)
    slopes = {
        'torsion_slope': convergence_slope(table['h'], table['max_torsion']),
        'curvature_slope': convergence_slope(table['h'], table['max_curvature']),
    }
    return table, slopes


# ---------------------------------------------------------------- export

def save_structured_vtk(path: str, grid: ChartGrid, scalars: Dict[str, np.ndarray], title: str = "frames"):
    """Legacy ASCII STRUCTURED_POINTS file with per-node scalar fields."""
    dims = list(grid.shape) + [1] * (3 - grid.dim)
    origin = [lo for lo, _ in grid.bounds] + [0.0] * (3 - grid.dim)
    spacing = list(grid.spacing) + [1.0] * (3 - grid.dim)
    lines = [
        "# vtk DataFile Version 2.0",
        title,
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        "DIMENSIONS " + " ".join(str(d) for d in dims),
        "ORIGIN " + " ".join(f"{v:.17g}" for v in origin),
        "SPACING " + " ".join(f"{v:.17g}" for v in spacing),
        f"POINT_DATA {grid.node_count}",
    ]
    for name, values in scalars.items():
        values = np.asarray(values, dtype=float)
        if values.shape != grid.shape:
            raise ValueError(f"Scalar field '{name}' has shape {values.shape}, expected {grid.shape}")
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(f"{v:.17g}" for v in values.reshape(-1, order='F'))
    with open(path, 'w') as f:
        f.write("\n".join(lines) + "\n")
