# hw_solver.py
"""
Three-field Hu-Washizu solver on P1 deformations with elementwise-constant
deformation 1-forms Theta and traction forms T.

    E(phi, Theta, T) = sum_e vol_e [ W(Theta_e) + T_e : (dphi_e - Theta_e) ]
                       - sum_v f_v . phi_v

where f collects the constant body force and per-marker tractions integrated
against the P1 hat functions.  The multiplier term is the integral of
pair_forms(traction_forms(T), dphi - Theta), which the pairing identity
reduces to the matrix contraction above.  Dirichlet data are imposed strongly.
"""
import logging
from copy import copy
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.sparse import coo_matrix, csc_matrix
from scipy.sparse.linalg import splu, spsolve

from config import DEFAULT_SOLVER_SETTINGS, HW_LOG_FILE, HW_LOG_LEVEL
from constitutive import EnergyModel, cauchy_from_pk1
from kinematics import C_from_theta, InadmissibleStateError, check_admissible, displacement, dphi, jacobian
from mesh import SimplicialMesh, element_geometry, save_cell_csv, save_vtk

# Configure logging
_handlers: List[logging.Handler] = [logging.StreamHandler()]
if HW_LOG_FILE:
    _handlers.append(logging.FileHandler(HW_LOG_FILE))
logging.basicConfig(
    level=getattr(logging, HW_LOG_LEVEL.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=_handlers
)
logger = logging.getLogger(__name__)


class SolveMode(Enum):
    MONOLITHIC = "monolithic"
    CONDENSED = "condensed"


class KktSolver(Enum):
    ELIMINATE = "eliminate"   # element-local Theta/T blocks eliminated before factorizing
    DIRECT = "direct"         # LU of the full saddle-point matrix


class SingularSystemError(RuntimeError):
    def __init__(self, block: str, detail: str = ""):
        super().__init__(f"Singular Newton system in the {block} block" + (f": {detail}" if detail else ""))
        self.block = block


class NonConvergenceError(RuntimeError):
    def __init__(self, message: str, state: 'HWState', report: 'ConvergenceReport', reason: str = 'max_iter'):
        super().__init__(message)
        self.state = state
        self.report = report
        self.reason = reason


@dataclass
class SolverConfig:
    tol_rel: float = DEFAULT_SOLVER_SETTINGS['tol_rel']
    tol_abs: Optional[float] = DEFAULT_SOLVER_SETTINGS['tol_abs']
    max_iter: int = DEFAULT_SOLVER_SETTINGS['max_iter']
    backtrack: float = DEFAULT_SOLVER_SETTINGS['backtrack']
    sufficient_decrease: float = DEFAULT_SOLVER_SETTINGS['sufficient_decrease']
    max_backtracks: int = DEFAULT_SOLVER_SETTINGS['max_backtracks']
    mode: SolveMode = SolveMode(DEFAULT_SOLVER_SETTINGS['mode'])
    harmonic_lift: bool = DEFAULT_SOLVER_SETTINGS['harmonic_lift']
    kkt_solver: KktSolver = KktSolver(DEFAULT_SOLVER_SETTINGS['kkt_solver'])
    max_load_cuts: int = DEFAULT_SOLVER_SETTINGS['max_load_cuts']

    def __post_init__(self):
        self.mode = SolveMode(self.mode) if not isinstance(self.mode, SolveMode) else self.mode
        self.kkt_solver = KktSolver(self.kkt_solver) if not isinstance(self.kkt_solver, KktSolver) \
            else self.kkt_solver
        if not self.tol_rel > 0 or (self.tol_abs is not None and not self.tol_abs > 0):
            raise ValueError("Solver tolerances must be positive")
        if not 0 < self.backtrack < 1 or not 0 < self.sufficient_decrease < 1:
            raise ValueError("Line-search factors must lie in (0, 1)")
        if self.max_iter < 1 or self.max_backtracks < 0:
            raise ValueError("max_iter must be >= 1 and max_backtracks >= 0")
        if self.max_load_cuts < 0:
            raise ValueError("max_load_cuts must be >= 0")

    @classmethod
    def from_settings(cls, custom: Optional[Dict] = None) -> 'SolverConfig':
        """Defaults updated by any non-None custom settings."""
        effective = dict(DEFAULT_SOLVER_SETTINGS)
        effective.update({k: v for k, v in (custom or {}).items() if v is not None})
        return cls(**effective)

    def absolute_tolerance(self, mu: float, mesh_scale: float) -> float:
        return self.tol_abs if self.tol_abs is not None else 1e-12 * mu * mesh_scale

    def to_dict(self) -> Dict:
        return {
            'tol_rel': self.tol_rel, 'tol_abs': self.tol_abs, 'max_iter': self.max_iter,
            'backtrack': self.backtrack, 'sufficient_decrease': self.sufficient_decrease,
            'max_backtracks': self.max_backtracks, 'mode': self.mode.value,
            'harmonic_lift': self.harmonic_lift, 'kkt_solver': self.kkt_solver.value,
            'max_load_cuts': self.max_load_cuts,
        }


@dataclass
class HWState:
    phi: np.ndarray        # (N, n) vertex positions
    theta: np.ndarray      # (E, n, n) deformation 1-forms
    traction: np.ndarray   # (E, n, n) traction-form coefficients P[a, A]

    def copy(self) -> 'HWState':
        return HWState(self.phi.copy(), self.theta.copy(), self.traction.copy())


@dataclass
class BoundaryData:
    dirichlet: Dict[int, np.ndarray] = field(default_factory=dict)  # vertex -> position, NaN = free
    neumann: Dict[int, np.ndarray] = field(default_factory=dict)    # marker -> traction
    body_force: Optional[np.ndarray] = None

    def add_affine(self, mesh: SimplicialMesh, matrix: np.ndarray, offset: Optional[np.ndarray] = None,
                   markers: Optional[Sequence[int]] = None) -> 'BoundaryData':
        """Prescribe x -> A x + b on marked boundary vertices (all boundary vertices if markers is None)."""
        matrix = np.asarray(matrix, dtype=float)
        offset = np.zeros(mesh.dim) if offset is None else np.asarray(offset, dtype=float)
        if markers is None:
            vertices = np.unique(mesh.boundary_facets)
        else:
            vertices = mesh.vertices_with_markers(markers)
            if vertices.size == 0:
                logger.warning(f"No boundary vertices carry markers {list(markers)}")
        for v in vertices:
            self.dirichlet[int(v)] = matrix @ mesh.vertices[v] + offset
        return self

    @classmethod
    def affine(cls, mesh: SimplicialMesh, matrix: np.ndarray, offset: Optional[np.ndarray] = None,
               markers: Optional[Sequence[int]] = None) -> 'BoundaryData':
        return cls().add_affine(mesh, matrix, offset, markers)

    def constraints(self, mesh: SimplicialMesh) -> Tuple[np.ndarray, np.ndarray]:
        """(mask, values), both (N, n); mask marks constrained components."""
        mask = np.zeros(mesh.vertices.shape, dtype=bool)
        values = np.zeros(mesh.vertices.shape)
        for v, position in self.dirichlet.items():
            position = np.asarray(position, dtype=float)
            if position.shape != (mesh.dim,):
                raise ValueError(f"Dirichlet value for vertex {v} must have {mesh.dim} components")
            if not 0 <= v < mesh.num_vertices:
                raise ValueError(f"Dirichlet vertex {v} out of range")
            fixed = ~np.isnan(position)
            mask[v] = fixed
            values[v, fixed] = position[fixed]
        return mask, values


@dataclass
class ConvergenceReport:
    mode: SolveMode
    history: List[Dict] = field(default_factory=list)
    converged: bool = False
    tolerance: float = 0.0
    message: str = ""
    load_levels: List[float] = field(default_factory=list)  # empty for a single full-load solve

    @property
    def iterations(self) -> int:
        # step 0 rows open a solve or a load level
        return sum(1 for row in self.history if row['step'] > 0)

    @property
    def final_residual(self) -> float:
        return self.history[-1]['residual'] if self.history else float('nan')

    def record(self, iteration: int, blocks: Dict[str, float], step: float):
        total = float(np.sqrt(sum(v ** 2 for v in blocks.values())))
        self.history.append({'iter': iteration, **blocks, 'residual': total, 'step': step})

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=['iter', 'res_phi', 'res_theta', 'res_tau', 'residual', 'step'])

    def save_csv(self, path: str):
        self.to_frame().to_csv(path, index=False, float_format='%.17g')

    def format_text(self) -> str:
        status = "converged" if self.converged else "NOT converged"
        lines = [f"Hu-Washizu solve ({self.mode.value}): {status} after {self.iterations} iterations",
                 f"tolerance {self.tolerance:.3e}, final residual {self.final_residual:.3e}"]
        if self.message:
            lines.append(self.message)
        if self.load_levels:
            lines.append("load levels " + ", ".join(f"{s:.6g}" for s in self.load_levels))
        for row in self.history:
            lines.append(f"  iter {row['iter']:3d}  |R_phi| {row['res_phi']:.3e}  |R_theta| {row['res_theta']:.3e}"
                         f"  |R_tau| {row['res_tau']:.3e}  step {row['step']:.3g}")
        return "\n".join(lines)

    def summary(self) -> Dict:
        return {
            'mode': self.mode.value,
            'converged': self.converged,
            'iterations': self.iterations,
            'final_residual': self.final_residual,
            'tolerance': self.tolerance,
            'load_steps': len(self.load_levels) or 1,
        }


# ---------------------------------------------------------------- loads and functional

def load_vector(mesh: SimplicialMesh, bcs: BoundaryData) -> np.ndarray:
    """Nodal loads f (N, n): body force and tractions integrated against the hat functions."""
    n = mesh.dim
    f = np.zeros(mesh.vertices.shape)
    volumes, _ = mesh.geometry
    if bcs.body_force is not None:
        b = np.asarray(bcs.body_force, dtype=float)
        share = (volumes[:, None] * b[None, :] / (n + 1))[:, None, :]
        np.add.at(f, mesh.elements, np.broadcast_to(share, mesh.elements.shape + (n,)))
    areas = mesh.facet_measures
    for marker in sorted(bcs.neumann):
        t = np.asarray(bcs.neumann[marker], dtype=float)
        chosen = mesh.facet_markers == marker
        if not np.any(chosen):
            logger.warning(f"Neumann marker {marker} matches no boundary facet")
            continue
        facets = mesh.boundary_facets[chosen]
        share = (areas[chosen, None] * t[None, :] / n)[:, None, :]
        np.add.at(f, facets, np.broadcast_to(share, facets.shape + (n,)))
    return f


def assemble_functional(mesh: SimplicialMesh, state: HWState, bcs: BoundaryData, model: EnergyModel) -> float:
    volumes, _ = mesh.geometry
    W = model.energy(state.theta)
    D = dphi(mesh, state.phi)
    multiplier = np.sum(state.traction * (D - state.theta), axis=(-2, -1))
    return float(np.sum(volumes * (W + multiplier)) - np.sum(load_vector(mesh, bcs) * state.phi))


def residual_tau(mesh: SimplicialMesh, state: HWState) -> np.ndarray:
    volumes, _ = mesh.geometry
    return volumes[:, None, None] * (dphi(mesh, state.phi) - state.theta)


def residual_theta(mesh: SimplicialMesh, state: HWState, model: EnergyModel) -> np.ndarray:
    volumes, _ = mesh.geometry
    return volumes[:, None, None] * (model.pk1(state.theta) - state.traction)


def _equilibrium(mesh: SimplicialMesh, traction: np.ndarray) -> np.ndarray:
    volumes, grads = mesh.geometry
    contrib = volumes[:, None, None] * np.einsum('eaA,evA->eva', traction, grads)
    out = np.zeros(mesh.vertices.shape)
    np.add.at(out, mesh.elements, contrib)
    return out


def residual_phi(mesh: SimplicialMesh, state: HWState, bcs: BoundaryData) -> np.ndarray:
    """dE/dphi per vertex, (N, n); Dirichlet-constrained components are zeroed."""
    R = _equilibrium(mesh, state.traction) - load_vector(mesh, bcs)
    mask, _ = bcs.constraints(mesh)
    R[mask] = 0.0
    return R


# ---------------------------------------------------------------- linear algebra

class DofMap:
    """Free deformation components in row-major (vertex, component) order."""

    def __init__(self, mesh: SimplicialMesh, bcs: BoundaryData):
        self.mask, self.values = bcs.constraints(mesh)
        flat = self.mask.reshape(-1)
        self.free = np.flatnonzero(~flat)
        self.reduced = -np.ones(flat.size, dtype=int)
        self.reduced[self.free] = np.arange(self.free.size)

    @property
    def n_free(self) -> int:
        return self.free.size

    def impose(self, phi: np.ndarray) -> np.ndarray:
        phi = np.array(phi, dtype=float)
        phi[self.mask] = self.values[self.mask]
        return phi

    def at_level(self, mesh: SimplicialMesh, level: float) -> 'DofMap':
        """Same constraints with prescribed displacements scaled by ``level``."""
        if level == 1.0:
            return self
        scaled = copy(self)
        scaled.values = np.where(self.mask, mesh.vertices + level * (self.values - mesh.vertices), 0.0)
        return scaled

    def pins_rigid_modes(self, mesh: SimplicialMesh) -> bool:
        """True when no infinitesimal rigid motion vanishes on every constrained component."""
        modes = rigid_modes(mesh)[self.mask.reshape(-1)]
        return modes.shape[0] > 0 and np.linalg.matrix_rank(modes) == modes.shape[1]


def rigid_modes(mesh: SimplicialMesh) -> np.ndarray:
    """Translations and infinitesimal rotations about the centroid as columns of an (N*n, r) array."""
    n = mesh.dim
    X = mesh.vertices - mesh.vertices.mean(axis=0)
    modes = []
    for a in range(n):
        u = np.zeros_like(X)
        u[:, a] = 1.0
        modes.append(u.reshape(-1))
    for a in range(n):
        for b in range(a + 1, n):
            u = np.zeros_like(X)
            u[:, a], u[:, b] = -X[:, b], X[:, a]
            modes.append(u.reshape(-1))
    return np.stack(modes, axis=1)


def _sparse(rows: List[np.ndarray], cols: List[np.ndarray], vals: List[np.ndarray], size: int) -> csc_matrix:
    return coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(size, size)).tocsc()


def _equilibrium_block(mesh: SimplicialMesh, dofs: DofMap, col_offset: int):
    """Entries of d(residual_phi)/dT: vol_e * delta_ab * grad_hat_v[A]."""
    n = mesh.dim
    volumes, grads = mesh.geometry
    E = mesh.num_elements
    e, v, a, A = np.meshgrid(np.arange(E), np.arange(n + 1), np.arange(n), np.arange(n), indexing='ij')
    rows = dofs.reduced[mesh.elements[e, v] * n + a]
    cols = col_offset + e * n * n + a * n + A
    vals = volumes[e] * grads[e, v, A]
    keep = rows >= 0
    return rows[keep], cols[keep], vals[keep]


def assemble_kkt(mesh: SimplicialMesh, state: HWState, bcs: BoundaryData, model: EnergyModel,
                 dofs: Optional[DofMap] = None) -> csc_matrix:
    """
    Monolithic Newton matrix on (phi_free, Theta, T):

        [ 0    0    B ]
        [ 0    H   -V ]
        [ B^T -V    0 ]
    """
    dofs = dofs or DofMap(mesh, bcs)
    volumes, _ = mesh.geometry
    n, E = mesh.dim, mesh.num_elements
    m = n * n
    off_theta = dofs.n_free
    off_tau = off_theta + E * m
    size = off_tau + E * m

    b_rows, b_cols, b_vals = _equilibrium_block(mesh, dofs, off_tau)

    H = volumes[:, None, None] * model.tangent(state.theta)
    base = off_theta + np.arange(E)[:, None, None] * m
    h_rows = np.broadcast_to(base + np.arange(m)[None, :, None], H.shape).reshape(-1)
    h_cols = np.broadcast_to(base + np.arange(m)[None, None, :], H.shape).reshape(-1)

    diag = np.arange(E * m)
    v_vals = -np.repeat(volumes, m)

    return _sparse(
        [b_rows, b_cols, h_rows, off_theta + diag, off_tau + diag],
        [b_cols, b_rows, h_cols, off_tau + diag, off_theta + diag],
        [b_vals, b_vals, H.reshape(-1), v_vals, v_vals],
        size,
    )


def assemble_condensed(mesh: SimplicialMesh, phi: np.ndarray, bcs: BoundaryData, model: EnergyModel,
                       dofs: Optional[DofMap] = None) -> csc_matrix:
    """Displacement stiffness sum_e vol_e G_e^T A(dphi_e) G_e on free components."""
    return _displacement_stiffness(mesh, dphi(mesh, phi), model, dofs or DofMap(mesh, bcs))


def _displacement_stiffness(mesh: SimplicialMesh, theta: np.ndarray, model: EnergyModel,
                            dofs: DofMap) -> csc_matrix:
    n = mesh.dim
    volumes, grads = mesh.geometry
    A = model.tangent_tensor(theta)
    Ke = volumes[:, None, None, None, None] * np.einsum('evA,eaAbB,ewB->evawb', grads, A, grads)
    k = (n + 1) * n
    Ke = Ke.reshape(-1, k, k)
    local = (mesh.elements[:, :, None] * n + np.arange(n)[None, None, :]).reshape(-1, k)
    local = dofs.reduced[local]
    rows = np.broadcast_to(local[:, :, None], Ke.shape)
    cols = np.broadcast_to(local[:, None, :], Ke.shape)
    keep = (rows >= 0) & (cols >= 0)
    return _sparse([rows[keep]], [cols[keep]], [Ke[keep]], dofs.n_free)


def _factor_solve(K: csc_matrix, rhs: np.ndarray, diagnose: Callable[[], Tuple[str, str]]) -> np.ndarray:
    if K.shape[0] == 0:
        return np.zeros(0)
    try:
        x = splu(K).solve(rhs)
    except RuntimeError as e:
        block, detail = diagnose()
        raise SingularSystemError(block, detail) from e
    if not np.all(np.isfinite(x)):
        block, detail = diagnose()
        raise SingularSystemError(block, detail)
    return x


def harmonic_lift(mesh: SimplicialMesh, dofs: DofMap) -> np.ndarray:
    """
    Reference positions plus the discrete-harmonic extension of the Dirichlet
    displacement, component by component.  Affine data are reproduced exactly.
    """
    n = mesh.dim
    volumes, grads = mesh.geometry
    Ke = volumes[:, None, None] * np.einsum('evA,ewA->evw', grads, grads)
    rows = np.broadcast_to(mesh.elements[:, :, None], Ke.shape).reshape(-1)
    cols = np.broadcast_to(mesh.elements[:, None, :], Ke.shape).reshape(-1)
    L = coo_matrix((Ke.reshape(-1), (rows, cols)), shape=(mesh.num_vertices,) * 2).tocsr()
    u = np.zeros(mesh.vertices.shape)
    target = dofs.values - mesh.vertices
    for a in range(n):
        fixed = dofs.mask[:, a]
        if not fixed.any():
            continue
        free = np.flatnonzero(~fixed)
        u[fixed, a] = target[fixed, a]
        if free.size:
            rhs = -L[free][:, np.flatnonzero(fixed)] @ u[fixed, a]
            u[free, a] = np.atleast_1d(spsolve(L[free][:, free].tocsc(), rhs))
    return dofs.impose(mesh.vertices + u)


def eliminated_kkt_step(mesh: SimplicialMesh, state: HWState, model: EnergyModel, dofs: DofMap,
                        residual: np.ndarray, diagnose: Callable[[], Tuple[str, str]]) -> np.ndarray:
    """
    Solution of the monolithic Newton system with the element-local Theta and
    T rows eliminated first.  With V = diag(vol) those rows give

        dTheta = dphi(dphi_free) + R_tau / vol
        dT     = (H dTheta + R_theta) / vol

    and the remaining phi rows carry sum_e vol_e G_e^T A(Theta_e) G_e.
    """
    n, E = mesh.dim, mesh.num_elements
    m = n * n
    nf = dofs.n_free
    volumes, _ = mesh.geometry
    v = volumes[:, None]
    r_phi = residual[:nf]
    r_theta = residual[nf:nf + E * m].reshape(E, m)
    r_tau = residual[nf + E * m:].reshape(E, m)
    H = volumes[:, None, None] * model.tangent(state.theta)

    lifted = (np.einsum('eij,ej->ei', H, r_tau / v) + r_theta) / v
    rhs = -r_phi - _equilibrium(mesh, lifted.reshape(E, n, n)).reshape(-1)[dofs.free]
    d_phi = _factor_solve(_displacement_stiffness(mesh, state.theta, model, dofs), rhs, diagnose)

    full = np.zeros(mesh.vertices.size)
    full[dofs.free] = d_phi
    d_theta = dphi(mesh, full.reshape(mesh.vertices.shape)).reshape(E, m) + r_tau / v
    d_tau = (np.einsum('eij,ej->ei', H, d_theta) + r_theta) / v
    return np.concatenate([d_phi, d_theta.reshape(-1), d_tau.reshape(-1)])


# ---------------------------------------------------------------- solver

class HWSolver:
    """Damped Newton driver for the stationarity equations of the Hu-Washizu functional."""

    def __init__(self, mesh: SimplicialMesh, bcs: BoundaryData, model: EnergyModel,
                 config: Optional[SolverConfig] = None):
        self.mesh = mesh
        self.bcs = bcs
        self.model = model
        self.config = config or SolverConfig()
        self.model.params.validate(mesh.dim)
        self._full_dofs = DofMap(mesh, bcs)
        self._full_loads = load_vector(mesh, bcs)
        self.dofs = self._full_dofs
        self.loads = self._full_loads
        self.pinned = self.dofs.pins_rigid_modes(mesh)
        if not self.pinned:
            logger.warning("Dirichlet data leave rigid modes free; Newton systems will be singular")
        self.tol_abs = self.config.absolute_tolerance(model.params.mu, mesh.scale)
        logger.info(f"Solver ready: {mesh.num_elements} elements, {self.dofs.n_free} free deformation dofs, "
                    f"mode {self.config.mode.value}, model {model!r}")

    # -- states

    def initial_state(self, guess: Optional[HWState] = None) -> HWState:
        if guess is not None:
            phi = self.dofs.impose(guess.phi)
            theta = np.array(guess.theta, dtype=float)
            traction = np.array(guess.traction, dtype=float)
        else:
            phi = harmonic_lift(self.mesh, self.dofs) if self.config.harmonic_lift \
                else self.dofs.impose(self.mesh.vertices)
            theta = dphi(self.mesh, phi)
            check_admissible(theta)
            traction = self.model.pk1(theta)
        if self.config.mode is SolveMode.CONDENSED:
            return self._condensed_state(phi)
        check_admissible(theta)
        return HWState(phi, theta, traction)

    def _condensed_state(self, phi: np.ndarray) -> HWState:
        theta = dphi(self.mesh, phi)
        return HWState(phi, theta, self.model.pk1(theta))

    def _set_load_level(self, level: float):
        self.dofs = self._full_dofs.at_level(self.mesh, level)
        self.loads = level * self._full_loads if level != 1.0 else self._full_loads

    # -- residuals

    def _phi_residual(self, state: HWState) -> np.ndarray:
        return (_equilibrium(self.mesh, state.traction) - self.loads).reshape(-1)[self.dofs.free]

    def residual_blocks(self, state: HWState) -> Tuple[np.ndarray, Dict[str, float]]:
        r_phi = self._phi_residual(state)
        if self.config.mode is SolveMode.CONDENSED:
            vector = r_phi
            r_theta = r_tau = np.zeros(0)
        else:
            r_theta = residual_theta(self.mesh, state, self.model).reshape(-1)
            r_tau = residual_tau(self.mesh, state).reshape(-1)
            vector = np.concatenate([r_phi, r_theta, r_tau])
        blocks = {'res_phi': float(np.linalg.norm(r_phi)),
                  'res_theta': float(np.linalg.norm(r_theta)),
                  'res_tau': float(np.linalg.norm(r_tau))}
        return vector, blocks

    # -- Newton direction

    def _diagnose_monolithic(self, state: HWState) -> Tuple[str, str]:
        tangents = self.model.tangent(state.theta)
        conditioning = np.linalg.cond(tangents)
        bad = np.flatnonzero(~(conditioning < 1e14))
        if bad.size:
            return 'theta', f"element tangent singular on elements {bad[:10].tolist()}"
        return 'phi', "rigid modes not removed by the Dirichlet data"

    def _direction(self, state: HWState, residual: np.ndarray):
        if not self.pinned:
            raise SingularSystemError('phi', "rigid modes not removed by the Dirichlet data")
        if self.config.mode is SolveMode.CONDENSED:
            K = assemble_condensed(self.mesh, state.phi, self.bcs, self.model, self.dofs)
            return _factor_solve(K, -residual,
                                 lambda: ('phi', "rigid modes not removed by the Dirichlet data"))
        if self.config.kkt_solver is KktSolver.ELIMINATE:
            return eliminated_kkt_step(self.mesh, state, self.model, self.dofs, residual,
                                       lambda: self._diagnose_monolithic(state))
        K = assemble_kkt(self.mesh, state, self.bcs, self.model, self.dofs)
        return _factor_solve(K, -residual, lambda: self._diagnose_monolithic(state))

    def _trial(self, state: HWState, delta: np.ndarray, alpha: float) -> HWState:
        nf = self.dofs.n_free
        phi = state.phi.copy()
        phi.reshape(-1)[self.dofs.free] += alpha * delta[:nf]
        if self.config.mode is SolveMode.CONDENSED:
            theta = dphi(self.mesh, phi)
            return HWState(phi, theta, state.traction)
        size = state.theta.size
        theta = state.theta + alpha * delta[nf:nf + size].reshape(state.theta.shape)
        traction = state.traction + alpha * delta[nf + size:].reshape(state.traction.shape)
        return HWState(phi, theta, traction)

    # -- main loop

    def solve(self, guess: Optional[HWState] = None) -> Tuple[HWState, ConvergenceReport]:
        cfg = self.config
        state = self.initial_state(guess)
        report = ConvergenceReport(cfg.mode)
        residual, _ = self.residual_blocks(state)
        r0 = float(np.linalg.norm(residual))
        report.tolerance = max(cfg.tol_rel * r0, self.tol_abs)
        logger.info(f"iter 0: residual {r0:.3e} (target {report.tolerance:.3e})")
        try:
            state = self._newton(state, report)
        except NonConvergenceError as e:
            if guess is not None or e.reason != 'line_search' or cfg.max_load_cuts == 0:
                raise
            logger.warning(f"{e}; restarting from the reference configuration with load stepping")
            return self.solve_with_load_steps(report.tolerance)
        report.converged = True
        logger.info(f"Converged in {report.iterations} iterations (residual {report.final_residual:.3e})")
        return state, report

    def _newton(self, state: HWState, report: ConvergenceReport) -> HWState:
        """Newton iterations at the current load level until the report's tolerance is met."""
        cfg = self.config
        residual, blocks = self.residual_blocks(state)
        r = float(np.linalg.norm(residual))
        offset = report.iterations
        report.record(offset, blocks, 0.0)

        iteration = 0
        while r > report.tolerance:
            if iteration >= cfg.max_iter:
                report.message = f"max_iter={cfg.max_iter} reached with residual {r:.3e}"
                logger.error(report.message)
                raise NonConvergenceError(report.message, state, report)
            iteration += 1
            delta = self._direction(state, residual)

            alpha = 1.0
            accepted = None
            for attempt in range(cfg.max_backtracks + 1):
                trial = self._trial(state, delta, alpha)
                if np.any(~(jacobian(trial.theta) > 0)):
                    logger.debug(f"iter {iteration}: step {alpha:.3g} rejected (non-positive Jacobian)")
                    alpha *= cfg.backtrack
                    continue
                if cfg.mode is SolveMode.CONDENSED:
                    trial = self._condensed_state(trial.phi)
                trial_residual, trial_blocks = self.residual_blocks(trial)
                r_trial = float(np.linalg.norm(trial_residual))
                if r_trial <= (1.0 - cfg.sufficient_decrease * alpha) * r:
                    accepted = (trial, trial_residual, trial_blocks, r_trial)
                    break
                logger.debug(f"iter {iteration}: step {alpha:.3g} rejected (residual {r_trial:.3e} vs {r:.3e})")
                alpha *= cfg.backtrack

            if accepted is None:
                report.message = f"line search exhausted at iteration {offset + iteration} (residual {r:.3e})"
                logger.warning(report.message)
                raise NonConvergenceError(report.message, state, report, 'line_search')

            state, residual, blocks, r = accepted
            report.record(offset + iteration, blocks, alpha)
            logger.info(f"iter {offset + iteration}: |R_phi| {blocks['res_phi']:.3e} "
                        f"|R_theta| {blocks['res_theta']:.3e} |R_tau| {blocks['res_tau']:.3e} step {alpha:.3g}")
        return state

    def solve_with_load_steps(self, tolerance: Optional[float] = None) -> Tuple[HWState, ConvergenceReport]:
        """
        Ramp the prescribed displacements and loads from the unloaded reference
        configuration, starting with two increments and halving the increment
        whenever a level fails, at most ``max_load_cuts`` times.  The default
        tolerance is the one a direct solve from the initial guess would use.
        """
        cfg = self.config
        if tolerance is None:
            residual, _ = self.residual_blocks(self.initial_state())
            tolerance = max(cfg.tol_rel * float(np.linalg.norm(residual)), self.tol_abs)
        report = ConvergenceReport(cfg.mode, tolerance=tolerance)
        state = self._condensed_state(self.mesh.vertices.copy())
        level, increment, cuts = 0.0, 0.5, 0
        try:
            while level < 1.0:
                target = min(1.0, level + increment)
                self._set_load_level(target)
                mark = len(report.history)
                try:
                    start = self._condensed_state(self.dofs.impose(state.phi))
                    state = self._newton(start, report)
                except (NonConvergenceError, InadmissibleStateError) as e:
                    del report.history[mark:]
                    cuts += 1
                    if cuts > cfg.max_load_cuts:
                        report.message = (f"load stepping stalled at level {level:.6g} "
                                          f"after {cfg.max_load_cuts} cuts: {e}")
                        logger.error(report.message)
                        raise NonConvergenceError(report.message, state, report, 'load_stepping')
                    increment *= 0.5
                    logger.info(f"Load level {target:.6g} failed; increment cut to {increment:.6g}")
                    continue
                level = target
                report.load_levels.append(level)
                logger.info(f"Load level {level:.6g} converged ({report.iterations} iterations so far)")
        finally:
            self._set_load_level(1.0)
        report.message = f"converged by load stepping over {len(report.load_levels)} levels"
        report.converged = True
        logger.info(report.message)
        return state, report


def newton_solve(mesh: SimplicialMesh, bcs: BoundaryData, model: EnergyModel,
                 config: Optional[SolverConfig] = None,
                 guess: Optional[HWState] = None) -> Tuple[HWState, ConvergenceReport]:
    config = config or SolverConfig()
    if config.mode is not SolveMode.MONOLITHIC:
        config = SolverConfig(**{**config.to_dict(), 'mode': SolveMode.MONOLITHIC})
    return HWSolver(mesh, bcs, model, config).solve(guess)


def condensed_solve(mesh: SimplicialMesh, bcs: BoundaryData, model: EnergyModel,
                    config: Optional[SolverConfig] = None,
                    guess: Optional[HWState] = None) -> Tuple[HWState, ConvergenceReport]:
    config = config or SolverConfig()
    if config.mode is not SolveMode.CONDENSED:
        config = SolverConfig(**{**config.to_dict(), 'mode': SolveMode.CONDENSED})
    return HWSolver(mesh, bcs, model, config).solve(guess)


# ---------------------------------------------------------------- diagnostics and output

def incompatibility_probe(mesh: SimplicialMesh, model: EnergyModel, epsilon: float, element: int = 0,
                          direction: Optional[np.ndarray] = None,
                          phi: Optional[np.ndarray] = None) -> Tuple[np.ndarray, float]:
    """
    Equilibrium residual of an unloaded body whose Theta is pushed off dphi by
    epsilon * direction on one element, with T = pk1(Theta).
    """
    n = mesh.dim
    phi = mesh.vertices.copy() if phi is None else np.asarray(phi, dtype=float)
    if direction is None:
        direction = np.zeros((n, n))
        direction[0, 1] = 1.0
    geometry = element_geometry(mesh, element)
    theta = dphi(mesh, phi)
    theta[element] += epsilon * np.asarray(direction, dtype=float)
    logger.debug(f"Probing element {element} (volume {geometry.volume:.3e}) with epsilon {epsilon:.3e}")
    state = HWState(phi, theta, model.pk1(theta))
    R = residual_phi(mesh, state, BoundaryData())
    return R, float(np.linalg.norm(R))


def element_fields(mesh: SimplicialMesh, state: HWState, model: EnergyModel) -> Dict[str, np.ndarray]:
    J = check_admissible(state.theta)
    return {
        'theta': state.theta,
        'traction': state.traction,
        'C': C_from_theta(state.theta),
        'J': J,
        'W': model.energy(state.theta),
        'sigma': cauchy_from_pk1(state.traction, state.theta),
        'compatibility': dphi(mesh, state.phi) - state.theta,
    }


def export_solution(prefix: str, mesh: SimplicialMesh, state: HWState, model: EnergyModel,
                    report: ConvergenceReport):
    """Write <prefix>.vtk, <prefix>_cells.csv, <prefix>_history.csv and <prefix>_report.txt."""
    point_data = {'position': state.phi, 'displacement': displacement(mesh, state.phi)}
    cell_data = element_fields(mesh, state, model)
    save_vtk(f"{prefix}.vtk", mesh, point_data, cell_data)
    save_cell_csv(f"{prefix}_cells.csv", mesh, cell_data)
    report.save_csv(f"{prefix}_history.csv")
    with open(f"{prefix}_report.txt", 'w') as f:
        f.write(report.format_text() + "\n")
    logger.info(f"Wrote {prefix}.vtk, {prefix}_cells.csv, {prefix}_history.csv, {prefix}_report.txt")
