# kinematics.py
"""
Deformation quantities written through the deformation 1-forms.  The deformed
frame is the fixed Cartesian basis, so the per-element matrix Theta[a, A]
(row a = deformed leg, column A = reference coordinate) is the matrix of F.
"""
import logging
from typing import Sequence, Tuple

import numpy as np

from mesh import SimplicialMesh

logger = logging.getLogger(__name__)


class InadmissibleStateError(ValueError):
    """Raised when some element has J = det(Theta) <= 0."""

    def __init__(self, elements: Sequence[int], message: str = ""):
        self.elements = [int(e) for e in elements]
        shown = self.elements[:10]
        more = "" if len(self.elements) <= 10 else f" (+{len(self.elements) - 10} more)"
        super().__init__(message or f"Non-positive Jacobian on elements {shown}{more}")


def _check_positions(mesh: SimplicialMesh, phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    if phi.shape != mesh.vertices.shape:
        raise ValueError(f"Deformation must have shape {mesh.vertices.shape}, got {phi.shape}")
    return phi


def dphi(mesh: SimplicialMesh, phi: np.ndarray) -> np.ndarray:
    """Per-element differential of the P1 deformation, shape (E, n, n)."""
    phi = _check_positions(mesh, phi)
    _, grads = mesh.geometry
    return np.einsum('eva,evA->eaA', phi[mesh.elements], grads)


def C_from_theta(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    C = np.swapaxes(theta, -1, -2) @ theta
    return 0.5 * (C + np.swapaxes(C, -1, -2))


def green_lagrange(theta: np.ndarray) -> np.ndarray:
    C = C_from_theta(theta)
    return 0.5 * (C - np.eye(C.shape[-1]))


def jacobian(theta: np.ndarray) -> np.ndarray:
    return np.linalg.det(np.asarray(theta, dtype=float))


def check_admissible(theta: np.ndarray) -> np.ndarray:
    """Return J per element, raising InadmissibleStateError if any J <= 0."""
    J = np.atleast_1d(jacobian(theta))
    bad = np.flatnonzero(~(J > 0))
    if bad.size:
        raise InadmissibleStateError(bad)
    return J


def displacement(mesh: SimplicialMesh, phi: np.ndarray) -> np.ndarray:
    return _check_positions(mesh, phi) - mesh.vertices


def compatibility_residual(mesh: SimplicialMesh, phi: np.ndarray,
                           theta: np.ndarray) -> Tuple[np.ndarray, float]:
    """R_e = dphi_e - Theta_e and the volume-weighted L2 norm of R."""
    theta = np.asarray(theta, dtype=float)
    D = dphi(mesh, phi)
    if theta.shape != D.shape:
        raise ValueError(f"Theta must have shape {D.shape}, got {theta.shape}")
    R = D - theta
    volumes, _ = mesh.geometry
    norm = float(np.sqrt(np.sum(volumes * np.sum(R * R, axis=(-1, -2)))))
    return R, norm
