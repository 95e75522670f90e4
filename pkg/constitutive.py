# constitutive.py
"""
Stored-energy models on the deformation 1-forms Theta and the traction
(n-1)-forms built from their derivative.

The traction form of leg a is tau_a = sum_A P[a, A] *dX^A with the Euclidean
reference Hodge star, so P = dW/dTheta is the first Piola-Kirchhoff matrix.
With the deformed frame fixed and orthonormal this derivative is the
Doyle-Ericksen-type formula for the covector part of the stress form.

All model methods accept a single (n, n) matrix or a batch (..., n, n).
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Type

import numpy as np

from exterior import CoVectorValuedForm, hodge_matrix
from kinematics import check_admissible, green_lagrange

logger = logging.getLogger(__name__)


class EnergyTag(Enum):
    SVK = "svk"
    NEOHOOKEAN = "neohookean"


@dataclass(frozen=True)
class MaterialParams:
    lam: float
    mu: float

    def validate(self, n: int) -> 'MaterialParams':
        if not self.mu > 0:
            raise ValueError(f"Shear modulus mu must be positive, got {self.mu}")
        if not self.lam + 2.0 * self.mu / n > 0:
            raise ValueError(f"lambda + 2 mu / {n} must be positive (lambda={self.lam}, mu={self.mu})")
        return self

    @classmethod
    def from_young_poisson(cls, young: float, poisson: float) -> 'MaterialParams':
        if not young > 0 or not -1.0 < poisson < 0.5:
            raise ValueError(f"Need E > 0 and -1 < nu < 0.5, got E={young}, nu={poisson}")
        lam = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson))
        mu = young / (2.0 * (1.0 + poisson))
        return cls(lam, mu)

    def to_dict(self) -> Dict[str, float]:
        return {'lambda': self.lam, 'mu': self.mu}


class EnergyModel:
    """Base class for hyperelastic stored energies W(Theta)."""

    tag: EnergyTag = None

    def __init__(self, params: MaterialParams):
        self.params = params

    def __repr__(self):
        return f"{type(self).__name__}(lam={self.params.lam}, mu={self.params.mu})"

    def _prepare(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.ndim < 2 or theta.shape[-1] != theta.shape[-2]:
            raise ValueError(f"Theta must be (..., n, n), got {theta.shape}")
        check_admissible(theta.reshape((-1,) + theta.shape[-2:]))
        return theta

    def energy(self, theta) -> np.ndarray:
        raise NotImplementedError

    def pk1(self, theta) -> np.ndarray:
        raise NotImplementedError

    def tangent_tensor(self, theta) -> np.ndarray:
        """dP[a, A] / dTheta[b, B] as (..., n, n, n, n)."""
        raise NotImplementedError

    def tangent(self, theta) -> np.ndarray:
        """Tangent flattened to (..., n*n, n*n) with row-major (a, A) index a*n + A."""
        A = self.tangent_tensor(theta)
        n = A.shape[-1]
        return A.reshape(A.shape[:-4] + (n * n, n * n))


class SaintVenantKirchhoff(EnergyModel):
    """W = (lam/2)(tr E)^2 + mu tr(E^2), E = (Theta^T Theta - I) / 2."""

    tag = EnergyTag.SVK

    def _second_piola(self, theta: np.ndarray) -> np.ndarray:
        E = green_lagrange(theta)
        n = theta.shape[-1]
        trE = np.asarray(np.trace(E, axis1=-2, axis2=-1))
        return self.params.lam * trE[..., None, None] * np.eye(n) + 2.0 * self.params.mu * E

    def energy(self, theta):
        theta = self._prepare(theta)
        E = green_lagrange(theta)
        trE = np.asarray(np.trace(E, axis1=-2, axis2=-1))
        return 0.5 * self.params.lam * trE ** 2 + self.params.mu * np.sum(E * E, axis=(-2, -1))

    def pk1(self, theta):
        theta = self._prepare(theta)
        return theta @ self._second_piola(theta)

    def tangent_tensor(self, theta):
        theta = self._prepare(theta)
        n = theta.shape[-1]
        lam, mu = self.params.lam, self.params.mu
        S = self._second_piola(theta)
        eye = np.eye(n)
        left = theta @ np.swapaxes(theta, -1, -2)
        return (np.einsum('ab,...BA->...aAbB', eye, S)
                + lam * np.einsum('...aA,...bB->...aAbB', theta, theta)
                + mu * np.einsum('...ab,AB->...aAbB', left, eye)
                + mu * np.einsum('...aB,...bA->...aAbB', theta, theta))


class NeoHookean(EnergyModel):
    """Compressible: W = (mu/2)(tr C - n) - mu ln J + (lam/2)(ln J)^2."""

    tag = EnergyTag.NEOHOOKEAN

    def energy(self, theta):
        theta = self._prepare(theta)
        n = theta.shape[-1]
        lnJ = np.asarray(np.log(np.linalg.det(theta)))
        trC = np.sum(theta * theta, axis=(-2, -1))
        return (0.5 * self.params.mu * (trC - n) - self.params.mu * lnJ
                + 0.5 * self.params.lam * lnJ ** 2)

    def pk1(self, theta):
        theta = self._prepare(theta)
        lnJ = np.asarray(np.log(np.linalg.det(theta)))
        inv_t = np.swapaxes(np.linalg.inv(theta), -1, -2)
        return (self.params.mu * (theta - inv_t)
                + self.params.lam * lnJ[..., None, None] * inv_t)

    def tangent_tensor(self, theta):
        theta = self._prepare(theta)
        n = theta.shape[-1]
        lam, mu = self.params.lam, self.params.mu
        lnJ = np.asarray(np.log(np.linalg.det(theta)))
        G = np.linalg.inv(theta)
        eye = np.eye(n)
        coeff = (mu - lam * lnJ)[..., None, None, None, None]
        return (mu * np.einsum('ab,AB->aAbB', eye, eye)
                + coeff * np.einsum('...Ab,...Ba->...aAbB', G, G)
                + lam * np.einsum('...Aa,...Bb->...aAbB', G, G))


ENERGY_MODELS: Dict[EnergyTag, Type[EnergyModel]] = {
    EnergyTag.SVK: SaintVenantKirchhoff,
    EnergyTag.NEOHOOKEAN: NeoHookean,
}


def make_energy_model(tag, params: MaterialParams) -> EnergyModel:
    try:
        tag = EnergyTag(tag) if not isinstance(tag, EnergyTag) else tag
    except ValueError:
        raise ValueError(f"Unknown material '{tag}' (expected one of {[t.value for t in EnergyTag]})")
    return ENERGY_MODELS[tag](params)


def energy(model: EnergyModel, theta) -> np.ndarray:
    return model.energy(theta)


def pk1(model: EnergyModel, theta) -> np.ndarray:
    return model.pk1(theta)


def tangent(model: EnergyModel, theta) -> np.ndarray:
    return model.tangent(theta)


def traction_forms(P: np.ndarray) -> CoVectorValuedForm:
    """tau_a = sum_A P[a, A] *dX^A on the Euclidean reference chart."""
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    if P.shape != (n, n):
        raise ValueError(f"P must be square, got {P.shape}")
    star = hodge_matrix(n, 1, np.eye(n))
    return CoVectorValuedForm.from_matrix(P @ star.T, n - 1)


def form_to_matrix(tau: CoVectorValuedForm) -> np.ndarray:
    """Inverse of traction_forms: P[a] = (-1)^(n-1) *tau_a."""
    n = tau.dim
    if tau.degree != n - 1:
        raise ValueError(f"Traction forms have degree {n - 1}, got {tau.degree}")
    star = hodge_matrix(n, n - 1, np.eye(n))
    return (-1) ** (n - 1) * tau.matrix() @ star.T


def cauchy_from_pk1(P: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """sigma = J^-1 P Theta^T."""
    theta = np.asarray(theta, dtype=float)
    J = check_admissible(theta.reshape((-1,) + theta.shape[-2:])).reshape(theta.shape[:-2])
    return (np.asarray(P, dtype=float) @ np.swapaxes(theta, -1, -2)) / np.asarray(J)[..., None, None]


def second_piola(P: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """S = Theta^-1 P."""
    theta = np.asarray(theta, dtype=float)
    check_admissible(theta.reshape((-1,) + theta.shape[-2:]))
    return np.linalg.solve(theta, np.asarray(P, dtype=float))


def cauchy_invariants(sigma: np.ndarray) -> np.ndarray:
    """(trace, second invariant, determinant) per matrix, shape (..., 3)."""
    sigma = np.asarray(sigma, dtype=float)
    tr = np.trace(sigma, axis1=-2, axis2=-1)
    tr_sq = np.trace(sigma @ sigma, axis1=-2, axis2=-1)
    return np.stack([tr, 0.5 * (tr ** 2 - tr_sq), np.linalg.det(sigma)], axis=-1)
