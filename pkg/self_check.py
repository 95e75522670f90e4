"""
Fast verification suite behind `cli.py check`: algebra identities, finite-
difference gradients of the energies, and one 2D patch test.  Output is
deterministic (fixed seeds, no timings).
"""
import logging
import traceback
from itertools import combinations_with_replacement
from math import comb
from typing import Callable, Dict, List, Tuple

import numpy as np

from constitutive import MaterialParams, NeoHookean, SaintVenantKirchhoff, traction_forms
from exterior import (KFormPoint, MetricPoint, VectorValuedForm, hodge, inner, pair_forms,
                      pullback, wedge)
from hw_solver import BoundaryData, SolverConfig, newton_solve
from kinematics import compatibility_residual, dphi
from mesh import build_box_mesh

logger = logging.getLogger(__name__)

SEED = 20240611
TOL_ALGEBRA = 1e-12
MATERIAL = MaterialParams(lam=1.2, mu=0.8)


# ---------------------------------------------------------------- random inputs

def random_form(rng: np.random.Generator, n: int, k: int) -> KFormPoint:
    return KFormPoint(n, k, rng.standard_normal(comb(n, k)))


def random_metric(rng: np.random.Generator, n: int) -> MetricPoint:
    A = rng.standard_normal((n, n))
    g = A @ A.T + n * np.eye(n)
    return MetricPoint(0.5 * (g + g.T))


def random_deformation(rng: np.random.Generator, n: int, spread: float = 0.2) -> np.ndarray:
    while True:
        theta = np.eye(n) + spread * rng.standard_normal((n, n))
        if np.linalg.det(theta) > 0.2:
            return theta


def relative_error(actual, expected) -> float:
    actual, expected = np.asarray(actual, dtype=float), np.asarray(expected, dtype=float)
    return float(np.max(np.abs(actual - expected)) / max(1.0, float(np.max(np.abs(expected)))))


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    """Central differences of a scalar function of an array."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (f(plus) - f(minus)) / (2.0 * h)
    return grad


def fd_jacobian(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float) -> np.ndarray:
    """Central differences of an array-valued function; result shape f(x).shape + x.shape."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(np.shape(f(x)) + x.shape)
    for idx in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[idx] += h
        minus[idx] -= h
        out[(Ellipsis,) + idx] = (f(plus) - f(minus)) / (2.0 * h)
    return out


# ---------------------------------------------------------------- checks

def check_anticommutativity(rng, cases: int = 200) -> float:
    worst = 0.0
    for _ in range(cases):
        for n in (2, 3):
            for k, l in combinations_with_replacement(range(n + 1), 2):
                if k + l > n:
                    continue
                a, b = random_form(rng, n, k), random_form(rng, n, l)
                worst = max(worst, relative_error(wedge(a, b).coeffs, (-1) ** (k * l) * wedge(b, a).coeffs))
    return worst


def check_associativity(rng, cases: int = 200) -> float:
    worst = 0.0
    for _ in range(cases):
        n = 3
        a, b, c = (random_form(rng, n, 1) for _ in range(3))
        worst = max(worst, relative_error(wedge(wedge(a, b), c).coeffs, wedge(a, wedge(b, c)).coeffs))
    return worst


def check_hodge_relation(rng, cases: int = 200) -> float:
    worst = 0.0
    for _ in range(cases):
        for n in (2, 3):
            g = random_metric(rng, n)
            for k in range(n + 1):
                a, b = random_form(rng, n, k), random_form(rng, n, k)
                lhs = wedge(b, hodge(a, g)).coeffs[0]
                rhs = inner(b, a, g) * g.volume_factor
                worst = max(worst, relative_error(lhs, rhs))
    return worst


def check_hodge_involution(rng, cases: int = 200) -> float:
    worst = 0.0
    for _ in range(cases):
        for n in (2, 3):
            g = random_metric(rng, n)
            for k in range(n + 1):
                a = random_form(rng, n, k)
                worst = max(worst, relative_error(hodge(hodge(a, g), g).coeffs,
                                                  (-1) ** (k * (n - k)) * a.coeffs))
    return worst


def check_pullback_functoriality(rng, cases: int = 200) -> float:
    worst = 0.0
    for _ in range(cases):
        for n in (2, 3):
            F, G = rng.standard_normal((n, n)), rng.standard_normal((n, n))
            for k in range(n + 1):
                a = random_form(rng, n, k)
                worst = max(worst, relative_error(pullback(a, F @ G).coeffs, pullback(pullback(a, F), G).coeffs))
    return worst


def check_pairing_identity(rng, cases: int = 100) -> float:
    worst = 0.0
    for _ in range(cases):
        for n in (2, 3):
            P, U = rng.standard_normal((n, n)), rng.standard_normal((n, n))
            paired = pair_forms(traction_forms(P), VectorValuedForm.from_matrix(U, 1))
            worst = max(worst, relative_error(paired.coeffs[0], np.sum(P * U)))
    return worst


def check_pk1_gradient(rng, cases: int = 20) -> float:
    worst = 0.0
    for model in (SaintVenantKirchhoff(MATERIAL), NeoHookean(MATERIAL)):
        for n in (2, 3):
            for _ in range(cases):
                theta = random_deformation(rng, n)
                h = 1e-5 * max(1.0, float(np.max(np.abs(theta))))
                P = model.pk1(theta)
                fd = fd_gradient(lambda t: float(model.energy(t)), theta, h)
                worst = max(worst, float(np.linalg.norm(P - fd) / max(np.linalg.norm(P), 1e-300)))
    return worst


def check_tangent(rng, cases: int = 20) -> float:
    worst = 0.0
    for model in (SaintVenantKirchhoff(MATERIAL), NeoHookean(MATERIAL)):
        for n in (2, 3):
            for _ in range(cases):
                theta = random_deformation(rng, n)
                h = 1e-5 * max(1.0, float(np.max(np.abs(theta))))
                A = model.tangent_tensor(theta)
                fd = fd_jacobian(model.pk1, theta, h)
                worst = max(worst, float(np.linalg.norm(A - fd) / np.linalg.norm(A)))
    return worst


def check_compatibility_closure(rng) -> float:
    mesh = build_box_mesh(2, (4, 4))
    phi = mesh.vertices + 0.05 * rng.standard_normal(mesh.vertices.shape)
    _, norm = compatibility_residual(mesh, phi, dphi(mesh, phi))
    return norm


def check_patch_test(rng) -> float:
    mesh = build_box_mesh(2, (4, 4))
    stretch = np.diag([1.1, 0.95])
    bcs = BoundaryData.affine(mesh, stretch)
    config = SolverConfig(harmonic_lift=False)
    state, _ = newton_solve(mesh, bcs, SaintVenantKirchhoff(MATERIAL), config)
    return max(relative_error(state.phi, mesh.vertices @ stretch.T),
               relative_error(state.theta, np.broadcast_to(stretch, state.theta.shape)))


CHECKS: List[Tuple[str, Callable, float]] = [
    ("wedge anticommutativity", check_anticommutativity, TOL_ALGEBRA),
    ("wedge associativity", check_associativity, TOL_ALGEBRA),
    ("Hodge defining relation", check_hodge_relation, TOL_ALGEBRA),
    ("Hodge involution", check_hodge_involution, TOL_ALGEBRA),
    ("pullback functoriality", check_pullback_functoriality, TOL_ALGEBRA),
    ("traction pairing identity", check_pairing_identity, TOL_ALGEBRA),
    ("pk1 vs FD of energy", check_pk1_gradient, 1e-6),
    ("tangent vs FD of pk1", check_tangent, 1e-5),
    ("compatibility closure", check_compatibility_closure, 1e-13),
    ("2D patch test", check_patch_test, 1e-9),
]


def run_checks(verbose: bool = True) -> Dict[str, bool]:
    """Run every check in order with one shared seeded generator."""
    rng = np.random.default_rng(SEED)
    results: Dict[str, bool] = {}
    if verbose:
        print("🔍 HU-WASHIZU SELF CHECK")
        print("=" * 50)
    for number, (name, check, tolerance) in enumerate(CHECKS, start=1):
        try:
            error = check(rng)
            passed = bool(error <= tolerance)
            detail = f"error {error:.2e} (tol {tolerance:.0e})"
        except Exception as e:
            passed = False
            detail = f"raised {type(e).__name__}: {e}"
            logger.error(f"Check '{name}' failed with an exception")
            logger.debug(traceback.format_exc())
        results[name] = passed
        if verbose:
            print(f"{number:2d}. {'✅' if passed else '❌'} {name}: {detail}")
    if verbose:
        failed = [name for name, ok in results.items() if not ok]
        print("=" * 50)
        print("✅ All checks passed" if not failed else f"❌ Failed: {', '.join(failed)}")
    return results


if __name__ == "__main__":
    raise SystemExit(0 if all(run_checks().values()) else 1)
