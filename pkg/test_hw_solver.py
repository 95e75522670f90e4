import numpy as np
import pandas as pd
import pytest
from scipy.sparse.linalg import spsolve

from constitutive import MaterialParams, NeoHookean, SaintVenantKirchhoff, cauchy_from_pk1, cauchy_invariants
from hw_solver import (BoundaryData, ConvergenceReport, DofMap, HWSolver, HWState, NonConvergenceError,
                       SingularSystemError, SolveMode, SolverConfig, assemble_functional, assemble_kkt,
                       condensed_solve, element_fields, eliminated_kkt_step, export_solution, harmonic_lift,
                       incompatibility_probe, load_vector, newton_solve, residual_phi, residual_tau, residual_theta)
from kinematics import C_from_theta, dphi
from mesh import build_box_mesh

LAM, MU = 1.2, 0.8
PARAMS = MaterialParams(LAM, MU)
MODELS = [SaintVenantKirchhoff(PARAMS), NeoHookean(PARAMS)]


def rotation(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def random_state(rng, mesh, spread=0.02):
    phi = mesh.vertices + spread * rng.standard_normal(mesh.vertices.shape)
    theta = dphi(mesh, phi) + spread * rng.standard_normal((mesh.num_elements, mesh.dim, mesh.dim))
    traction = 0.1 * rng.standard_normal(theta.shape)
    return HWState(phi, theta, traction)


def loaded(mesh):
    """Body force plus a traction on the +x side, no Dirichlet data."""
    return BoundaryData(neumann={2: np.array([0.05, -0.02])}, body_force=np.array([0.0, -0.1 * MU]))


def pulled_strip(mesh, stretch=1.3):
    """Clamp the -x side and displace the +x side by x -> stretch * x."""
    bcs = BoundaryData.affine(mesh, np.eye(2), markers=[1])
    return bcs.add_affine(mesh, np.diag([stretch, 1.0]), markers=[2])


# ---------------------------------------------------------------- functional and residuals

@pytest.mark.parametrize("model", MODELS, ids=lambda m: m.tag.value)
def test_residual_blocks_are_functional_derivatives(model):
    mesh = build_box_mesh(2, (4, 4))
    bcs = loaded(mesh)
    rng = np.random.default_rng(99)
    h = 1e-6
    for _ in range(20):
        state = random_state(rng, mesh)
        analytic = {
            'phi': residual_phi(mesh, state, bcs),
            'theta': residual_theta(mesh, state, model),
            'traction': residual_tau(mesh, state),
        }
        for name, grad in analytic.items():
            direction = rng.standard_normal(grad.shape)
            plus, minus = state.copy(), state.copy()
            setattr(plus, name, getattr(state, name) + h * direction)
            setattr(minus, name, getattr(state, name) - h * direction)
            fd = (assemble_functional(mesh, plus, bcs, model)
                  - assemble_functional(mesh, minus, bcs, model)) / (2 * h)
            assert abs(fd - np.sum(grad * direction)) <= 1e-7 * max(1.0, abs(fd))


def test_multiplier_is_inert_on_compatible_states():
    mesh = build_box_mesh(2, (3, 3))
    rng = np.random.default_rng(5)
    model = MODELS[1]
    phi = mesh.vertices + 0.03 * rng.standard_normal(mesh.vertices.shape)
    base = HWState(phi, dphi(mesh, phi), np.zeros((mesh.num_elements, 2, 2)))
    value = assemble_functional(mesh, base, BoundaryData(), model)
    for _ in range(5):
        other = HWState(phi, base.theta, rng.standard_normal(base.traction.shape))
        assert assemble_functional(mesh, other, BoundaryData(), model) == pytest.approx(value, abs=1e-14)


def test_residual_theta_at_reference():
    mesh = build_box_mesh(2, (2, 2))
    volumes, _ = mesh.geometry
    theta = np.broadcast_to(np.eye(2), (mesh.num_elements, 2, 2)).copy()
    state = HWState(mesh.vertices.copy(), theta, np.zeros_like(theta))
    assert np.allclose(residual_theta(mesh, state, MODELS[0]), 0.0, atol=1e-16)
    T = np.ones_like(theta)
    state.traction = T
    assert np.allclose(residual_theta(mesh, state, MODELS[0]), -volumes[:, None, None] * T)


@pytest.mark.parametrize("model", MODELS, ids=lambda m: m.tag.value)
def test_affine_state_has_no_interior_residual(model):
    mesh = build_box_mesh(2, (4, 4))
    A = np.array([[1.1, 0.05], [0.0, 0.95]])
    phi = mesh.vertices @ A.T
    theta = np.broadcast_to(A, (mesh.num_elements, 2, 2)).copy()
    state = HWState(phi, theta, model.pk1(theta))
    R = residual_phi(mesh, state, BoundaryData())
    interior = ~np.isin(np.arange(mesh.num_vertices), mesh.boundary_facets)
    assert np.max(np.abs(R[interior])) <= 1e-12
    assert np.max(np.abs(residual_tau(mesh, state))) <= 1e-14
    assert np.max(np.abs(residual_theta(mesh, state, model))) <= 1e-15


def test_load_vector_totals():
    mesh = build_box_mesh(2, (4, 2), bounds=((0.0, 2.0), (0.0, 1.0)))
    bcs = BoundaryData(neumann={2: np.array([0.3, 0.0])}, body_force=np.array([0.0, -1.0]))
    f = load_vector(mesh, bcs)
    # the +x side has length 1, the body has area 2
    assert np.allclose(f.sum(axis=0), [0.3, -2.0])


def test_residual_phi_zeroes_constrained_components():
    mesh = build_box_mesh(2, (2, 2))
    bcs = BoundaryData.affine(mesh, np.eye(2), markers=[1])
    bcs.dirichlet[8] = np.array([np.nan, 1.0])
    state = random_state(np.random.default_rng(1), mesh)
    R = residual_phi(mesh, state, bcs)
    mask, _ = bcs.constraints(mesh)
    assert np.all(R[mask] == 0.0)
    assert R[8, 0] != 0.0


@pytest.mark.parametrize("model", MODELS, ids=lambda m: m.tag.value)
def test_kkt_matrix_is_symmetric(model):
    mesh = build_box_mesh(2, (3, 3))
    bcs = pulled_strip(mesh)
    state = random_state(np.random.default_rng(2), mesh)
    dofs = DofMap(mesh, bcs)
    K = assemble_kkt(mesh, state, bcs, model, dofs)
    size = dofs.n_free + 2 * mesh.num_elements * 4
    assert K.shape == (size, size)
    asym = abs(K - K.T).max()
    assert asym <= 1e-12 * abs(K).max()


def test_harmonic_lift_reproduces_affine_data():
    mesh = build_box_mesh(2, (5, 4))
    A = np.array([[1.2, 0.1], [-0.05, 0.9]])
    b = np.array([0.3, -0.2])
    dofs = DofMap(mesh, BoundaryData.affine(mesh, A, b))
    assert np.allclose(harmonic_lift(mesh, dofs), mesh.vertices @ A.T + b, atol=1e-12)


# ---------------------------------------------------------------- solves

@pytest.mark.parametrize("model", MODELS, ids=lambda m: m.tag.value)
@pytest.mark.parametrize("mode", list(SolveMode), ids=lambda m: m.value)
@pytest.mark.parametrize("lift", [True, False], ids=["lift", "identity"])
def test_patch_test_2d(model, mode, lift):
    mesh = build_box_mesh(2, (4, 4))
    A = np.diag([1.1, 0.95])
    config = SolverConfig(mode=mode, harmonic_lift=lift)
    state, report = HWSolver(mesh, BoundaryData.affine(mesh, A), model, config).solve()
    assert report.converged
    assert np.max(np.abs(state.phi - mesh.vertices @ A.T)) <= 1e-9
    assert np.max(np.abs(state.theta - A)) <= 1e-9
    assert np.max(np.abs(state.traction - model.pk1(A))) <= 1e-9


def stretch_3d(mesh, model, **settings):
    A = np.diag([1.1, 1.0, 0.9])
    state, report = HWSolver(mesh, BoundaryData.affine(mesh, A), model, SolverConfig(**settings)).solve()
    assert report.converged
    return A, state, report


@pytest.mark.parametrize("model", MODELS, ids=lambda m: m.tag.value)
@pytest.mark.parametrize("mode", list(SolveMode), ids=lambda m: m.value)
@pytest.mark.parametrize("divisions", [2, 4, 8])
def test_patch_test_3d(model, mode, divisions):
    mesh = build_box_mesh(3, (divisions,) * 3)
    A, state, report = stretch_3d(mesh, model, mode=mode)
    assert report.iterations <= 1
    assert np.max(np.abs(state.phi - mesh.vertices @ A.T)) <= 1e-9
    assert np.max(np.abs(state.theta - A)) <= 1e-9
    assert np.max(np.abs(state.traction - model.pk1(A))) <= 1e-9


@pytest.mark.parametrize("model", MODELS, ids=lambda m: m.tag.value)
@pytest.mark.parametrize("mode", list(SolveMode), ids=lambda m: m.value)
def test_patch_test_3d_from_reference_positions(model, mode):
    mesh = build_box_mesh(3, (4, 4, 4))
    A, state, report = stretch_3d(mesh, model, mode=mode, harmonic_lift=False)
    assert report.iterations >= 1
    assert np.max(np.abs(state.phi - mesh.vertices @ A.T)) <= 1e-8
    assert np.max(np.abs(state.theta - A)) <= 1e-8


@pytest.mark.parametrize("model", MODELS, ids=lambda m: m.tag.value)
def test_patch_test_3d_fine_mesh_from_reference_positions(model):
    mesh = build_box_mesh(3, (8, 8, 8))
    A, state, report = stretch_3d(mesh, model, mode='condensed', harmonic_lift=False)
    assert np.max(np.abs(state.phi - mesh.vertices @ A.T)) <= 1e-8
    assert np.max(np.abs(state.theta - A)) <= 1e-8
    if report.load_levels:
        assert report.load_levels[-1] == 1.0
        assert np.all(np.diff(report.load_levels) > 0)


@pytest.mark.parametrize("model", MODELS, ids=lambda m: m.tag.value)
def test_eliminated_step_matches_full_kkt(model):
    mesh = build_box_mesh(2, (3, 3))
    bcs = pulled_strip(mesh)
    state = random_state(np.random.default_rng(7), mesh)
    solver = HWSolver(mesh, bcs, model)
    residual, _ = solver.residual_blocks(state)
    K = assemble_kkt(mesh, state, bcs, model, solver.dofs)
    full = spsolve(K, -residual)
    reduced = eliminated_kkt_step(mesh, state, model, solver.dofs, residual, lambda: ('phi', ''))
    assert np.max(np.abs(reduced - full)) <= 1e-9 * max(1.0, np.max(np.abs(full)))

    gentle = pulled_strip(mesh, 1.1)
    direct = HWSolver(mesh, gentle, model, SolverConfig(kkt_solver='direct', harmonic_lift=False)).solve()[0]
    eliminated = HWSolver(mesh, gentle, model, SolverConfig(kkt_solver='eliminate', harmonic_lift=False)).solve()[0]
    assert np.max(np.abs(direct.phi - eliminated.phi)) <= 1e-9
    assert np.max(np.abs(direct.traction - eliminated.traction)) <= 1e-9


# ---------------------------------------------------------------- load stepping

@pytest.mark.parametrize("mode", list(SolveMode), ids=lambda m: m.value)
def test_load_stepping_reaches_the_direct_solution(mode):
    mesh = build_box_mesh(2, (4, 4))
    bcs = pulled_strip(mesh)
    bcs.body_force = np.array([0.0, -0.1 * MU])
    model = NeoHookean(PARAMS)
    config = SolverConfig(mode=mode, harmonic_lift=False)
    direct, _ = HWSolver(mesh, bcs, model, config).solve()

    solver = HWSolver(mesh, bcs, model, config)
    stepped, report = solver.solve_with_load_steps()
    assert report.converged
    assert report.load_levels[-1] == 1.0
    assert np.all(np.diff(report.load_levels) > 0)
    assert "load stepping" in report.message
    assert np.max(np.abs(stepped.phi - direct.phi)) <= 1e-8
    assert solver.loads is solver._full_loads and solver.dofs is solver._full_dofs
    # one opening row per level plus one row per Newton step
    assert len(report.history) == report.iterations + len(report.load_levels)


def test_load_stepping_gives_up_after_max_cuts():
    mesh = build_box_mesh(2, (4, 4))
    solver = HWSolver(mesh, pulled_strip(mesh), NeoHookean(PARAMS), SolverConfig(max_iter=1, max_load_cuts=0))
    with pytest.raises(NonConvergenceError) as info:
        solver.solve_with_load_steps()
    assert info.value.reason == 'load_stepping'
    assert "stalled at level 0" in info.value.report.message
    assert np.allclose(info.value.state.phi, mesh.vertices)
    assert solver.dofs is solver._full_dofs


def test_line_search_failure_falls_back_to_load_stepping(monkeypatch):
    mesh = build_box_mesh(2, (4, 4))
    solver = HWSolver(mesh, pulled_strip(mesh), NeoHookean(PARAMS), SolverConfig(harmonic_lift=False))
    newton = HWSolver._newton
    calls = []

    def failing_first(self, state, report):
        calls.append(len(calls))
        if len(calls) == 1:
            raise NonConvergenceError("line search exhausted", state, report, 'line_search')
        return newton(self, state, report)

    monkeypatch.setattr(HWSolver, '_newton', failing_first)
    state, report = solver.solve()
    assert report.converged and report.load_levels[-1] == 1.0
    assert len(calls) >= 1 + len(report.load_levels)
    assert np.max(np.abs(state.theta - dphi(mesh, state.phi))) <= 1e-8


def test_max_iter_failures_do_not_trigger_load_stepping():
    mesh = build_box_mesh(2, (4, 4))
    config = SolverConfig(max_iter=1, harmonic_lift=False)
    with pytest.raises(NonConvergenceError) as info:
        HWSolver(mesh, pulled_strip(mesh), NeoHookean(PARAMS), config).solve()
    assert info.value.reason == 'max_iter'
    assert not info.value.report.load_levels


def test_monolithic_and_condensed_agree():
    mesh = build_box_mesh(2, (8, 8))
    model = NeoHookean(PARAMS)
    bcs = BoundaryData.affine(mesh, np.eye(2), markers=[1])
    bcs.body_force = np.array([0.0, -0.1 * MU])
    mono, mono_report = newton_solve(mesh, bcs, model)
    cond, cond_report = condensed_solve(mesh, bcs, model)
    assert mono_report.mode is SolveMode.MONOLITHIC and cond_report.mode is SolveMode.CONDENSED
    assert np.max(np.abs(mono.phi - cond.phi)) <= 1e-9
    assert np.max(np.abs(mono.theta - cond.theta)) <= 1e-9
    assert np.max(np.abs(mono.traction - cond.traction)) <= 1e-9
    # the body sags under its own weight
    assert mono.phi[:, 1].min() < mesh.vertices[:, 1].min()


@pytest.mark.parametrize("model", MODELS, ids=lambda m: m.tag.value)
def test_solution_is_objective(model):
    mesh = build_box_mesh(2, (4, 4))
    R = rotation(np.pi / 6)
    stretch = np.diag([1.2, 1.0])
    body = np.array([0.0, -0.05 * MU])
    config = SolverConfig(tol_rel=1e-12)

    bcs = BoundaryData.affine(mesh, np.eye(2), markers=[1]).add_affine(mesh, stretch, markers=[2])
    bcs.body_force = body
    rotated = BoundaryData.affine(mesh, R, markers=[1]).add_affine(mesh, R @ stretch, markers=[2])
    rotated.body_force = R @ body

    state, _ = newton_solve(mesh, bcs, model, config)
    turned, _ = newton_solve(mesh, rotated, model, config)

    assert np.max(np.abs(turned.phi - state.phi @ R.T)) <= 1e-9
    assert np.max(np.abs(C_from_theta(turned.theta) - C_from_theta(state.theta))) <= 1e-9
    assert np.max(np.abs(model.energy(turned.theta) - model.energy(state.theta))) <= 1e-9
    sigma = cauchy_invariants(cauchy_from_pk1(state.traction, state.theta))
    sigma_turned = cauchy_invariants(cauchy_from_pk1(turned.traction, turned.theta))
    assert np.max(np.abs(sigma - sigma_turned)) <= 1e-9


@pytest.mark.parametrize("model", MODELS, ids=lambda m: m.tag.value)
def test_incompatibility_probe_is_linear(model):
    mesh = build_box_mesh(2, (4, 4))
    epsilons = np.array([1e-2, 1e-3, 1e-4])
    norms = np.array([incompatibility_probe(mesh, model, eps, element=9)[1] for eps in epsilons])
    assert np.all(norms > 0)
    slope = np.polyfit(np.log(epsilons), np.log(norms), 1)[0]
    assert abs(slope - 1.0) <= 0.05
    R, norm = incompatibility_probe(mesh, model, 0.0)
    assert norm <= 1e-13 and R.shape == mesh.vertices.shape


def test_newton_converges_quadratically():
    mesh = build_box_mesh(2, (4, 4))
    config = SolverConfig(harmonic_lift=False)
    _, report = newton_solve(mesh, pulled_strip(mesh), NeoHookean(PARAMS), config)
    assert report.converged
    assert report.iterations <= 12
    history = report.to_frame()
    scaled = history['residual'].to_numpy() / history['residual'].iloc[0]
    steps = history['step'].to_numpy()
    pairs = [(scaled[k], scaled[k + 1]) for k in range(1, len(scaled) - 1)
             if steps[k] == 1.0 and steps[k + 1] == 1.0 and scaled[k] < 1e-2]
    assert pairs
    for before, after in pairs:
        assert after <= before ** 1.5


def test_max_iter_raises_with_last_state():
    mesh = build_box_mesh(2, (4, 4))
    config = SolverConfig(max_iter=1, harmonic_lift=False)
    with pytest.raises(NonConvergenceError) as info:
        newton_solve(mesh, pulled_strip(mesh), NeoHookean(PARAMS), config)
    error = info.value
    assert isinstance(error.state, HWState)
    assert not error.report.converged
    assert len(error.report.history) == 2
    assert "max_iter" in error.report.message


@pytest.mark.parametrize("mode", list(SolveMode), ids=lambda m: m.value)
def test_unconstrained_body_is_singular(mode):
    mesh = build_box_mesh(2, (3, 3))
    solver = HWSolver(mesh, loaded(mesh), MODELS[0], SolverConfig(mode=mode))
    with pytest.raises(SingularSystemError) as info:
        solver.solve()
    assert info.value.block == 'phi'


def test_pinning_one_side_removes_rigid_modes():
    mesh = build_box_mesh(2, (3, 3))
    assert DofMap(mesh, pulled_strip(mesh)).pins_rigid_modes(mesh)
    single = BoundaryData(dirichlet={0: np.array([0.0, 0.0])})
    assert not DofMap(mesh, single).pins_rigid_modes(mesh)
    assert not DofMap(mesh, BoundaryData()).pins_rigid_modes(mesh)


def test_identity_data_converge_immediately():
    mesh = build_box_mesh(2, (4, 4))
    state, report = newton_solve(mesh, BoundaryData.affine(mesh, np.eye(2)), SaintVenantKirchhoff(PARAMS))
    assert report.converged
    assert report.iterations <= 1
    assert np.allclose(state.phi, mesh.vertices, atol=1e-14)


def test_solver_config():
    config = SolverConfig.from_settings({'mode': 'condensed', 'max_iter': 7, 'tol_abs': None})
    assert config.mode is SolveMode.CONDENSED and config.max_iter == 7
    assert config.absolute_tolerance(2.0, 3.0) == pytest.approx(6e-12)
    assert SolverConfig(tol_abs=1e-9).absolute_tolerance(2.0, 3.0) == 1e-9
    assert config.to_dict()['mode'] == 'condensed'
    with pytest.raises(ValueError):
        SolverConfig(tol_rel=0.0)
    with pytest.raises(ValueError):
        SolverConfig(backtrack=1.5)
    with pytest.raises(ValueError):
        SolverConfig(mode='explicit')


def test_report_and_exports(tmp_path):
    mesh = build_box_mesh(2, (3, 3))
    model = NeoHookean(PARAMS)
    state, report = newton_solve(mesh, pulled_strip(mesh, 1.1), model, SolverConfig(harmonic_lift=False))
    prefix = str(tmp_path / "strip")
    export_solution(prefix, mesh, state, model, report)

    history = pd.read_csv(f"{prefix}_history.csv")
    assert list(history.columns) == ['iter', 'res_phi', 'res_theta', 'res_tau', 'residual', 'step']
    assert len(history) == report.iterations + 1
    assert history['residual'].iloc[-1] <= report.tolerance

    text = open(f"{prefix}_report.txt").read()
    assert text.startswith("Hu-Washizu solve (monolithic): converged")
    vtk = open(f"{prefix}.vtk").read()
    for name in ('VECTORS displacement', 'TENSORS theta', 'TENSORS sigma', 'SCALARS J', 'SCALARS W'):
        assert name in vtk

    cells = pd.read_csv(f"{prefix}_cells.csv")
    assert len(cells) == mesh.num_elements
    assert {'element', 'theta_11', 'theta_22', 'traction_12', 'J', 'W', 'sigma_21'} <= set(cells.columns)
    assert np.allclose(cells['theta_12'], state.theta[:, 0, 1], rtol=0, atol=1e-15)

    fields = element_fields(mesh, state, model)
    assert np.max(np.abs(fields['compatibility'])) <= 1e-8
    assert np.all(fields['J'] > 0)
    assert report.summary()['converged'] is True


def test_empty_report():
    report = ConvergenceReport(SolveMode.MONOLITHIC)
    assert report.iterations == 0
    assert np.isnan(report.final_residual)
    assert report.to_frame().empty


if __name__ == "__main__":
    print("🧪 Hu-Washizu solver tests")
    raise SystemExit(pytest.main([__file__, "-v"]))
