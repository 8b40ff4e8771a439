import numpy as np
import pytest
import scipy.linalg
import scipy.sparse as sp

from microstab.errors import NoInstabilityDetectedError
from microstab.fem import element_data, gram_matrix
from microstab.homogenization import RveSolver, rve_convergence
from microstab.material import NeoHookeanParams, neo_hookean, tangent_moduli
from microstab.mesh import FIBER, MATRIX, UnitCellSpec, build_layered_cell, tile
from microstab.stability import (
    StabilityCurve,
    classify_mode,
    extrapolate_tc,
    min_eigenvalue,
    negative_inertia,
    rve_ensemble_driver,
    stability_matrices,
    strong_ellipticity,
    sweep,
    sweep_rve_path,
)

MU_M, KAPPA_M = 807.0, 8070.0
MU_F, KAPPA_F = 807.0 * 200, 8070.0 * 200
MATS = {MATRIX: neo_hookean(MU_M, KAPPA_M), FIBER: neo_hookean(MU_F, KAPPA_F)}
SPEC = UnitCellSpec("layered", L=30.0, H=10.0, H_f=0.25, nx=24, ny_fiber=2, ny_matrix=4)

F_COMPRESS = lambda t: np.diag([1.0 - t, 1.0])


@pytest.fixture(scope="module")
def cell():
    return build_layered_cell(SPEC)


@pytest.fixture(scope="module")
def solver(cell):
    return RveSolver(*cell, MATS)


@pytest.fixture(scope="module")
def compression_curve(solver):
    return sweep_rve_path(solver, F_COMPRESS, t_end=0.12, n_steps=24, stride=1)


def test_identity_pencil():
    K = sp.identity(40, format="csr") * 3.0
    lam, vec = min_eigenvalue(K, K)
    assert lam == pytest.approx(1.0, rel=1e-12)
    assert vec @ (K @ vec) == pytest.approx(1.0, rel=1e-12)


def test_matrices_positive_at_reference(solver):
    mesh = solver.mesh
    Khat, Ghat = stability_matrices(mesh, MATS, np.zeros(mesh.n_dofs),
                                    solver.reduction, F0=np.eye(2))
    assert negative_inertia(Khat) == 0
    wG = scipy.linalg.eigvalsh(Ghat.toarray())
    assert wG[0] > 0


def test_gram_is_state_independent(solver):
    mesh = solver.mesh
    s1 = solver.solve_to(np.diag([0.99, 1.0]))
    _, G1 = stability_matrices(mesh, MATS, np.zeros(mesh.n_dofs), solver.reduction)
    _, G2 = stability_matrices(mesh, MATS, s1.u, solver.reduction, F0=np.diag([0.99, 1.0]))
    assert (G1 - G2).nnz == 0


def test_quadratic_form_matches_direct_quadrature(solver):
    rng = np.random.default_rng(11)
    mesh = solver.mesh
    F0 = np.diag([0.99, 1.0])
    state = solver.solve_to(F0)
    Khat, _ = stability_matrices(mesh, MATS, state.u, solver.reduction, F0=F0)
    q = rng.standard_normal(solver.reduction.n_retained)
    v = solver.reduction.T @ q
    # independent elementwise quadrature of the stability functional
    from microstab.fem import deformation_gradients, evaluate_materials

    ed = element_data(mesh)
    F = deformation_gradients(mesh, state.u, F0=F0)
    _, _, A = evaluate_materials(mesh, MATS, F, need_tangent=True)
    ve = v.reshape(-1, 2)[mesh.elems]
    grad = np.einsum("eai,egaj->egij", ve, ed["dNdX"])
    S_direct = float(np.einsum("egijkl,egkl,egij,eg->", A, grad, grad, ed["detJ"]))
    S_matrix = float(q @ (Khat @ q))
    assert S_matrix == pytest.approx(S_direct, rel=1e-10)


def test_dense_oracle_small_mesh():
    spec = UnitCellSpec("layered", L=30.0, H=10.0, H_f=0.25, nx=10, ny_fiber=2, ny_matrix=2)
    mesh, pairing = build_layered_cell(spec)
    s = RveSolver(mesh, pairing, MATS)
    assert s.reduction.n_retained <= 500
    F0 = np.diag([0.99, 1.0])
    st = s.solve_to(F0)
    Khat, Ghat = stability_matrices(mesh, MATS, st.u, s.reduction, F0=F0)
    lam_sparse, _ = min_eigenvalue(Khat, Ghat, method="sparse")
    lam_dense, _ = min_eigenvalue(Khat, Ghat, method="dense")
    assert lam_sparse == pytest.approx(lam_dense, rel=1e-8)


def test_eigenvalue_sign_matches_inertia(solver):
    for t, expect_stable in ((0.02, True), (0.06, False)):
        st = solver.solve_to(F_COMPRESS(t))
        Khat, Ghat = stability_matrices(solver.mesh, MATS, st.u,
                                        solver.reduction, F0=F_COMPRESS(t))
        lam, _ = min_eigenvalue(Khat, Ghat)
        n_neg = negative_inertia(Khat)
        assert (lam > 0) == (n_neg == 0)
        assert (lam > 0) == expect_stable


def test_rayleigh_quotient_bound(solver):
    rng = np.random.default_rng(5)
    F0 = np.diag([0.98, 1.0])
    st = solver.solve_to(F0)
    Khat, Ghat = stability_matrices(solver.mesh, MATS, st.u, solver.reduction, F0=F0)
    lam, _ = min_eigenvalue(Khat, Ghat)
    for _ in range(10):
        v = rng.standard_normal(Khat.shape[0])
        assert lam <= (v @ (Khat @ v)) / (v @ (Ghat @ v)) + 1e-9 * abs(lam)


def test_mode_normalization(compression_curve, solver):
    st = solver.solve_to(F_COMPRESS(0.04))
    Khat, Ghat = stability_matrices(solver.mesh, MATS, st.u, solver.reduction,
                                    F0=F_COMPRESS(0.04))
    _, vec = min_eigenvalue(Khat, Ghat)
    assert vec @ (Ghat @ vec) == pytest.approx(1.0, abs=1e-10)


def test_compression_curve_decreases_and_crosses(compression_curve):
    lam = compression_curve.lam
    assert lam[0] == pytest.approx(1.0)
    assert np.all(np.diff(lam) < 0)
    assert lam[-1] < 0.1
    tc = compression_curve.extrapolate_tc()
    assert 0.02 < tc < 0.09


def test_extrapolation_linear_data():
    t = np.linspace(0, 4.0, 9)
    lam = 1.0 - t / 5.0
    assert extrapolate_tc(t, lam) == pytest.approx(5.0, abs=1e-12)


def test_extrapolation_rejects_non_decreasing():
    t = np.linspace(0, 1, 6)
    with pytest.raises(NoInstabilityDetectedError):
        extrapolate_tc(t, np.ones(6))
    with pytest.raises(NoInstabilityDetectedError):
        extrapolate_tc(t[:2], [1.0, 0.9])


def test_ensemble_sweep_and_reference_invariance(cell):
    mesh, _ = cell
    driver = rve_ensemble_driver(mesh, MATS, F_COMPRESS, [1, 2])
    t_grid = np.linspace(0.0, 0.12, 13)
    curve = sweep(driver, t_grid, [1, 2])
    assert curve.lam[0] == pytest.approx(1.0)
    assert curve.t[0] == 0.0
    tc = curve.extrapolate_tc()
    assert 0.02 < tc < 0.09


def test_rve_convergence_local_mode(cell):
    mesh, _ = cell
    table = rve_convergence(mesh, MATS, F_COMPRESS, k_list=[1, 2], t_end=0.12,
                            n_steps=24)
    (k1, tc1), (k2, tc2) = table
    assert k1 == 1 and k2 == 2
    assert abs(tc2 - tc1) / tc1 <= 0.01
    assert tc2 <= tc1 + 0.01 * tc1  # larger ensembles admit more modes


def test_mode_classification_synthetic(cell):
    mesh, _ = cell
    tiled, _ = tile(mesh, 6, 1)
    # localized bump in the first cell vs a domain-wide wave
    x, y = tiled.nodes[:, 0], tiled.nodes[:, 1]
    local = np.zeros((tiled.n_nodes, 2))
    local[:, 1] = np.exp(-((x - 15.0) ** 2) / 8.0) * np.sin(2 * np.pi * y / 10.0)
    tag = classify_mode(tiled, local.ravel(), (30.0, 10.0))
    assert tag.classification == "local"
    assert tag.critical_cell == (0, 0)
    wave = np.zeros((tiled.n_nodes, 2))
    wave[:, 1] = np.sin(np.pi * x / 180.0)
    tag2 = classify_mode(tiled, wave.ravel(), (30.0, 10.0))
    assert tag2.classification == "global"
    assert tag2.cells_spanned >= 3


def test_strong_ellipticity_stable_reference():
    C = tangent_moduli(np.eye(2), NeoHookeanParams(MU_M, KAPPA_M))
    val = strong_ellipticity(C)
    assert val > 0
    assert val == pytest.approx(MU_M, rel=1e-6)


def test_strong_ellipticity_fine_grid_agreement(solver):
    F0 = np.diag([0.97, 1.0])
    st = solver.solve_to(F0)
    C = solver.macro_tangent(st.u, F0)
    coarse = strong_ellipticity(C, n_grid=36)
    dense = strong_ellipticity(C, n_grid=180)
    assert coarse == pytest.approx(dense, rel=1e-6, abs=1e-6 * abs(dense))


def test_strong_ellipticity_nonconservative(solver, compression_curve):
    """Loss of homogenized ellipticity happens at or after the microscopic t_c."""
    tc_micro = compression_curve.extrapolate_tc()
    t_loss = None
    for t in np.linspace(0.005, 0.12, 24):
        try:
            st = solver.solve_to(F_COMPRESS(t))
            C = solver.macro_tangent(st.u, F_COMPRESS(t))
        except Exception:
            break
        if strong_ellipticity(C) <= 0:
            t_loss = t
            break
    assert t_loss is None or t_loss >= tc_micro - 0.005


def test_stability_curve_csv(tmp_path, compression_curve):
    path = tmp_path / "curve.csv"
    compression_curve.write_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "t,lambda_normalized,lambda_raw,attaining_k"
    assert len(lines) == compression_curve.t.size + 1
