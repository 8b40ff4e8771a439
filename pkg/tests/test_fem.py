import numpy as np
import pytest
import scipy.optimize
import scipy.sparse as sp

from microstab.errors import ConstraintGraphError, RankDeficiencyError
from microstab.fem import (
    ConstraintSet,
    SolveSettings,
    assemble,
    edge_load,
    gram_matrix,
    internal_forces,
    newton_continue,
    newton_solve,
    sparse_solve,
    total_energy,
)
from microstab.material import NeoHookeanParams, neo_hookean, pk1_stress
from microstab.mesh import MATRIX, UnitCellSpec, build_layered_cell, build_macro_mesh

MAT = {MATRIX: neo_hookean(mu=1.0, kappa=10.0)}
rng = np.random.default_rng(7)


def small_mesh(nx=2, ny=2, L=2.0, H=2.0):
    m = build_macro_mesh((L, H), (L / nx, H / ny))
    m.region[:] = MATRIX
    return m


def test_zero_displacement_zero_residual():
    mesh = small_mesh()
    f, K = assemble(mesh, MAT, np.zeros(mesh.n_dofs))
    assert np.allclose(f, 0.0, atol=1e-14)
    assert K.shape == (mesh.n_dofs, mesh.n_dofs)


def test_affine_field_constant_gradient():
    mesh = small_mesh(1, 1)
    G = np.array([[0.1, 0.03], [-0.02, 0.05]])
    u = (mesh.nodes @ G.T).ravel()
    from microstab.fem import deformation_gradients

    F = deformation_gradients(mesh, u)
    assert np.allclose(F, np.eye(2) + G, atol=1e-14)


def test_stiffness_matches_residual_fd():
    mesh = small_mesh(2, 2)
    u = 0.02 * (rng.random(mesh.n_dofs) - 0.5)
    f0, K = assemble(mesh, MAT, u)
    K = K.toarray()
    h = 1e-7 * max(1.0, np.linalg.norm(u)) + 1e-10
    Kfd = np.zeros_like(K)
    for d in range(mesh.n_dofs):
        up, um = u.copy(), u.copy()
        up[d] += h
        um[d] -= h
        Kfd[:, d] = (internal_forces(mesh, MAT, up) - internal_forces(mesh, MAT, um)) / (2 * h)
    assert np.linalg.norm(K - Kfd) <= 1e-5 * np.linalg.norm(K)


def test_residual_is_energy_gradient():
    mesh = small_mesh(2, 2)
    u = 0.05 * (rng.random(mesh.n_dofs) - 0.5)
    f = internal_forces(mesh, MAT, u)
    h = 1e-6
    for d in rng.choice(mesh.n_dofs, size=6, replace=False):
        up, um = u.copy(), u.copy()
        up[d] += h
        um[d] -= h
        g = (total_energy(mesh, MAT, up) - total_energy(mesh, MAT, um)) / (2 * h)
        assert g == pytest.approx(f[d], rel=2e-5, abs=1e-8)


def test_assembly_deterministic():
    mesh = small_mesh(3, 3)
    u = 0.03 * (rng.random(mesh.n_dofs) - 0.5)
    f1, K1 = assemble(mesh, MAT, u)
    f2, K2 = assemble(mesh, MAT, u)
    assert np.array_equal(f1, f2)
    assert np.array_equal(K1.toarray(), K2.toarray())


def test_constraint_reduction_identity_and_symmetry():
    mesh = small_mesh(2, 2)
    cs = ConstraintSet()
    red = cs.finalize(mesh.n_dofs)
    _, K = assemble(mesh, MAT, 0.01 * rng.random(mesh.n_dofs))
    assert (red.reduce_matrix(K) - K.tocsc()).nnz == 0

    cs2 = ConstraintSet()
    cs2.fix(0, 0.0)
    cs2.tie(5, [(7, 1.0), (9, -0.5)])
    red2 = cs2.finalize(mesh.n_dofs)
    Khat = red2.reduce_matrix(K)
    assert abs(Khat - Khat.T).max() < 1e-12
    assert red2.dof_counts()["eliminated"] == 1


def test_constraint_graph_errors():
    cs = ConstraintSet()
    cs.tie(1, [(2, 1.0)])
    with pytest.raises(ConstraintGraphError):
        cs.tie(1, [(3, 1.0)])
    cs.tie(4, [(1, 1.0)])  # master 1 is a slave
    with pytest.raises(ConstraintGraphError):
        cs.finalize(10)
    cs2 = ConstraintSet()
    cs2.tie(3, [(3, 1.0)])
    with pytest.raises(ConstraintGraphError):
        cs2.finalize(10)
    cs3 = ConstraintSet()
    cs3.fix(2, 0.0)
    cs3.tie(2, [(4, 1.0)])
    with pytest.raises(ConstraintGraphError):
        cs3.finalize(10)


def test_patch_test_affine_dirichlet():
    """Homogeneous material + affine Dirichlet data reproduces the affine field."""
    mesh, _ = build_layered_cell(
        UnitCellSpec("layered", L=3.0, H=1.0, H_f=0.2, nx=6, ny_fiber=2, ny_matrix=2))
    mesh.region[:] = MATRIX
    G = np.array([[0.08, 0.02], [0.01, -0.04]])
    boundary = np.where(
        (np.abs(mesh.nodes[:, 0]) < 1e-12) | (np.abs(mesh.nodes[:, 0] - 3.0) < 1e-12)
        | (np.abs(mesh.nodes[:, 1]) < 1e-12) | (np.abs(mesh.nodes[:, 1] - 1.0) < 1e-12))[0]
    cs = ConstraintSet()
    for n in boundary:
        val = G @ mesh.nodes[n]
        cs.fix_node(n, float(val[0]), float(val[1]))
    states = newton_continue(mesh, MAT, cs, SolveSettings(), t_end=1.0, n_steps=1)
    u = states[-1].u.reshape(-1, 2)
    expect = mesh.nodes @ G.T
    assert np.max(np.abs(u - expect)) < 1e-10


def test_single_node_dirichlet_inhomogeneity_scales_with_t():
    mesh = small_mesh(1, 1, L=1.0, H=1.0)
    cs = ConstraintSet()
    for n in range(4):
        cs.fix(2 * n, 0.0)
    cs.fix_node(0, uy=0.0)
    cs.fix_node(1, uy=0.0)
    cs.fix(2 * 2 + 1, lambda t: 0.1 * t)
    cs.fix(2 * 3 + 1, lambda t: 0.1 * t)
    states = newton_continue(mesh, MAT, cs, SolveSettings(), t_end=1.0, n_steps=2)
    assert states[-1].u[5] == pytest.approx(0.1)
    assert states[0].u[5] == pytest.approx(0.05)


def test_linear_problem_converges_in_one_iteration():
    mesh = small_mesh(2, 1, L=2.0, H=1.0)
    cs = ConstraintSet()
    for n in np.where(np.abs(mesh.nodes[:, 0]) < 1e-12)[0]:
        cs.fix_node(n, 0.0, 0.0)
    f_ref = edge_load(mesh, 0, 2.0, (1e-8, 0.0))
    red = cs.finalize(mesh.n_dofs)
    state = newton_solve(mesh, MAT, red, 1.0, np.zeros(mesh.n_dofs), SolveSettings(),
                         f_ext=f_ref)
    assert state is not None
    assert state.iterations == 1


def test_uniaxial_stress_matches_scalar_root():
    p = NeoHookeanParams(mu=1.0, kappa=10.0)
    lam_x = 1.3

    def lateral_residual(lam_y):
        F = np.diag([lam_x, lam_y])
        return pk1_stress(F, p)[1, 1]

    lam_y = scipy.optimize.brentq(lateral_residual, 0.4, 1.1, xtol=1e-14)
    T11 = pk1_stress(np.diag([lam_x, lam_y]), p)[0, 0]

    mesh = small_mesh(1, 1, L=1.0, H=1.0)
    cs = ConstraintSet()
    for n in range(4):
        cs.fix(2 * n, lambda t, x=mesh.nodes[n, 0]: (lam_x - 1.0) * t * x)
    cs.fix(1, 0.0)
    cs.fix(3, 0.0)  # bottom edge held vertically
    states = newton_continue(mesh, {MATRIX: neo_hookean(1.0, 10.0)}, cs,
                             SolveSettings(), t_end=1.0, n_steps=5)
    u = states[-1].u.reshape(-1, 2)
    lam_y_fem = 1.0 + u[2, 1] - u[1, 1]
    assert lam_y_fem == pytest.approx(lam_y, abs=1e-8)
    f = internal_forces(mesh, {MATRIX: neo_hookean(1.0, 10.0)}, states[-1].u)
    # reaction on the right edge (nodes 1 and 3) = analytic nominal traction * height
    right = f.reshape(-1, 2)[[1, 3], 0].sum()
    assert right == pytest.approx(T11, rel=1e-8)


def test_quadratic_convergence_history():
    mesh = small_mesh(2, 2)
    cs = ConstraintSet()
    for n in np.where(np.abs(mesh.nodes[:, 0]) < 1e-12)[0]:
        cs.fix_node(n, 0.0, 0.0)
    f_ref = edge_load(mesh, 0, 2.0, (0.0, 0.3))
    red = cs.finalize(mesh.n_dofs)
    state = newton_solve(mesh, MAT, red, 1.0, np.zeros(mesh.n_dofs),
                         SolveSettings(rtol=1e-12), f_ext=f_ref)
    h = state.residual_history
    assert len(h) >= 3
    # superlinear tail: each residual beats the square of its predecessor
    # scaled by a modest constant
    for a, b in zip(h[-3:-1], h[-2:]):
        assert b <= 10.0 * a * a / h[0] + 1e-12


def test_step_halving_on_rough_path():
    mesh = small_mesh(1, 1, L=1.0, H=1.0)
    cs = ConstraintSet()
    for n in range(4):
        x = mesh.nodes[n]
        cs.fix_node(n, lambda t, v=x[0]: -0.5 * t * v, 0.0)
    # one giant step would invert elements; halving must recover
    states = newton_continue(mesh, MAT, cs, SolveSettings(max_iterations=8),
                             t_end=1.2, n_steps=1)
    assert states[-1].t == pytest.approx(1.2)


def test_sparse_solve_contracts():
    n = 100
    eye = sp.identity(n, format="csc")
    b = rng.random(n)
    assert np.allclose(sparse_solve(eye, b), b)

    Adense = rng.random((n, n))
    Aspd = Adense @ Adense.T + n * np.eye(n)
    x = sparse_solve(sp.csc_matrix(Aspd), b, check=True)
    assert np.linalg.norm(Aspd @ x - b) <= 1e-10 * np.linalg.norm(b)
    assert np.allclose(x, np.linalg.solve(Aspd, b), atol=1e-10)

    sing = sp.csc_matrix(np.zeros((4, 4)))
    with pytest.raises(RankDeficiencyError):
        sparse_solve(sing, np.ones(4))


def test_free_floating_mesh_is_rank_deficient():
    mesh = small_mesh(2, 2)
    cs = ConstraintSet()
    red = cs.finalize(mesh.n_dofs)
    _, K = assemble(mesh, MAT, np.zeros(mesh.n_dofs))
    with pytest.raises(RankDeficiencyError):
        sparse_solve(red.reduce_matrix(K), np.ones(mesh.n_dofs))


def test_gram_matrix_is_h1_seminorm():
    mesh = small_mesh(2, 2)
    G = gram_matrix(mesh)
    u = (mesh.nodes @ np.array([[0.2, 0.0], [0.0, 0.0]]).T).ravel()
    # grad u = const = 0.2 on a 2x2 domain: integral = 0.04 * area
    assert u @ (G @ u) == pytest.approx(0.04 * 4.0, rel=1e-12)
    c = np.tile([1.0, -2.0], mesh.n_nodes)
    assert c @ (G @ c) == pytest.approx(0.0, abs=1e-12)
