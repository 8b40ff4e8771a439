"""First-order nonlinear homogenization on periodic unit cells and ensembles.

The RVE problem is solved in fluctuation form: the affine part of the
deformation enters element kinematics as a base gradient (F = Fbar + grad w)
so all periodic ties stay homogeneous and the load path lives entirely in
Fbar(t).  Total displacements are (Fbar - I) X + w.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import AtInstabilityError
from .fem import (
    ConstraintSet,
    SolveSettings,
    assemble,
    deformation_gradients,
    element_data,
    evaluate_materials,
    internal_forces,
    newton_continue,
    newton_solve,
)

I2 = np.eye(2)

# the four unit macro-gradient increments, in (k, l) order 11, 12, 21, 22
UNIT_INCREMENTS = [(0, 0), (0, 1), (1, 0), (1, 1)]


@dataclass
class HomogenizedResponse:
    """Macroscopic nominal stress and tangent at a macro deformation."""

    F_macro: np.ndarray
    T_macro: np.ndarray
    C_macro: np.ndarray
    state: object = None


class RveSolver:
    """Periodic cell (or k x k ensemble) under a prescribed macro deformation path."""

    def __init__(self, mesh, pairing, materials, settings=None):
        self.mesh = mesh
        self.pairing = pairing
        self.materials = materials
        self.settings = settings if settings is not None else SolveSettings()
        cs = ConstraintSet()
        cs.periodic_rve(pairing)
        self.constraints = cs
        self.reduction = cs.finalize(mesh.n_dofs)
        ed = element_data(mesh)
        self.volume = float(ed["detJ"].sum())

    def solve_path(self, F_fn, t_end, n_steps, callback=None, u0=None):
        """Equilibrium fluctuation states along Fbar(t), t in (0, t_end]."""
        return newton_continue(
            self.mesh, self.materials, self.constraints, self.settings,
            t_end, n_steps, F0_fn=F_fn, u0=u0, callback=callback,
            reduction=self.reduction)

    def solve_to(self, F_new, w0=None, F_old=None):
        """Converge the fluctuation at a single macro gradient, warm-started.

        Falls back to an internal continuation between F_old and F_new when
        the direct Newton fails (large macro increments).
        """
        w0 = np.zeros(self.mesh.n_dofs) if w0 is None else w0
        state = newton_solve(self.mesh, self.materials, self.reduction, 1.0, w0,
                             self.settings, F0=np.asarray(F_new))
        if state is not None:
            return state
        base = I2 if F_old is None else np.asarray(F_old)
        delta = np.asarray(F_new) - base
        states = newton_continue(
            self.mesh, self.materials, self.constraints, self.settings,
            1.0, 4, F0_fn=lambda s: base + s * delta, u0=w0,
            reduction=self.reduction)
        return states[-1]

    def macro_stress(self, w, F_macro):
        """Volume average of the nominal stress over the cell."""
        ed = element_data(self.mesh)
        F = deformation_gradients(self.mesh, w, F0=F_macro)
        _, T, _ = evaluate_materials(self.mesh, self.materials, F, need_tangent=False)
        return np.einsum("egij,eg->ij", T, ed["detJ"]) / self.volume

    def macro_stress_boundary(self, w, F_macro):
        """Boundary form (1/V) sum of reaction (x) position; equals the volume
        average at equilibrium of a divergence-free stress field."""
        f = internal_forces(self.mesh, self.materials, w, F0=F_macro)
        return np.einsum("ni,nj->ij", f.reshape(-1, 2), self.mesh.nodes) / self.volume

    def macro_tangent(self, w, F_macro, return_stiffness=False):
        """Homogenized nominal tangent via four incremental periodic solves.

        One factorization of the reduced tangent operator serves all four
        unit macro-gradient increments.
        """
        ed = element_data(self.mesh)
        F = deformation_gradients(self.mesh, w, F0=F_macro)
        _, _, A = evaluate_materials(self.mesh, self.materials, F, need_tangent=True)
        detJ = ed["detJ"]
        dNdX = ed["dNdX"]
        # rhs for all four increments at once: f[dof, (kl)] from C : I^kl
        fe = np.einsum("egijkl,egaj,eg->eaikl", A, dNdX, detJ, optimize=True)
        rhs = np.zeros((self.mesh.n_dofs, 4))
        np.add.at(rhs, ed["dof_idx"].ravel(), fe.reshape(-1, 4))
        Ke = np.einsum("egaj,egijkl,egbl,eg->eaibk", dNdX, A, dNdX, detJ, optimize=True)
        K = sp.coo_matrix((Ke.ravel(), (ed["rows"], ed["cols"])),
                          shape=(self.mesh.n_dofs, self.mesh.n_dofs)).tocsr()
        Khat = self.reduction.reduce_matrix(K)
        rhs_hat = self.reduction.Tt @ rhs
        try:
            lu = spla.splu(Khat.tocsc())
            qdot = lu.solve(-rhs_hat)
        except RuntimeError as exc:
            raise AtInstabilityError(f"singular incremental RVE operator: {exc}") from exc
        if not np.all(np.isfinite(qdot)):
            raise AtInstabilityError("non-finite incremental fluctuation")
        resid = np.linalg.norm(Khat @ qdot + rhs_hat) / max(np.linalg.norm(rhs_hat), 1e-30)
        if resid > 1e-6:
            raise AtInstabilityError(f"incremental solve residual {resid:g}")
        wdot = self.reduction.T @ qdot  # (n_dofs, 4)
        # C_ijkl = (1/V) int C_ijkl + C_ijmn grad(wdot^kl)_mn
        C = np.einsum("egijkl,eg->ijkl", A, detJ)
        for col, (k, l) in enumerate(UNIT_INCREMENTS):
            ue = wdot[:, col].reshape(-1, 2)[self.mesh.elems]
            grad = np.einsum("eai,egaj->egij", ue, dNdX)
            C[:, :, k, l] += np.einsum("egijmn,egmn,eg->ij", A, grad, detJ, optimize=True)
        C /= self.volume
        if return_stiffness:
            return C, Khat
        return C

    def response(self, state, F_macro, need_tangent=True):
        F_macro = np.asarray(F_macro)
        T = self.macro_stress(state.u, F_macro)
        C = self.macro_tangent(state.u, F_macro) if need_tangent else None
        return HomogenizedResponse(F_macro, T, C, state)


def transverse_laminate_stretch(lam_bar, mat_m, mat_f, h_m, h_f):
    """Closed-form layered-cell response under a transverse stretch.

    Layers are stacked through the stretch direction; per-layer stretch
    follows from equal traction across the interface and thickness-weighted
    compatibility.  Returns (lam_matrix, lam_fiber, common nominal traction).
    """
    import scipy.optimize

    from .material import pk1_stress

    def t22(lam, p):
        return pk1_stress(np.diag([1.0, lam]), p)[1, 1]

    H = h_m + h_f

    def residual(lam_m):
        lam_f = (H * lam_bar - h_m * lam_m) / h_f
        if lam_f <= 0:
            return 1e12
        return t22(lam_m, mat_m) - t22(lam_f, mat_f)

    lo, hi = 0.2, 3.0
    lam_m = scipy.optimize.brentq(residual, lo, hi, xtol=1e-14)
    lam_f = (H * lam_bar - h_m * lam_m) / h_f
    return lam_m, lam_f, t22(lam_m, mat_m)


def rve_convergence(cell_mesh, materials, F_fn, k_list, t_end, n_steps,
                    settings=None, eig_stride=1, m_fit=4):
    """Critical load factor vs ensemble size k (tiled k x k cells).

    Runs the stability sweep of the `stability` module on each ensemble and
    reports [(k, t_c)].  A local (one-cell) instability gives k-independent
    t_c, confirming that the unit cell is a valid RVE.
    """
    from .mesh import tile
    from .stability import sweep_rve_path

    out = []
    for k in k_list:
        mesh_k, pairing_k = tile(cell_mesh, k, k)
        solver = RveSolver(mesh_k, pairing_k, materials, settings=settings)
        curve = sweep_rve_path(solver, F_fn, t_end, n_steps, stride=eig_stride)
        out.append((k, curve.extrapolate_tc(m_fit)))
    return out
