"""Coupled-volume semi-concurrent two-scale solver.

One RVE per bilinear macro element, evaluated at the element centroid; the
macro element size equals the unit-cell size.  All nested RVE problems share
a single cell mesh/reduction and differ only by their driving macro gradient
and warm-started fluctuation, so they are independent and can run on a
thread pool; upscaled responses merge in element order.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import AtInstabilityError, ContinuationError, InvalidDeformationError
from .fem import SolveSettings, element_data, gram_matrix, shape_gradients, sparse_solve
from .homogenization import RveSolver
from .stability import StabilityCurve, min_eigenvalue, stability_matrices

I2 = np.eye(2)


@dataclass
class TwoScaleState:
    """Converged macro state with the nested RVE data that produced it."""

    t: float
    u_macro: np.ndarray
    F_elements: np.ndarray          # (ne, 2, 2) centroid macro gradients
    w_elements: np.ndarray          # (ne, n_cell_dofs) RVE fluctuations
    T_elements: np.ndarray          # (ne, 2, 2) upscaled nominal stresses
    iterations: int = 0
    residual_norm: float = 0.0


@dataclass
class Fe2Result:
    states: list = field(default_factory=list)
    stopped_element: int = None
    stop_reason: str = ""

    @property
    def last(self):
        return self.states[-1] if self.states else None


def centroid_gradients(macro_mesh):
    """dN/dX at the element centroid, cached on the mesh."""
    cache = getattr(macro_mesh, "_centroid_cache", None)
    if cache is not None:
        return cache
    X = macro_mesh.nodes[macro_mesh.elems]
    dNdxi = shape_gradients(0.0, 0.0)
    J = np.einsum("eai,aj->eij", X, dNdxi)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    Jinv = np.empty_like(J)
    Jinv[:, 0, 0] = J[:, 1, 1]
    Jinv[:, 0, 1] = -J[:, 0, 1]
    Jinv[:, 1, 0] = -J[:, 1, 0]
    Jinv[:, 1, 1] = J[:, 0, 0]
    Jinv /= det[:, None, None]
    dNdX = np.einsum("am,emj->eaj", dNdxi, Jinv)
    macro_mesh._centroid_cache = dNdX
    return dNdX


class TwoScaleSolver:
    """Macro FEM whose constitutive response is homogenized on the fly.

    The macro Newton tolerance defaults looser (1e-7) than the nested RVE
    tolerance (1e-9): upscaled stresses carry the nested solver's noise, so
    demanding 1e-9 at the macro level only burns iterations in that noise.
    """

    def __init__(self, macro_mesh, cell_mesh, cell_pairing, materials,
                 settings=None, rve_settings=None, jobs=1):
        self.macro = macro_mesh
        self.materials = materials
        self.settings = settings if settings is not None else SolveSettings(rtol=1e-7)
        if rve_settings is None:
            rve_settings = SolveSettings()
        self.jobs = max(1, int(jobs))
        self.rve = RveSolver(cell_mesh, cell_pairing, materials, settings=rve_settings)
        self.ne = macro_mesh.n_elems
        self._w = np.zeros((self.ne, cell_mesh.n_dofs))
        self._F = np.tile(I2, (self.ne, 1, 1))
        self.cell_Ghat = self.rve.reduction.reduce_matrix(gram_matrix(cell_mesh))

    def element_F(self, u_macro):
        dNdX = centroid_gradients(self.macro)
        ue = u_macro.reshape(-1, 2)[self.macro.elems]
        return I2 + np.einsum("eai,eaj->eij", ue, dNdX)

    def _upscale_one(self, e, F_new):
        state = self.rve.solve_to(F_new, w0=self._w[e], F_old=self._F[e])
        T = self.rve.macro_stress(state.u, F_new)
        C = self.rve.macro_tangent(state.u, F_new)
        return state.u, T, C

    def upscale(self, F_all):
        """Solve every linked RVE at its macro gradient; returns (T, C) stacks."""
        if self.jobs == 1:
            results = [self._upscale_one(e, F_all[e]) for e in range(self.ne)]
        else:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                results = list(pool.map(self._upscale_one, range(self.ne), F_all))
        T = np.array([r[1] for r in results])
        C = np.array([r[2] for r in results])
        for e, r in enumerate(results):
            self._w[e] = r[0]
        self._F = F_all.copy()
        return T, C

    def assemble_macro(self, u, T, C, F_c):
        """Internal forces and stiffness with the element response frozen at
        the centroid: the Gauss-point stress is the centroid stress expanded
        linearly through the centroid tangent, T + C : (F(gp) - F_c).

        The expansion keeps one RVE evaluation per element while letting the
        2x2 quadrature resist in-element bending; its mean over the element
        equals the centroid stress, so upscaled equilibrium is untouched.
        """
        ed = element_data(self.macro)
        from .fem import deformation_gradients

        Fg = deformation_gradients(self.macro, u)
        Tg = T[:, None] + np.einsum("eijkl,egkl->egij", C, Fg - F_c[:, None])
        fe = np.einsum("egij,egaj,eg->eai", Tg, ed["dNdX"], ed["detJ"], optimize=True)
        f = np.zeros(self.macro.n_dofs)
        np.add.at(f, ed["dof_idx"].ravel(), fe.reshape(-1, 8).ravel())
        Ke = np.einsum("egaj,eijkl,egbl,eg->eaibk", ed["dNdX"], C, ed["dNdX"],
                       ed["detJ"], optimize=True)
        K = sp.coo_matrix((Ke.ravel(), (ed["rows"], ed["cols"])),
                          shape=(self.macro.n_dofs, self.macro.n_dofs)).tocsr()
        return f, K

    def solve(self, constraints, t_end, n_steps, f_ext_fn=None, callback=None):
        """Incremental two-scale continuation.

        Any RVE hitting its instability (singular incremental operator) stops
        the run; the result carries the collected states and the offending
        element id.
        """
        red = constraints.finalize(self.macro.n_dofs)
        u = np.zeros(self.macro.n_dofs)
        result = Fe2Result()
        dt = t_end / n_steps
        t = 0.0
        while t < t_end - 1e-12 * t_end:
            t_try = min(t + dt, t_end)
            try:
                state = self._newton_step(red, t_try, u, f_ext_fn)
            except (AtInstabilityError, ContinuationError, InvalidDeformationError) as exc:
                result.stopped_element = getattr(exc, "element", None)
                result.stop_reason = str(exc)
                return result
            if state is None:
                if dt < (t_end / n_steps) * 0.5 ** self.settings.max_halvings:
                    result.stop_reason = f"macro step halving exhausted at t = {t:g}"
                    return result
                dt *= 0.5
                continue
            t = t_try
            dt = min(t_end / n_steps, 2.0 * dt)
            u = state.u_macro
            result.states.append(state)
            if callback is not None:
                verdict = callback(state)
                if verdict is not None and not bool(verdict):
                    break
        return result

    def _newton_step(self, red, t, u0, f_ext_fn):
        fext = f_ext_fn(t) if f_ext_fn is not None else np.zeros(self.macro.n_dofs)
        fext_hat = red.reduce_vector(fext)
        q = red.collapse(u0)
        u = red.expand(q, t)
        ref = np.linalg.norm(fext_hat)
        w_backup, F_backup = self._w.copy(), self._F.copy()
        for it in range(self.settings.max_iterations + 1):
            F_all = self.element_F(u)
            try:
                T, C = self.upscale(F_all)
            except (ContinuationError, InvalidDeformationError) as exc:
                self._w, self._F = w_backup, F_backup
                raise
            except AtInstabilityError as exc:
                self._w, self._F = w_backup, F_backup
                exc.element = getattr(exc, "element", None)
                raise
            f_int, K = self.assemble_macro(u, T, C, F_all)
            rhat = red.reduce_vector(f_int) - fext_hat
            rnorm = np.linalg.norm(rhat)
            if it == 0:
                ref = max(ref, rnorm)
            floor = 1e4 * np.finfo(float).eps * (np.abs(T).max() + 1.0) * max(self.macro.dims)
            if rnorm <= self.settings.rtol * ref + max(self.settings.atol, floor):
                return TwoScaleState(t, u.copy(), F_all, self._w.copy(), T, it, rnorm)
            if it == self.settings.max_iterations:
                self._w, self._F = w_backup, F_backup
                return None
            Khat = red.reduce_matrix(K)
            dq = sparse_solve(Khat, -rhat)
            q = q + dq
            u = red.expand(q, t)
        return None

    def stability_curve(self, states, stride=1, stop_ratio=-0.05):
        """Minimum one-cell eigenvalue over all linked RVEs along the path.

        Realizes the semi-concurrent stability analysis: each element
        contributes the periodic eigenvalue of its own cell at its current
        macro gradient; the curve reports which element attains the minimum.
        """
        cell = self.rve.mesh
        red = self.rve.reduction
        lam0, _ = min_eigenvalue(*stability_matrices(
            cell, self.materials, np.zeros(cell.n_dofs), red, F0=I2,
            Ghat=self.cell_Ghat))
        ts, raw, att, modes = [0.0], [lam0], [-1], [None]
        for state in states[::stride]:
            best = None
            for e in range(self.ne):
                Khat, _ = stability_matrices(cell, self.materials, state.w_elements[e],
                                             red, F0=state.F_elements[e],
                                             Ghat=self.cell_Ghat)
                lam, vec = min_eigenvalue(Khat, self.cell_Ghat)
                if best is None or lam < best[0]:
                    best = (lam, e, vec)
            ts.append(state.t)
            raw.append(best[0])
            att.append(best[1])
            modes.append(best[2])
            if best[0] / lam0 < stop_ratio:
                break
        raw = np.asarray(raw)
        curve = StabilityCurve(np.asarray(ts), raw / lam0, raw, lam0,
                               np.asarray(att, dtype=int), modes)
        return curve


def critical_element_cell(macro_mesh, element_id):
    """(i, j) grid position of a macro element (= its unit cell footprint)."""
    from .mesh import macro_grid_shape

    kx, _ = macro_grid_shape(macro_mesh)
    return (element_id % kx, element_id // kx)
