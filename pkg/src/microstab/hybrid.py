"""Hybrid hierarchical/concurrent solver.

Two-level domain decomposition: critical regions carry the fully resolved
microstructure, the remaining elements evaluate the transformed constitutive
database at their Gauss points.  The weak form everywhere is written in the
work-conjugate (Green-Lagrange strain, second Piola-Kirchhoff stress) pair;
for resolved elements that is algebraically identical to the nominal form,
so one assembler serves both.  Compatibility across the fine/coarse
interface is enforced by node-to-edge linear tie constraints (fine slave,
coarse master), which also transmit momentum balance variationally.
"""

from dataclasses import dataclass, field

import numpy as np

from .database import DatabaseInterpolator, TransformedDatabase
from .errors import HullExceededError, InvalidDeformationError
from .fem import ConstraintSet
from .kinematics import det2
from .mesh import DB, embed_fine_region

I2 = np.eye(2)


class DatabaseMaterial:
    """Pointwise constitutive evaluation backed by the transformed database.

    Stress and tangent come from trilinear interpolation over the stretch
    rays: T_R = F S(E), A = d(F S)/dF with the interpolated material tangent.
    Strain energy is not stored in the database, so the energy slot is None.
    """

    def __init__(self, db_or_interp):
        if isinstance(db_or_interp, TransformedDatabase):
            db_or_interp = DatabaseInterpolator(db_or_interp)
        self.interp = db_or_interp
        self.element_ids = None  # set by build_hybrid for error reporting

    def evaluate(self, F, need_tangent=True):
        F = np.asarray(F, dtype=float)
        J = det2(F)
        if np.any(J <= 0.0):
            raise InvalidDeformationError("det F <= 0 in database element")
        E = 0.5 * (np.einsum("...ki,...kj->...ij", F, F) - I2)
        try:
            S, C2 = self.interp.query(E)
        except HullExceededError as exc:
            if self.element_ids is not None and E.ndim == 4:
                flat = E.reshape(-1, 2, 2)
                bad = next(i for i in range(flat.shape[0])
                           if exc.strain is not None and np.allclose(flat[i], exc.strain))
                exc.element = int(self.element_ids[bad // E.shape[1]])
            raise
        T = F @ S
        A = None
        if need_tangent:
            A = np.einsum("ik,...lj->...ijkl", I2, S) + np.einsum(
                "...im,...kn,...mjnl->...ijkl", F, F, C2, optimize=True)
        return None, T, A


@dataclass
class HybridModel:
    """Composite mesh, its material table, and the interface tie map."""

    mesh: object
    materials: dict
    ties: list
    macro_mesh: object
    cell_dims: tuple
    critical_boxes: list = field(default_factory=list)

    def tie_constraints(self, cs: ConstraintSet = None):
        """Install the fine-to-coarse edge ties (homogeneous, load-independent)."""
        if cs is None:
            cs = ConstraintSet()
        for fine, na, nb, s in self.ties:
            if s <= 1e-12:
                masters = [(na, 1.0)]
            elif s >= 1.0 - 1e-12:
                masters = [(nb, 1.0)]
            else:
                masters = [(na, 1.0 - s), (nb, s)]
            cs.tie_node(int(fine), masters)
        return cs

    def dof_counts(self):
        return {"total": self.mesh.n_dofs, "ties": len(self.ties)}


def build_hybrid(macro_mesh, critical_boxes, cell_mesh, database, fine_materials):
    """Assemble the hybrid model from a macro grid and a resolved cell.

    critical_boxes are axis-aligned (x0, y0, x1, y1) in macro coordinates,
    aligned with macro element edges; database is a TransformedDatabase (or
    interpolator) serving the retained coarse elements; fine_materials maps
    the cell's region tags to point materials.
    """
    comp, ties = embed_fine_region(macro_mesh, critical_boxes, cell_mesh)
    materials = dict(fine_materials)
    if np.any(comp.region == DB):
        dbmat = DatabaseMaterial(database)
        from .fem import element_data

        ed = element_data(comp)
        dbmat.element_ids = ed["groups"][DB]
        materials[DB] = dbmat
    xs, ys = cell_mesh.grid
    cell_dims = (float(xs[-1] - xs[0]), float(ys[-1] - ys[0]))
    return HybridModel(comp, materials, ties, macro_mesh, cell_dims,
                       list(critical_boxes))
