"""Total-Lagrangian quad-4 finite element engine.

Assembly is vectorized over elements (grouped by material region) with a
fixed reduction order, so residuals are bit-reproducible.  Constraints are
handled by single-level master-slave elimination: the solver works on the
retained unknowns q with u = T q + g(t), which keeps the reduced operator
symmetric and lets factorization inertia double as a stability check.

Quadrature is 2x2 Gauss everywhere; no reduced integration.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    ConstraintGraphError,
    ContinuationError,
    ContractViolation,
    HullExceededError,
    InvalidDeformationError,
    OutOfRangeStrainError,
    RankDeficiencyError,
)

_G = 1.0 / np.sqrt(3.0)
GAUSS_POINTS = np.array([[-_G, -_G], [_G, -_G], [_G, _G], [-_G, _G]])
GAUSS_WEIGHTS = np.ones(4)

I2 = np.eye(2)


def shape_gradients(xi, eta):
    """dN/d(xi,eta) of the 4 bilinear shape functions, counterclockwise."""
    return 0.25 * np.array([
        [-(1 - eta), -(1 - xi)],
        [(1 - eta), -(1 + xi)],
        [(1 + eta), (1 + xi)],
        [-(1 + eta), (1 - xi)],
    ])


def shape_values(xi, eta):
    return 0.25 * np.array([
        (1 - xi) * (1 - eta), (1 + xi) * (1 - eta),
        (1 + xi) * (1 + eta), (1 - xi) * (1 + eta),
    ])


def element_data(mesh):
    """Per-mesh cache of shape gradients, Jacobians and scatter indices."""
    cache = getattr(mesh, "_fem_cache", None)
    if cache is not None:
        return cache
    X = mesh.nodes[mesh.elems]  # (ne, 4, 2)
    ne = X.shape[0]
    dNdX = np.empty((ne, 4, 4, 2))
    detJ = np.empty((ne, 4))
    for g, (xi, eta) in enumerate(GAUSS_POINTS):
        dNdxi = shape_gradients(xi, eta)  # (4, 2)
        J = np.einsum("eai,aj->eij", X, dNdxi)
        dj = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        if np.any(dj <= 0.0):
            raise ContractViolation("element with non-positive reference Jacobian")
        Jinv = np.empty_like(J)
        Jinv[:, 0, 0] = J[:, 1, 1]
        Jinv[:, 0, 1] = -J[:, 0, 1]
        Jinv[:, 1, 0] = -J[:, 1, 0]
        Jinv[:, 1, 1] = J[:, 0, 0]
        Jinv /= dj[:, None, None]
        dNdX[:, g] = np.einsum("am,emj->eaj", dNdxi, Jinv)
        detJ[:, g] = dj
    dof_idx = np.empty((ne, 8), dtype=np.int64)
    dof_idx[:, 0::2] = 2 * mesh.elems
    dof_idx[:, 1::2] = 2 * mesh.elems + 1
    rows = np.broadcast_to(dof_idx[:, :, None], (ne, 8, 8)).ravel()
    cols = np.broadcast_to(dof_idx[:, None, :], (ne, 8, 8)).ravel()
    cache = {
        "dNdX": dNdX, "detJ": detJ, "dof_idx": dof_idx,
        "rows": rows, "cols": cols,
        "groups": {tag: np.where(mesh.region == tag)[0] for tag in np.unique(mesh.region)},
    }
    mesh._fem_cache = cache
    return cache


def deformation_gradients(mesh, u, F0=None):
    """F at every quadrature point, (ne, 4, 2, 2); F = F0 + grad(u)."""
    ed = element_data(mesh)
    ue = u.reshape(-1, 2)[mesh.elems]
    grad = np.einsum("eai,egaj->egij", ue, ed["dNdX"])
    base = I2 if F0 is None else np.asarray(F0)
    return base + grad


def evaluate_materials(mesh, materials, F, need_tangent=True):
    """Pointwise stress (and tangent) arrays over all quadrature points."""
    ed = element_data(mesh)
    ne = F.shape[0]
    W = np.zeros((ne, 4))
    T = np.zeros((ne, 4, 2, 2))
    A = np.zeros((ne, 4, 2, 2, 2, 2)) if need_tangent else None
    for tag, idx in ed["groups"].items():
        mat = materials[tag]
        w, t, a = mat.evaluate(F[idx], need_tangent=need_tangent)
        if w is not None:
            W[idx] = w
        T[idx] = t
        if need_tangent:
            A[idx] = a
    return W, T, A


def internal_forces(mesh, materials, u, F0=None):
    """Assembled internal nominal force vector (2n,)."""
    ed = element_data(mesh)
    F = deformation_gradients(mesh, u, F0)
    _, T, _ = evaluate_materials(mesh, materials, F, need_tangent=False)
    fe = np.einsum("egij,egaj,eg->eai", T, ed["dNdX"], ed["detJ"], optimize=True)
    f = np.zeros(mesh.n_dofs)
    np.add.at(f, ed["dof_idx"].ravel(), fe.reshape(-1, 8).ravel())
    return f


def assemble(mesh, materials, u, F0=None, need_tangent=True):
    """Internal force vector and (optionally) tangent stiffness matrix.

    Returns (f_int, K) with K None when need_tangent is False.  Raises
    InvalidDeformationError via the material laws if det F <= 0 anywhere,
    which the continuation driver turns into step halving.
    """
    ed = element_data(mesh)
    F = deformation_gradients(mesh, u, F0)
    _, T, A = evaluate_materials(mesh, materials, F, need_tangent=need_tangent)
    fe = np.einsum("egij,egaj,eg->eai", T, ed["dNdX"], ed["detJ"], optimize=True)
    f = np.zeros(mesh.n_dofs)
    np.add.at(f, ed["dof_idx"].ravel(), fe.reshape(-1, 8).ravel())
    if not need_tangent:
        return f, None
    Ke = np.einsum("egaj,egijkl,egbl,eg->eaibk", ed["dNdX"], A, ed["dNdX"], ed["detJ"],
                   optimize=True)
    K = sp.coo_matrix((Ke.ravel(), (ed["rows"], ed["cols"])),
                      shape=(mesh.n_dofs, mesh.n_dofs)).tocsr()
    return f, K


def gram_matrix(mesh):
    """Gradient Gram matrix G with u^T G u = integral of grad(u):grad(u) dV."""
    ed = element_data(mesh)
    ge = np.einsum("egaj,egbj,eg->eab", ed["dNdX"], ed["dNdX"], ed["detJ"], optimize=True)
    Ke = np.einsum("eab,ik->eaibk", ge, I2)
    return sp.coo_matrix((Ke.ravel(), (ed["rows"], ed["cols"])),
                         shape=(mesh.n_dofs, mesh.n_dofs)).tocsr()


def total_energy(mesh, materials, u, F0=None):
    ed = element_data(mesh)
    F = deformation_gradients(mesh, u, F0)
    W, _, _ = evaluate_materials(mesh, materials, F, need_tangent=False)
    return float(np.einsum("eg,eg->", W, ed["detJ"]))


def element_fields(mesh, materials, u, F0=None):
    """Per-element mean energy density and det F, for VTK inspection."""
    ed = element_data(mesh)
    F = deformation_gradients(mesh, u, F0)
    W, _, _ = evaluate_materials(mesh, materials, F, need_tangent=False)
    detF = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    vol = ed["detJ"].sum(axis=1)
    return (W * ed["detJ"]).sum(axis=1) / vol, (detF * ed["detJ"]).sum(axis=1) / vol


def edge_load(mesh, axis, value, traction, span=None, tol=1e-9):
    """Consistent nodal loads of a constant reference traction on a mesh line.

    axis/value select the line (e.g. axis=1, value=H for the top edge);
    traction is the force per unit reference length (vector); span
    optionally restricts to a coordinate interval along the edge.
    """
    on_line = np.abs(mesh.nodes[:, axis] - value) <= tol * max(1.0, abs(value))
    f = np.zeros(mesh.n_dofs)
    tau = np.asarray(traction, dtype=float)
    other = 1 - axis
    for e in mesh.elems:
        for a in range(4):
            n1, n2 = e[a], e[(a + 1) % 4]
            if not (on_line[n1] and on_line[n2]):
                continue
            mid = 0.5 * (mesh.nodes[n1, other] + mesh.nodes[n2, other])
            if span is not None and not (span[0] - tol <= mid <= span[1] + tol):
                continue
            ell = abs(mesh.nodes[n2, other] - mesh.nodes[n1, other])
            for n in (n1, n2):
                f[2 * n:2 * n + 2] += 0.5 * ell * tau
    return f


def _as_fn(v):
    return v if callable(v) else (lambda t, _v=float(v): _v)


class ConstraintSet:
    """Dirichlet plus linear multipoint constraints with load-factor inhomogeneities."""

    def __init__(self):
        self.dirichlet = {}
        self.mpc = {}

    def fix(self, dof, value=0.0):
        self.dirichlet[int(dof)] = _as_fn(value)

    def fix_node(self, node, ux=None, uy=None):
        if ux is not None:
            self.fix(2 * node, ux)
        if uy is not None:
            self.fix(2 * node + 1, uy)

    def tie(self, slave_dof, masters, inhomog=0.0):
        """slave = sum(coeff * master) + inhomog(t)."""
        slave_dof = int(slave_dof)
        if slave_dof in self.mpc:
            raise ConstraintGraphError(f"dof {slave_dof} already a slave")
        self.mpc[slave_dof] = ([(int(m), float(c)) for m, c in masters], _as_fn(inhomog))

    def tie_node(self, slave_node, masters, inhomog=(0.0, 0.0)):
        """Tie both dofs of a node: masters is [(node, coeff), ...]."""
        for i in range(2):
            self.tie(2 * slave_node + i, [(2 * m + i, c) for m, c in masters],
                     _as_fn(inhomog[i]) if not callable(inhomog) else (lambda t, _i=i: inhomog(t)[_i]))

    def periodic_rve(self, pairing, macro_gradient_fn=None):
        """Periodic ties u(+) - u(-) = (Fbar - I) (X+ - X-), all corners to one master.

        With macro_gradient_fn None (the fluctuation formulation) the ties are
        homogeneous and the base gradient is imposed through assembly instead.
        """
        for (p, m), vi in zip(pairing.pairs, pairing.vector_index):
            if macro_gradient_fn is None:
                self.tie_node(p, [(m, 1.0)])
            else:
                vec = pairing.vectors[vi]
                self.tie_node(p, [(m, 1.0)],
                              inhomog=(lambda t, _v=vec: (macro_gradient_fn(t) - I2) @ _v))
        master = pairing.corners[0]
        for c, shift in zip(pairing.corners[1:], pairing.corner_shifts):
            if macro_gradient_fn is None:
                self.tie_node(c, [(master, 1.0)])
            else:
                self.tie_node(c, [(master, 1.0)],
                              inhomog=(lambda t, _v=shift: (macro_gradient_fn(t) - I2) @ _v))
        self.fix_node(master, 0.0, 0.0)

    def finalize(self, n_dofs):
        return Reduction(self, n_dofs)


class Reduction:
    """u = T q + g(t) with q the retained unknowns."""

    def __init__(self, cs: ConstraintSet, n_dofs):
        overlap = set(cs.dirichlet) & set(cs.mpc)
        if overlap:
            raise ConstraintGraphError(f"dofs both Dirichlet and slave: {sorted(overlap)[:5]}")
        for s, (masters, _) in cs.mpc.items():
            for m, _c in masters:
                if m in cs.mpc:
                    raise ConstraintGraphError(
                        f"slave {s} references slave {m}: single-level elimination only")
                if m == s:
                    raise ConstraintGraphError(f"dof {s} tied to itself")
        self.n = n_dofs
        removed = set(cs.dirichlet) | set(cs.mpc)
        self.retained = np.array(sorted(set(range(n_dofs)) - removed), dtype=np.int64)
        col = -np.ones(n_dofs, dtype=np.int64)
        col[self.retained] = np.arange(self.retained.size)
        rows, cols, vals = list(self.retained), list(range(self.retained.size)), [1.0] * self.retained.size
        self._g_static = []  # (dof, fn)
        for d, fn in cs.dirichlet.items():
            self._g_static.append((d, fn))
        self._g_slave = []  # (dof, fn, [(dirichlet_master_fn, coeff)...])
        for s, (masters, fn) in cs.mpc.items():
            folds = []
            for m, c in masters:
                if m in cs.dirichlet:
                    folds.append((cs.dirichlet[m], c))
                else:
                    rows.append(s)
                    cols.append(col[m])
                    vals.append(c)
            self._g_slave.append((s, fn, folds))
        self.T = sp.coo_matrix((vals, (rows, cols)), shape=(n_dofs, self.retained.size)).tocsr()
        self.Tt = self.T.T.tocsr()
        self.n_dirichlet = len(cs.dirichlet)
        self.n_slave = len(cs.mpc)

    @property
    def n_retained(self):
        return self.retained.size

    def dof_counts(self):
        return {"total": self.n, "free": self.n_retained,
                "dirichlet": self.n_dirichlet, "eliminated": self.n_slave}

    def g(self, t):
        out = np.zeros(self.n)
        for d, fn in self._g_static:
            out[d] = fn(t)
        for s, fn, folds in self._g_slave:
            out[s] = fn(t) + sum(c * mfn(t) for mfn, c in folds)
        return out

    def expand(self, q, t=0.0):
        u = self.T @ q
        u += self.g(t)
        return u

    def collapse(self, u):
        return u[self.retained]

    def reduce_matrix(self, K):
        return (self.Tt @ K @ self.T).tocsc()

    def reduce_vector(self, r):
        return self.Tt @ r


def sparse_solve(K, b, check=False):
    """Direct sparse solve via LU; raises RankDeficiencyError on singularity.

    LU with partial pivoting is backward stable, so an inconsistent
    (rank-deficient) system shows up as a residual comparable to ||b||;
    that guard costs one mat-vec.
    """
    if K.shape[0] != K.shape[1] or K.shape[0] != b.shape[0]:
        raise ContractViolation("sparse_solve shape mismatch")
    try:
        lu = spla.splu(K.tocsc())
        x = lu.solve(b)
    except RuntimeError as exc:
        raise RankDeficiencyError(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise RankDeficiencyError("non-finite solution from factorization")
    nb = np.linalg.norm(b)
    if nb > 0:
        rel = np.linalg.norm(K @ x - b) / nb
        if rel > (1e-10 if check else 1e-7):
            raise RankDeficiencyError(f"direct solve residual {rel:g} above contract")
    return x


@dataclass
class SolveSettings:
    rtol: float = 1e-9
    atol: float = 1e-12
    max_iterations: int = 25
    max_halvings: int = 6

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ContractViolation("tolerances must be positive")


@dataclass
class SystemState:
    """Converged snapshot: displacement (or fluctuation) vector at load factor t."""

    u: np.ndarray
    t: float
    iterations: int = 0
    residual_norm: float = 0.0
    residual_history: list = field(default_factory=list)


def newton_solve(mesh, materials, reduction, t, u0, settings, f_ext=None, F0=None):
    """Full Newton at fixed load factor; returns a converged SystemState or None.

    Convergence: ||r|| <= rtol * max(||f_ext||, ||r_0||) plus a roundoff
    floor proportional to the stiffness norm, so warm-started solves whose
    initial residual already sits at machine level are accepted.
    """
    q = reduction.collapse(u0)
    u = reduction.expand(q, t)
    fext = np.zeros(mesh.n_dofs) if f_ext is None else f_ext
    fext_hat = reduction.reduce_vector(fext)
    ref = np.linalg.norm(fext_hat)
    history = []
    for it in range(settings.max_iterations + 1):
        f_int, K = assemble(mesh, materials, u, F0=F0, need_tangent=True)
        rhat = reduction.reduce_vector(f_int) - fext_hat
        rnorm = np.linalg.norm(rhat)
        history.append(rnorm)
        if it == 0:
            ref = max(ref, rnorm)
        Khat = reduction.reduce_matrix(K)
        floor = 200.0 * np.finfo(float).eps * _frobenius(Khat) * (1.0 + np.linalg.norm(q))
        if rnorm <= settings.rtol * ref + max(settings.atol, floor):
            return SystemState(u.copy(), t, it, rnorm, history)
        if it == settings.max_iterations:
            return None
        dq = sparse_solve(Khat, -rhat)
        q = q + dq
        u = reduction.expand(q, t)
    return None


def _frobenius(A):
    return float(np.sqrt((A.data * A.data).sum())) if A.nnz else 0.0


def newton_continue(mesh, materials, constraints, settings, t_end, n_steps,
                    f_ext_fn=None, F0_fn=None, u0=None, callback=None,
                    reduction=None):
    """Incremental continuation along a monotone load path.

    f_ext_fn(t) supplies the external load vector; F0_fn(t) the base
    deformation gradient for fluctuation-form problems.  On Newton failure
    the increment is halved up to settings.max_halvings; exhaustion raises
    ContinuationError carrying the states collected so far.  callback(state)
    may return False to stop early (still returning the collected states).
    """
    if t_end <= 0:
        raise ContractViolation("t_end must be positive")
    if reduction is None:
        reduction = constraints.finalize(mesh.n_dofs)
    u = np.zeros(mesh.n_dofs) if u0 is None else u0.copy()
    states = []
    t = 0.0
    dt0 = t_end / n_steps
    dt = dt0
    dt_min = dt0 * 0.5 ** settings.max_halvings
    last_hull_exc = None
    while t < t_end - 1e-12 * t_end:
        t_try = min(t + dt, t_end)
        f_ext = f_ext_fn(t_try) if f_ext_fn is not None else None
        F0 = F0_fn(t_try) if F0_fn is not None else None
        try:
            state = newton_solve(mesh, materials, reduction, t_try, u, settings,
                                 f_ext=f_ext, F0=F0)
        except (InvalidDeformationError, OutOfRangeStrainError, RankDeficiencyError):
            state = None  # too-large increment: fall through to step halving
        except HullExceededError as exc:
            # transient overshoot may resolve at a smaller step; if halving
            # floors out the hull error (naming element and strain) wins
            state = None
            last_hull_exc = exc
        if state is None:
            # the floor (not a consecutive-failure count) bounds the work near
            # a singular point, where halve/succeed/double would cycle forever
            if 0.5 * dt < dt_min:
                if last_hull_exc is not None:
                    last_hull_exc.states = states
                    raise last_hull_exc
                raise ContinuationError(
                    f"step halving exhausted at t = {t:g}", last_good_t=t, states=states)
            dt *= 0.5
            continue
        last_hull_exc = None
        dt = min(dt0, 2.0 * dt)
        t = t_try
        u = state.u
        states.append(state)
        if callback is not None:
            verdict = callback(state)
            # None means "no opinion"; any falsy verdict stops the path
            if verdict is not None and not bool(verdict):
                break
    return states
