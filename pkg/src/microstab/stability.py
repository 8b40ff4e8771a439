"""Microscopic and structural stability analysis.

The stability operator is the tangent stiffness restricted to the admissible
incremental space (periodic fluctuations for RVE/ensemble analyses, the
structure's own homogeneous constraints for DNS/hybrid analyses).  Its
minimum eigenvalue, normalized by the gradient Gram matrix of the same
space, traces the curve whose zero crossing is the critical load factor;
the crossing is obtained by linear extrapolation of the terminal samples
because discretization imperfections keep the sampled minimum positive.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse.linalg as spla

from .errors import (
    ContinuationError,
    InvalidDeformationError,
    NoInstabilityDetectedError,
    NumericFailureError,
    RankDeficiencyError,
)
from .fem import assemble, gram_matrix
from .mesh import element_cells

DENSE_CUTOFF = 600


@dataclass
class ModeShape:
    """Eigenvector field with v^T G v = 1 and its locality classification."""

    vector: np.ndarray
    classification: str = "unclassified"
    cells_spanned: int = 0
    critical_cell: tuple = None


@dataclass
class StabilityCurve:
    """Samples (t, Lambda(t)/Lambda(0)) along a loading path."""

    t: np.ndarray
    lam: np.ndarray
    lam_raw: np.ndarray
    lam0: float
    attaining_k: np.ndarray = None
    modes: list = field(default_factory=list)

    def extrapolate_tc(self, m_fit=4):
        return extrapolate_tc(self.t, self.lam, m_fit=m_fit)

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("t,lambda_normalized,lambda_raw,attaining_k\n")
            ks = self.attaining_k if self.attaining_k is not None else np.ones_like(self.t)
            for t, ln, lr, k in zip(self.t, self.lam, self.lam_raw, ks):
                fh.write(f"{t:.12g},{ln:.12g},{lr:.12g},{int(k)}\n")


def stability_matrices(mesh, materials, u, reduction, F0=None, Ghat=None):
    """Reduced tangent stiffness and gradient Gram matrix at a converged state.

    The same homogeneous reduction applies to both: admissible increments
    satisfy the constraint set with zero inhomogeneity.
    """
    _, K = assemble(mesh, materials, u, F0=F0, need_tangent=True)
    Khat = reduction.reduce_matrix(K)
    if Ghat is None:
        Ghat = reduction.reduce_matrix(gram_matrix(mesh))
    return Khat, Ghat


def min_eigenvalue(Khat, Ghat, n_modes=4, method="auto"):
    """Smallest eigenvalue of K v = lam G v with its G-normalized eigenvector.

    Small systems use a dense generalized solver; larger ones shift-invert
    ARPACK.  The first shift sits slightly below zero so the factorized
    operator stays regular while the tracked eigenvalue crosses zero; the
    retry shifts use unequal multipliers to dodge an unlucky coincidence
    with an eigenvalue.
    """
    n = Khat.shape[0]
    if method == "dense" or (method == "auto" and n <= DENSE_CUTOFF):
        w, v = scipy.linalg.eigh(Khat.toarray(), Ghat.toarray())
        lam, vec = float(w[0]), v[:, 0]
    else:
        k = min(n_modes, n - 2)
        scale = abs(Khat.diagonal().sum()) / max(Ghat.diagonal().sum(), 1e-300)
        lam = vec = None
        last_exc = None
        for sigma in (-1.3e-3 * scale, -7.1e-2 * scale, -2.9e-1 * scale):
            try:
                w, v = spla.eigsh(Khat, k=k, M=Ghat, sigma=sigma, which="LM",
                                  maxiter=600, tol=1e-10)
                i = int(np.argmin(w))
                lam, vec = float(w[i]), v[:, i]
                break
            except (RuntimeError, spla.ArpackNoConvergence) as exc:
                last_exc = exc
        if lam is None:
            raise NumericFailureError(f"eigensolver failed: {last_exc}")
    nrm = vec @ (Ghat @ vec)
    if nrm <= 0:
        raise NumericFailureError("Gram matrix not positive definite on reduced space")
    return lam, vec / np.sqrt(nrm)


def negative_inertia(Khat):
    """Number of negative eigenvalues of a reduced symmetric operator (dense)."""
    w = scipy.linalg.eigvalsh(Khat.toarray())
    return int(np.sum(w < 0.0))


def mode_cell_masses(mesh, vector, cell_dims, origin=(0.0, 0.0)):
    """H1-seminorm mass of a full-space mode vector per unit-cell footprint."""
    from .fem import element_data

    ed = element_data(mesh)
    ue = vector.reshape(-1, 2)[mesh.elems]
    grad = np.einsum("eai,egaj->egij", ue, ed["dNdX"])
    me = np.einsum("egij,egij,eg->e", grad, grad, ed["detJ"])
    cells = element_cells(mesh, cell_dims, origin)
    masses = {}
    for (i, j), m in zip(map(tuple, cells), me):
        masses[(i, j)] = masses.get((i, j), 0.0) + float(m)
    return masses


def classify_mode(mesh, vector, cell_dims, origin=(0.0, 0.0), local_cells=2, mass_fraction=0.9):
    """Local vs global tag: local iff >= 90% of the H1 mass sits in 2 cells."""
    masses = mode_cell_masses(mesh, vector, cell_dims, origin)
    total = sum(masses.values())
    ranked = sorted(masses.items(), key=lambda kv: -kv[1])
    acc, spanned = 0.0, 0
    for _, m in ranked:
        acc += m
        spanned += 1
        if acc >= mass_fraction * total:
            break
    tag = "local" if spanned <= local_cells else "global"
    return ModeShape(vector, tag, spanned, critical_cell=ranked[0][0])


def extrapolate_tc(ts, lams, m_fit=4):
    """Zero crossing of a linear fit through the last m_fit samples.

    Requires at least 3 samples with a decreasing terminal window; raises
    NoInstabilityDetectedError otherwise.
    """
    ts = np.asarray(ts, dtype=float)
    lams = np.asarray(lams, dtype=float)
    if ts.size < 3:
        raise NoInstabilityDetectedError(f"need >= 3 samples, got {ts.size}")
    m = min(m_fit, ts.size)
    tw, lw = ts[-m:], lams[-m:]
    if not np.all(np.diff(lw) < 0.0):
        raise NoInstabilityDetectedError("terminal window is not decreasing")
    A = np.column_stack([np.ones(m), tw])
    (a, b), *_ = np.linalg.lstsq(A, lw, rcond=None)
    if b >= 0.0:
        raise NoInstabilityDetectedError("terminal fit has non-negative slope")
    return float(-a / b)


def sweep(driver, t_grid, k_list, stop_ratio=-0.05, classify=None):
    """Minimum normalized eigenvalue over a t grid and a list of ensembles.

    driver(k, t) returns (Khat, Ghat) at the converged state of ensemble k
    at load t, or None when the state is unreachable; t is called in
    non-decreasing order per k so drivers may warm-start.  The curve is cut
    when every ensemble is unreachable or the normalized minimum drops
    below stop_ratio.
    """
    ts, raw, att, modes = [], [], [], []
    lam0 = None
    for t in t_grid:
        best = None
        for k in k_list:
            mats = driver(k, t)
            if mats is None:
                continue
            lam, vec = min_eigenvalue(*mats)
            if best is None or lam < best[0]:
                best = (lam, k, vec)
        if best is None:
            break
        lam, k, vec = best
        if lam0 is None:
            if lam <= 0:
                raise NumericFailureError("non-positive stability eigenvalue at t = 0")
            lam0 = lam
        ts.append(t)
        raw.append(lam)
        att.append(k)
        modes.append(classify(k, vec) if classify is not None else ModeShape(vec))
        if lam / lam0 < stop_ratio:
            break
    ts = np.asarray(ts)
    raw = np.asarray(raw)
    return StabilityCurve(ts, raw / lam0, raw, lam0, np.asarray(att, dtype=int), modes)


def rve_ensemble_driver(cell_mesh, materials, F_fn, k_list, settings=None):
    """sweep() driver over k x k tiled ensembles of a periodic cell.

    Per ensemble it keeps a warm-started fluctuation along the monotone
    F_fn(t) path and a cached reduced Gram matrix.
    """
    from .homogenization import RveSolver
    from .mesh import tile

    solvers, Ghats, warm = {}, {}, {}

    def driver(k, t):
        if k not in solvers:
            mk, pk = tile(cell_mesh, k, k)
            solvers[k] = RveSolver(mk, pk, materials, settings=settings)
            Ghats[k] = solvers[k].reduction.reduce_matrix(gram_matrix(mk))
            warm[k] = (np.zeros(mk.n_dofs), np.eye(2))
        solver = solvers[k]
        w0, F_old = warm[k]
        F = F_fn(t) if t > 0 else np.eye(2)
        try:
            state = solver.solve_to(F, w0=w0, F_old=F_old)
        except (ContinuationError, InvalidDeformationError, RankDeficiencyError):
            return None
        warm[k] = (state.u, F)
        Khat, _ = stability_matrices(solver.mesh, materials, state.u,
                                     solver.reduction, F0=F, Ghat=Ghats[k])
        return Khat, Ghats[k]

    return driver


def sweep_rve_path(rve_solver, F_fn, t_end, n_steps, stride=1, stop_ratio=-0.05):
    """Stability curve of a single periodic cell/ensemble along Fbar(t).

    Runs the continuation and samples the eigenvalue every `stride` steps;
    stops once the normalized eigenvalue falls below stop_ratio.
    """
    mesh, red = rve_solver.mesh, rve_solver.reduction
    Ghat = red.reduce_matrix(gram_matrix(mesh))
    K0, _ = stability_matrices(mesh, rve_solver.materials, np.zeros(mesh.n_dofs),
                               red, F0=np.eye(2), Ghat=Ghat)
    lam0, _ = min_eigenvalue(K0, Ghat)
    ts, raw = [0.0], [lam0]
    counter = {"n": 0}

    def cb(state):
        counter["n"] += 1
        if counter["n"] % stride:
            return True
        Khat, _ = stability_matrices(mesh, rve_solver.materials, state.u, red,
                                     F0=F_fn(state.t), Ghat=Ghat)
        lam, _ = min_eigenvalue(Khat, Ghat)
        ts.append(state.t)
        raw.append(lam)
        return bool(lam / lam0 >= stop_ratio)

    try:
        rve_solver.solve_path(F_fn, t_end, n_steps, callback=cb)
    except ContinuationError:
        pass
    raw = np.asarray(raw)
    return StabilityCurve(np.asarray(ts), raw / lam0, raw, lam0,
                          np.ones(len(ts), dtype=int), [])


class StructuralSweeper:
    """Eigenvalue sampling bolted onto a structural continuation.

    Pass `callback` to newton_continue; it samples the minimum eigenvalue of
    the reduced tangent (actual boundary conditions, homogeneous form) every
    `stride` converged steps and stops the path once the normalized value
    drops below stop_ratio.  cell_dims enables local/global classification
    of the sampled modes.
    """

    def __init__(self, mesh, materials, reduction, cell_dims=None,
                 stride=1, stop_ratio=-0.05, keep_modes=True):
        self.mesh = mesh
        self.materials = materials
        self.reduction = reduction
        self.cell_dims = cell_dims
        self.stride = stride
        self.stop_ratio = stop_ratio
        self.keep_modes = keep_modes
        self.Ghat = reduction.reduce_matrix(gram_matrix(mesh))
        K0, _ = stability_matrices(mesh, materials, np.zeros(mesh.n_dofs),
                                   reduction, Ghat=self.Ghat)
        self.lam0, _ = min_eigenvalue(K0, self.Ghat)
        self.ts, self.raw, self.modes = [0.0], [self.lam0], [None]
        self._count = 0

    def sample(self, state):
        Khat, _ = stability_matrices(self.mesh, self.materials, state.u,
                                     self.reduction, Ghat=self.Ghat)
        lam, vec = min_eigenvalue(Khat, self.Ghat)
        self.ts.append(state.t)
        self.raw.append(lam)
        if self.keep_modes:
            full = self.reduction.T @ vec
            if self.cell_dims is not None:
                self.modes.append(classify_mode(self.mesh, full, self.cell_dims,
                                                self.mesh.origin))
            else:
                self.modes.append(ModeShape(full))
        else:
            self.modes.append(None)
        return lam

    def callback(self, state):
        self._count += 1
        if self._count % self.stride:
            return True
        lam = self.sample(state)
        return bool(lam / self.lam0 >= self.stop_ratio)

    def curve(self):
        raw = np.asarray(self.raw)
        return StabilityCurve(np.asarray(self.ts), raw / self.lam0, raw, self.lam0,
                              np.ones(len(self.ts), dtype=int), list(self.modes))


def strong_ellipticity(C, n_grid=36, refine_rounds=3, refine_pts=9):
    """Minimum of the acoustic quadratic form (m x N) : C : (m x N).

    Coarse angular grid over [0, pi)^2 followed by nested local refinement;
    a positive value indicates macroscopic (strong-ellipticity) stability.
    """
    C = np.asarray(C)

    def q_of(alphas, betas):
        N = np.column_stack([np.cos(alphas), np.sin(alphas)])
        m = np.column_stack([np.cos(betas), np.sin(betas)])
        return np.einsum("bi,aj,ijkl,bk,al->ab", m, N, C, m, N, optimize=True)

    a = np.linspace(0.0, np.pi, n_grid, endpoint=False)
    b = np.linspace(0.0, np.pi, n_grid, endpoint=False)
    q = q_of(a, b)
    ib, ia = np.unravel_index(np.argmin(q), q.shape)
    best_a, best_b = a[ia], b[ib]
    half = np.pi / n_grid
    best = float(q[ib, ia])
    for _ in range(refine_rounds):
        a = best_a + np.linspace(-half, half, refine_pts)
        b = best_b + np.linspace(-half, half, refine_pts)
        q = q_of(a, b)
        ib, ia = np.unravel_index(np.argmin(q), q.shape)
        best_a, best_b = a[ia], b[ib]
        best = float(q[ib, ia])
        half /= refine_pts - 1
    return best
