"""Plane-strain tensor algebra shared by every solver layer.

All tensors are plain 2x2 (or 2x2x2x2) numpy arrays; the out-of-plane
direction is handled implicitly by the plane-strain convention
F33 = 1, F13 = F23 = 0.  Functions accept stacked inputs with leading
batch axes (..., 2, 2) and are pure.
"""

import numpy as np

from .errors import ContractViolation, InvalidDeformationError, OutOfRangeStrainError

I2 = np.eye(2)

SYM_ABS_TOL = 1e-12


def det2(A):
    """Determinant of (..., 2, 2) stacks without LAPACK overhead."""
    return A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]


def inv2(A):
    """Inverse of (..., 2, 2) stacks via the adjugate."""
    d = det2(A)
    out = np.empty_like(A)
    out[..., 0, 0] = A[..., 1, 1]
    out[..., 0, 1] = -A[..., 0, 1]
    out[..., 1, 0] = -A[..., 1, 0]
    out[..., 1, 1] = A[..., 0, 0]
    return out / d[..., None, None]


def _require_positive_det(F, what="deformation gradient"):
    d = det2(np.asarray(F, dtype=float))
    if np.any(~np.isfinite(d)) or np.any(d <= 0.0):
        raise InvalidDeformationError(f"non-positive determinant in {what}: min det = {np.min(d):g}")
    return d


def _require_symmetric(A, tol, what):
    A = np.asarray(A, dtype=float)
    skew = np.abs(A[..., 0, 1] - A[..., 1, 0])
    if np.any(skew > tol):
        raise ContractViolation(f"{what} not symmetric: max |A12 - A21| = {np.max(skew):g}")
    return A


def sqrtm_spd2(C):
    """Principal square root of SPD (..., 2, 2) tensors, closed form.

    For 2x2 SPD C the unique SPD root is
    (C + sqrt(det C) I) / sqrt(tr C + 2 sqrt(det C)).
    """
    C = np.asarray(C, dtype=float)
    d = det2(C)
    tr = C[..., 0, 0] + C[..., 1, 1]
    if np.any(d <= 0.0) or np.any(tr <= 0.0):
        raise OutOfRangeStrainError("matrix not symmetric positive-definite")
    s = np.sqrt(d)
    denom = np.sqrt(tr + 2.0 * s)
    out = C + s[..., None, None] * I2
    return out / denom[..., None, None]


def polar_decompose(F):
    """Right polar decomposition F = R U.

    Parameters
    ----------
    F : (..., 2, 2) array
        Deformation gradient(s), det F > 0.

    Returns
    -------
    R : (..., 2, 2) rotation, U : (..., 2, 2) SPD right stretch.
    """
    F = np.asarray(F, dtype=float)
    _require_positive_det(F)
    C = np.swapaxes(F, -1, -2) @ F
    U = sqrtm_spd2(C)
    R = F @ inv2(U)
    return R, U


def green_lagrange(U):
    """Green-Lagrange strain E = (U^2 - I)/2 of a right stretch tensor."""
    U = _require_symmetric(U, SYM_ABS_TOL, "right stretch")
    E = 0.5 * (U @ U - I2)
    # exact symmetrization kills roundoff in U @ U
    return 0.5 * (E + np.swapaxes(E, -1, -2))


def stretch_from_green(E):
    """Recover the unique SPD right stretch U with (U^2 - I)/2 = E."""
    E = _require_symmetric(E, SYM_ABS_TOL, "Green-Lagrange strain")
    return sqrtm_spd2(2.0 * E + I2)


def pk1_to_pk2(F, T_R):
    """Second Piola-Kirchhoff stress F^{-1} T_R from the nominal stress."""
    F = np.asarray(F, dtype=float)
    _require_positive_det(F)
    return inv2(F) @ np.asarray(T_R, dtype=float)


def spherical_from_stretch(U, rtol=1e-9):
    """Invert the radial stretch parametrization.

    The stretch-space rays are U(t) = I + t * (cos(phi) sin(theta),
    sin(phi) sin(theta)) on the diagonal and t * cos(theta) off-diagonal.
    Returns (theta_deg, phi_deg, t) with theta in [0, 180], phi in [0, 360).
    """
    U = np.asarray(U, dtype=float)
    px = U[0, 0] - 1.0
    py = U[1, 1] - 1.0
    pz = 0.5 * (U[0, 1] + U[1, 0])
    t = float(np.sqrt(px * px + py * py + pz * pz))
    if t < rtol:
        return 0.0, 0.0, 0.0
    theta = float(np.degrees(np.arccos(np.clip(pz / t, -1.0, 1.0))))
    phi = float(np.degrees(np.arctan2(py, px))) % 360.0
    return theta, phi, t


def stretch_on_ray(theta_deg, phi_deg, t):
    """Radial-path right stretch U(theta, phi, t) in stretch space."""
    th = np.radians(theta_deg)
    ph = np.radians(phi_deg)
    st = np.sin(th)
    return np.array(
        [
            [1.0 + t * np.cos(ph) * st, t * np.cos(th)],
            [t * np.cos(th), 1.0 + t * np.sin(ph) * st],
        ]
    )


def rotation(angle_rad):
    """Proper in-plane rotation tensor."""
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, -s], [s, c]])
