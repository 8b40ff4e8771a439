"""Constitutive point models.

Two laws are provided:

* a compressible neo-Hookean solid for matrix and fiber phases, with
  plane-strain energy density
  W = mu/2 (F:F - 2 - 2 ln J) + (kappa - mu)/2 (J - 1)^2,
* a Saint Venant-Kirchhoff realization of the stiff linear-elastic
  surface layer (linear in Green-Lagrange strain so that it embeds in
  the total-Lagrangian solver without a small-strain code path).

All evaluators take stacked deformation gradients (..., 2, 2) and return
energies (...,), nominal stresses (..., 2, 2) and nominal tangent moduli
(..., 2, 2, 2, 2).  Derivatives are closed form; finite-difference checks
live in the test suite.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, InvalidDeformationError
from .kinematics import det2, inv2

_DELTA = np.eye(2)


@dataclass(frozen=True)
class NeoHookeanParams:
    """Compressible neo-Hookean parameters.

    mu is the shear modulus at zero strain (MPa); kappa plays the role of
    an equivalent 2D bulk modulus (MPa) and must satisfy kappa >= mu so
    the volumetric term is non-negative.
    """

    mu: float
    kappa: float

    def __post_init__(self):
        if not self.mu > 0.0:
            raise ContractViolation(f"mu must be positive, got {self.mu}")
        if not self.kappa >= self.mu:
            raise ContractViolation(f"kappa must be >= mu, got kappa={self.kappa}, mu={self.mu}")


@dataclass(frozen=True)
class LinearElasticParams:
    """Elastic modulus (MPa) and Poisson ratio of the stiff surface layer."""

    E: float
    nu: float

    def __post_init__(self):
        if not self.E > 0.0:
            raise ContractViolation(f"E must be positive, got {self.E}")
        if not -1.0 < self.nu < 0.5:
            raise ContractViolation(f"nu must lie in (-1, 0.5), got {self.nu}")

    def lame(self):
        lam = self.E * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))
        mu = self.E / (2.0 * (1.0 + self.nu))
        return lam, mu


def _jacobian(F):
    J = det2(F)
    if np.any(~np.isfinite(J)) or np.any(J <= 0.0):
        raise InvalidDeformationError(f"det F must be positive, min = {np.min(J):g}")
    return J


def strain_energy(F, p: NeoHookeanParams):
    """Neo-Hookean strain energy density (MPa)."""
    F = np.asarray(F, dtype=float)
    J = _jacobian(F)
    i1 = np.einsum("...ij,...ij->...", F, F)
    return 0.5 * p.mu * (i1 - 2.0 - 2.0 * np.log(J)) + 0.5 * (p.kappa - p.mu) * (J - 1.0) ** 2


def pk1_stress(F, p: NeoHookeanParams):
    """First Piola-Kirchhoff stress dW/dF = mu (F - F^-T) + (kappa-mu)(J-1) J F^-T."""
    F = np.asarray(F, dtype=float)
    J = _jacobian(F)
    Fit = np.swapaxes(inv2(F), -1, -2)
    vol = (p.kappa - p.mu) * ((J - 1.0) * J)[..., None, None]
    return p.mu * (F - Fit) + vol * Fit


def tangent_moduli(F, p: NeoHookeanParams):
    """Nominal tangent d^2W/dFdF with major symmetry C_ijkl = C_klij.

    Closed form:
      C_ijkl = mu d_ik d_jl
             + [mu - (kappa-mu)(J^2-J)] Finv_li Finv_jk
             + (kappa-mu)(2J-1) J Finv_ji Finv_lk
    with Finv = F^{-1} (so Finv_ji = (F^-T)_ij).
    """
    F = np.asarray(F, dtype=float)
    J = _jacobian(F)
    Fi = inv2(F)
    km = p.kappa - p.mu
    c1 = p.mu - km * (J * J - J)
    c2 = km * (2.0 * J - 1.0) * J
    C = np.einsum("ik,jl->ijkl", _DELTA, _DELTA) * np.ones_like(J)[..., None, None, None, None] * p.mu
    C += c1[..., None, None, None, None] * np.einsum("...li,...jk->...ijkl", Fi, Fi)
    C += c2[..., None, None, None, None] * np.einsum("...ji,...lk->...ijkl", Fi, Fi)
    return C


def plane_strain_stiffness(p: LinearElasticParams):
    """Isotropic plane-strain stiffness C_ijkl on symmetric second-order tensors."""
    lam, mu = p.lame()
    d = _DELTA
    return (
        lam * np.einsum("ij,kl->ijkl", d, d)
        + mu * (np.einsum("ik,jl->ijkl", d, d) + np.einsum("il,jk->ijkl", d, d))
    )


def linear_layer_response(F, p: LinearElasticParams):
    """Energy, nominal stress and nominal tangent of the Saint Venant-Kirchhoff layer.

    W = E_GL : C_lin : E_GL / 2 with E_GL = (F^T F - I)/2; the returned
    stress/tangent are exact F-derivatives (geometric stiffness included).
    """
    F = np.asarray(F, dtype=float)
    _jacobian(F)
    C_lin = plane_strain_stiffness(p)
    E = 0.5 * (np.einsum("...ki,...kj->...ij", F, F) - _DELTA)
    S = np.einsum("ijkl,...kl->...ij", C_lin, E)
    W = 0.5 * np.einsum("...ij,...ij->...", S, E)
    T = F @ S
    A = np.einsum("ik,...lj->...ijkl", _DELTA, S) + np.einsum(
        "...im,...kn,mjnl->...ijkl", F, F, C_lin
    )
    return W, T, A


class MaterialPoint:
    """A pointwise constitutive model usable by the element assembler.

    Exactly one of the supported laws is active; `evaluate` returns the
    (W, T_R, C^R) triple for stacked deformation gradients.
    """

    def __init__(self, model, params):
        if model not in ("neo-hookean", "linear-elastic"):
            raise ContractViolation(f"unknown material model {model!r}")
        expected = NeoHookeanParams if model == "neo-hookean" else LinearElasticParams
        if not isinstance(params, expected):
            raise ContractViolation(f"{model} requires {expected.__name__}")
        self.model = model
        self.params = params

    def evaluate(self, F, need_tangent=True):
        if self.model == "neo-hookean":
            W = strain_energy(F, self.params)
            T = pk1_stress(F, self.params)
            A = tangent_moduli(F, self.params) if need_tangent else None
            return W, T, A
        W, T, A = linear_layer_response(F, self.params)
        return W, T, (A if need_tangent else None)

    def to_dict(self):
        if self.model == "neo-hookean":
            return {"model": self.model, "mu": self.params.mu, "kappa": self.params.kappa}
        return {"model": self.model, "E": self.params.E, "nu": self.params.nu}

    @classmethod
    def from_dict(cls, d):
        if d["model"] == "neo-hookean":
            return cls("neo-hookean", NeoHookeanParams(d["mu"], d["kappa"]))
        return cls("linear-elastic", LinearElasticParams(d["E"], d["nu"]))

    def __repr__(self):
        return f"MaterialPoint({self.model}, {self.params})"


def neo_hookean(mu, kappa):
    return MaterialPoint("neo-hookean", NeoHookeanParams(mu, kappa))


def linear_elastic(E, nu):
    return MaterialPoint("linear-elastic", LinearElasticParams(E, nu))
