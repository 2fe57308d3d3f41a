"""Effective (homogenized) matrices from periodic corrector solves.

For a coefficient field A on the box Q_N = (0, N)^d, the corrector w_p for a
mean gradient p solves

    -div(A (p + grad w_p)) = 0,   w_p periodic on Q_N, zero mean,

and the truncated effective matrix is the flux average

    A*_N e_j = (1/|Q_N|) int_{Q_N} A (e_j + grad w_{e_j}).

The flux average is evaluated with the assembly quadrature; the energy form
(p_i + grad w_i)^T A (p_j + grad w_j) is evaluated alongside and must agree,
which pins the discrete variational identity (and hence the discrete Voigt
bound) as a standing self-check on every call.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import pde
from .errors import ConfigurationError, SelfCheckError
from .rfield import FieldRealization, _canon_unit_cell

DEFAULT_TOL = 1e-12


@dataclass
class CorrectorSolution:
    """Corrector for one canonical direction: potential plus cached gradients."""

    direction: int  # 0-based canonical basis index
    potential: pde.ScalarField
    gradient: np.ndarray  # (n_elements, n_quad, d)


@dataclass
class HomogenizedMatrix:
    """d x d effective matrix with a provenance tag."""

    values: np.ndarray
    provenance: str

    @property
    def d(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, idx):
        return self.values[idx]


def _operator_for(field: FieldRealization, r: int) -> tuple[pde.Mesh, np.ndarray, pde.DiscreteOperator]:
    mesh = pde.Mesh(d=field.d, N=field.N, r=r)
    coef = field.element_coefficients(r)
    op = pde.assemble(mesh, coef)
    return mesh, coef, op


def corrector(
    field: FieldRealization,
    r: int,
    direction: int,
    tol: float = DEFAULT_TOL,
    _op: Optional[pde.DiscreteOperator] = None,
) -> CorrectorSolution:
    """Solve the periodic corrector problem for canonical direction `direction`."""
    if not 0 <= direction < field.d:
        raise ConfigurationError(f"direction must be in [0, {field.d}), got {direction}")
    if _op is None:
        mesh, coef, op = _operator_for(field, r)
    else:
        op = _op
        mesh, coef = op.mesh, op.coefficients
    p = np.zeros(field.d)
    p[direction] = 1.0
    flux0 = (coef @ p)[:, None, :]  # constant over quadrature points
    rhs = pde.load_from_flux(mesh, flux0)
    w = pde.solve_periodic(op, rhs, tol=tol)
    return CorrectorSolution(direction=direction, potential=w, gradient=pde.gradient_at_quadrature(w))


def homogenized_matrix(
    field: FieldRealization,
    r: int,
    tol: float = DEFAULT_TOL,
    provenance: Optional[str] = None,
) -> HomogenizedMatrix:
    """Truncated effective matrix A*_N of one realization (flux average form)."""
    mesh, coef, op = _operator_for(field, r)
    d = field.d
    sols = [corrector(field, r, j, tol=tol, _op=op) for j in range(d)]
    eye = np.eye(d)
    # p_j + grad w_j at every quadrature point, per direction
    pg = [eye[j] + sols[j].gradient for j in range(d)]
    flux_cols = [pde.integrate_flux(mesh, np.einsum("eij,eqj->eqi", coef, pg[j])) for j in range(d)]
    a_flux = np.stack(flux_cols, axis=1) / mesh.volume
    a_energy = _energy_matrix(coef, pg, mesh.quad_weights) / mesh.volume
    scale = max(1.0, float(np.abs(coef).max()))
    check_tol = max(1e-10, 50.0 * tol) * scale
    gap = float(np.abs(a_flux - a_energy).max())
    if gap > check_tol:
        raise SelfCheckError(
            f"flux and energy forms of A*_N disagree by {gap:.3e} (allowed {check_tol:.1e})"
        )
    asym = float(np.abs(a_flux - a_flux.T).max())
    if asym > check_tol:
        raise SelfCheckError(f"A*_N asymmetry {asym:.3e} exceeds {check_tol:.1e}")
    if provenance is None:
        seed_part = "" if field.seed is None else f", seed={field.seed}"
        provenance = f"truncated(N={field.N}{seed_part})"
    return HomogenizedMatrix(values=a_flux, provenance=provenance)


def _energy_matrix(coef: np.ndarray, pg: Sequence[np.ndarray], w: np.ndarray) -> np.ndarray:
    d = len(pg)
    out = np.empty((d, d))
    for i in range(d):
        Ai = np.einsum("eij,eqj->eqi", coef, pg[i])
        for j in range(i, d):
            out[i, j] = out[j, i] = float(np.einsum("eqi,eqi,q->", Ai, pg[j], w, optimize=True))
    return out


def periodic_homogenize(unit_cell_coefficient, r: int, d: Optional[int] = None,
                        tol: float = DEFAULT_TOL) -> HomogenizedMatrix:
    """Effective matrix of a periodic medium from its unit-cell data.

    `unit_cell_coefficient` is a constant matrix, or per-sub-cell matrices of
    shape (s,)*d + (d, d); r must be a multiple of s.
    """
    a = np.asarray(unit_cell_coefficient, dtype=float)
    if d is None:
        if a.ndim == 0:
            raise ConfigurationError("pass d explicitly for scalar unit-cell data")
        d = a.shape[-1]
    cells = _canon_unit_cell(a, d)
    field = FieldRealization.from_cells(cells, d=d, N=1, subgrid=cells.shape[0])
    out = homogenized_matrix(field, r, tol=tol, provenance="periodic")
    return out


def harmonic_mean_1d(cells) -> float:
    """Harmonic mean (reciprocal of mean reciprocal), the exact 1D effective value."""
    a = np.asarray(cells, dtype=float).ravel()
    if a.size == 0 or np.any(a <= 0.0):
        raise ConfigurationError("harmonic mean needs positive values")
    return float(1.0 / np.mean(1.0 / a))


def voigt_bound(field: FieldRealization) -> HomogenizedMatrix:
    """Arithmetic cell average of A over the box (upper bound in form order)."""
    d = field.d
    avg = field.cells.reshape(-1, d, d).mean(axis=0)
    return HomogenizedMatrix(values=avg, provenance="voigt")


def reuss_bound(field: FieldRealization) -> HomogenizedMatrix:
    """Inverse of the cell average of A^-1 (lower bound in form order)."""
    d = field.d
    cells = field.cells.reshape(-1, d, d)
    inv_avg = np.linalg.inv(cells).mean(axis=0)
    return HomogenizedMatrix(values=np.linalg.inv(inv_avg), provenance="reuss")


def matrix_eigenvalues(m) -> np.ndarray:
    """Ascending eigenvalues of a symmetric effective matrix (closed form, d <= 2)."""
    a = m.values if isinstance(m, HomogenizedMatrix) else np.asarray(m, dtype=float)
    d = a.shape[0]
    if d == 1:
        return np.array([a[0, 0]])
    if d == 2:
        half_tr = 0.5 * (a[0, 0] + a[1, 1])
        disc = np.sqrt((0.5 * (a[0, 0] - a[1, 1])) ** 2 + (0.5 * (a[0, 1] + a[1, 0])) ** 2)
        return np.array([half_tr - disc, half_tr + disc])
    raise ConfigurationError(f"closed-form eigenvalues implemented for d <= 2, got d={d}")
