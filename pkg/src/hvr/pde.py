"""Periodic divergence-form solves on the box (0, N)^d.

Discretization: uniform square grid, Q1 (bilinear) elements in 2D with 2x2
Gauss quadrature per element, P1 elements with midpoint quadrature in 1D.
Opposite faces are identified, so the stiffness matrix is singular with
kernel exactly the constants; solutions are normalized to zero mean.

The same quadrature rule drives assembly, load construction and all flux
averages downstream, which makes the discrete energy identities exact.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import AssemblyError, ConsistencyError, SolverError

_solve_lock = threading.Lock()
_solve_counter = 0


def solve_count() -> int:
    """Total number of periodic solves performed by this process."""
    return _solve_counter


def _count_solve() -> None:
    global _solve_counter
    with _solve_lock:
        _solve_counter += 1


@dataclass
class Mesh:
    """Uniform periodic grid on (0, N)^d with r square elements per unit cell."""

    d: int
    N: int
    r: int

    def __post_init__(self):
        if self.d not in (1, 2):
            raise AssemblyError(f"dimension must be 1 or 2, got {self.d}")
        if self.N < 1 or self.r < 1:
            raise AssemblyError(f"need N >= 1 and r >= 1, got N={self.N}, r={self.r}")

    @property
    def n_side(self) -> int:
        return self.N * self.r

    @property
    def h(self) -> float:
        return 1.0 / self.r

    @property
    def n_nodes(self) -> int:
        return self.n_side**self.d

    @property
    def n_elements(self) -> int:
        return self.n_side**self.d

    @property
    def volume(self) -> float:
        return float(self.N**self.d)

    @cached_property
    def connectivity(self) -> np.ndarray:
        """Element-to-node map, shape (n_elements, 2**d), periodic wraparound."""
        M = self.n_side
        if self.d == 1:
            i = np.arange(M)
            return np.stack([i, (i + 1) % M], axis=-1)
        i, j = np.meshgrid(np.arange(M), np.arange(M), indexing="ij")
        ip, jp = (i + 1) % M, (j + 1) % M
        conn = np.stack([i * M + j, ip * M + j, ip * M + jp, i * M + jp], axis=-1)
        return conn.reshape(-1, 4)

    @cached_property
    def quad_weights(self) -> np.ndarray:
        if self.d == 1:
            return np.array([self.h])
        return np.full(4, self.h**2 / 4.0)

    @cached_property
    def shape_gradients(self) -> np.ndarray:
        """Reference shape-function gradients at the quadrature points.

        Shape (n_quad, nodes_per_element, d), already scaled by 1/h.
        """
        h = self.h
        if self.d == 1:
            return np.array([[[-1.0 / h], [1.0 / h]]])  # midpoint, P1
        g = 0.5 - 0.5 / np.sqrt(3.0)
        pts = [(g, g), (1.0 - g, g), (1.0 - g, 1.0 - g), (g, 1.0 - g)]
        out = np.empty((4, 4, 2))
        for q, (xi, eta) in enumerate(pts):
            out[q] = np.array(
                [
                    [-(1.0 - eta), -(1.0 - xi)],
                    [(1.0 - eta), -xi],
                    [eta, xi],
                    [-eta, (1.0 - xi)],
                ]
            ) / h
        return out

    @cached_property
    def _scatter_index(self) -> tuple[np.ndarray, np.ndarray]:
        conn = self.connectivity
        k = conn.shape[1]
        rows = np.repeat(conn, k, axis=1).ravel()
        cols = np.tile(conn, (1, k)).ravel()
        return rows, cols


@dataclass
class ScalarField:
    """Periodic nodal scalar field; zero mean when produced by solve_periodic."""

    mesh: Mesh
    values: np.ndarray

    def mean(self) -> float:
        # Uniform grid: the nodal average equals the integral average exactly.
        return float(self.values.mean())


@dataclass
class DiscreteOperator:
    """Assembled stiffness matrix of int grad(theta_i) . A grad(theta_j)."""

    mesh: Mesh
    matrix: sp.csr_matrix
    coefficients: np.ndarray  # (n_elements, d, d)

    @cached_property
    def jacobi(self) -> np.ndarray:
        diag = self.matrix.diagonal()
        return 1.0 / diag


def _element_coefficients(mesh: Mesh, coefficient) -> np.ndarray:
    a = np.asarray(coefficient, dtype=float)
    d = mesh.d
    if a.shape == (mesh.n_elements, d, d):
        return a
    if a.shape == (mesh.n_side,) * d + (d, d):
        return a.reshape(-1, d, d)
    raise AssemblyError(
        f"coefficient must have shape {(mesh.n_elements, d, d)} or "
        f"{(mesh.n_side,) * d + (d, d)}, got {a.shape}"
    )


def _min_eig_elements(a: np.ndarray) -> float:
    d = a.shape[-1]
    if d == 1:
        return float(a[:, 0, 0].min())
    tr2 = 0.5 * (a[:, 0, 0] + a[:, 1, 1])
    disc = np.sqrt((0.5 * (a[:, 0, 0] - a[:, 1, 1])) ** 2 + a[:, 0, 1] ** 2)
    return float((tr2 - disc).min())


def assemble(mesh: Mesh, coefficient) -> DiscreteOperator:
    """Galerkin stiffness matrix for per-element constant coefficients.

    The coefficient is one symmetric d x d matrix per element; 2x2 Gauss
    quadrature is exact for this integrand, so the matrix is the exact
    bilinear form on the FE space.
    """
    a = _element_coefficients(mesh, coefficient)
    if not np.allclose(a, np.swapaxes(a, -1, -2), rtol=0.0, atol=1e-12):
        raise AssemblyError("element coefficients must be symmetric")
    if _min_eig_elements(a) <= 0.0:
        raise AssemblyError("element coefficients must be coercive")
    G = mesh.shape_gradients
    w = mesh.quad_weights
    local = np.einsum("qai,eij,qbj,q->eab", G, a, G, w, optimize=True)
    rows, cols = mesh._scatter_index
    K = sp.coo_matrix(
        (local.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)
    ).tocsr()
    return DiscreteOperator(mesh=mesh, matrix=K, coefficients=a)


def load_from_flux(mesh: Mesh, flux: np.ndarray) -> np.ndarray:
    """Load vector f_i = -int grad(theta_i) . F for a per-quadrature flux F.

    `flux` has shape (n_elements, n_quad, d) (or is broadcastable to it).
    This is the right-hand side of -div(A grad u) = div(F) in weak form.
    """
    G = mesh.shape_gradients
    w = mesh.quad_weights
    F = np.broadcast_to(flux, (mesh.n_elements, len(w), mesh.d))
    contrib = -np.einsum("qai,eqi,q->ea", G, F, w, optimize=True)
    return np.bincount(
        mesh.connectivity.ravel(), weights=contrib.ravel(), minlength=mesh.n_nodes
    )


def gradient_at_quadrature(f: ScalarField) -> np.ndarray:
    """Shape-function gradients of `f` at the assembly quadrature points.

    Returns shape (n_elements, n_quad, d); exact for Q1/P1 fields.
    """
    mesh = f.mesh
    nodal = f.values[mesh.connectivity]  # (n_elements, nodes_per_element)
    return np.einsum("qai,ea->eqi", mesh.shape_gradients, nodal, optimize=True)


def integrate_flux(mesh: Mesh, flux: np.ndarray) -> np.ndarray:
    """Integral over the box of a per-quadrature-point vector field."""
    w = mesh.quad_weights
    F = np.broadcast_to(flux, (mesh.n_elements, len(w), mesh.d))
    return np.einsum("eqi,q->i", F, w, optimize=True)


def cell_integrals(mesh: Mesh, flux: np.ndarray) -> np.ndarray:
    """Per-unit-cell integrals of a flux field, shape (N,)*d + (d,)."""
    w = mesh.quad_weights
    F = np.broadcast_to(flux, (mesh.n_elements, len(w), mesh.d))
    per_elem = np.einsum("eqi,q->ei", F, w, optimize=True)
    N, r, d = mesh.N, mesh.r, mesh.d
    if d == 1:
        return per_elem.reshape(N, r, 1).sum(axis=1)
    return per_elem.reshape(N, r, N, r, 2).sum(axis=(1, 3))


def solve_periodic(
    op: DiscreteOperator,
    rhs: np.ndarray,
    tol: float = 1e-10,
    maxiter: int | None = None,
) -> ScalarField:
    """Solve K u = rhs on the zero-mean subspace by preconditioned CG.

    The singular system is consistent iff rhs is orthogonal to constants;
    that is checked on entry.  Jacobi-preconditioned CG with the constant
    mode projected out of every preconditioned residual keeps all iterates
    in the zero-mean subspace.  Returns the zero-mean solution with relative
    residual below `tol`.
    """
    K = op.matrix
    n = K.shape[0]
    b = np.asarray(rhs, dtype=float)
    if b.shape != (n,):
        raise ConsistencyError(f"rhs must have shape {(n,)}, got {b.shape}")
    nb = float(np.linalg.norm(b))
    _count_solve()
    # Loads assembled from O(1) data cancel to roundoff for divergence-free
    # fluxes; treat anything at that level as the homogeneous system.
    zero_floor = 1e-14 * max(1.0, float(K.diagonal().max()))
    if nb <= zero_floor:
        return ScalarField(mesh=op.mesh, values=np.zeros(n))
    cosine = abs(b.sum()) / (nb * np.sqrt(n))
    if cosine > 1e-12:
        raise ConsistencyError(
            f"rhs has a constant component (normalized projection {cosine:.3e} > 1e-12)"
        )
    b = b - b.mean()
    nb = float(np.linalg.norm(b))
    if maxiter is None:
        maxiter = int(50 * np.sqrt(n)) + 1000
    inv_diag = op.jacobi

    x = np.zeros(n)
    rvec = b.copy()
    z = inv_diag * rvec
    z -= z.mean()
    p = z.copy()
    rz = float(rvec @ z)
    res = float(np.linalg.norm(rvec))
    converged = False
    for it in range(maxiter + 1):
        if res <= tol * nb:
            # Guard against accumulated drift in the recurrence.
            true_r = b - K @ x
            res = float(np.linalg.norm(true_r))
            if res <= tol * nb:
                converged = True
                break
            rvec = true_r
            z = inv_diag * rvec
            z -= z.mean()
            p = z.copy()
            rz = float(rvec @ z)
        if it == maxiter:
            break
        Kp = K @ p
        pKp = float(p @ Kp)
        if pKp <= 0.0:
            raise SolverError(f"CG breakdown at iteration {it} (pKp={pKp:.3e})")
        alpha = rz / pKp
        x += alpha * p
        rvec -= alpha * Kp
        z = inv_diag * rvec
        z -= z.mean()
        rz_new = float(rvec @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
        res = float(np.linalg.norm(rvec))
    if not converged:
        raise SolverError(
            f"CG did not converge in {maxiter} iterations: relative residual "
            f"{res / nb:.3e} > tol {tol:.1e}"
        )
    x -= x.mean()
    return ScalarField(mesh=op.mesh, values=x)
