"""Stationary random coefficient fields on the periodic box (0, N)^d.

Cell values live on the integer lattice: cell k of the box carries one
symmetric d x d conductivity matrix, constant on that unit cell (or on an
s x s sub-grid of it for structured perturbations).  Realizations retain
their latent uniform draws so that coupled transforms (antithetic pairing,
configuration re-use) never have to re-derive them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import ConfigurationError, UnsupportedLawError

_MASK64 = (1 << 64) - 1


def stream_for(master_seed: int, index: int) -> np.random.Generator:
    """Counter-based RNG stream for realization `index` under `master_seed`.

    Streams are keyed Philox generators: distinct (seed, index) pairs give
    statistically independent streams, independent of execution order.
    """
    if index < 0:
        raise ConfigurationError(f"stream index must be >= 0, got {index}")
    key = np.array([master_seed & _MASK64, index & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def seed_label(master_seed: int, index: int) -> int:
    """Integer identifying the stream of realization `index` (for sample tables)."""
    return ((master_seed & _MASK64) << 64) | (index & _MASK64)


def _as_matrix(value, d: int) -> np.ndarray:
    """Coerce a scalar or (d, d) array-like to a float (d, d) matrix."""
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        return float(a) * np.eye(d)
    if a.shape != (d, d):
        raise ConfigurationError(f"expected scalar or {(d, d)} matrix, got shape {a.shape}")
    return a.copy()


def _canon_unit_cell(value, d: int) -> np.ndarray:
    """Canonical unit-cell data: shape (s,)*d + (d, d), piecewise constant."""
    a = np.asarray(value, dtype=float)
    if a.ndim <= 2:
        return _as_matrix(a, d).reshape((1,) * d + (d, d))
    if a.ndim != d + 2 or a.shape[-2:] != (d, d):
        raise ConfigurationError(
            f"unit-cell data must have shape (s,)*{d} + ({d}, {d}), got {a.shape}"
        )
    s = a.shape[0]
    if a.shape[:d] != (s,) * d:
        raise ConfigurationError(f"unit-cell sub-grid must be square, got {a.shape[:d]}")
    return a.astype(float).copy()


def _min_eig(cells: np.ndarray) -> float:
    """Smallest eigenvalue over an array of symmetric 1x1 or 2x2 matrices."""
    d = cells.shape[-1]
    if d == 1:
        return float(cells[..., 0, 0].min())
    a = cells[..., 0, 0]
    b = cells[..., 0, 1]
    c = cells[..., 1, 1]
    lo = 0.5 * (a + c) - np.sqrt((0.5 * (a - c)) ** 2 + b * b)
    return float(lo.min())


def _check_symmetric(cells: np.ndarray, what: str) -> None:
    if not np.allclose(cells, np.swapaxes(cells, -1, -2), rtol=0.0, atol=1e-12):
        raise ConfigurationError(f"{what} must be symmetric")


@dataclass
class TwoStateLaw:
    """I.i.d. per-cell isotropic two-state law: alpha * Id w.p. p, beta * Id otherwise."""

    alpha: float
    beta: float
    p: float = 0.5

    def validate(self, d: int) -> None:
        if not (self.alpha > 0.0 and self.beta > 0.0):
            raise ConfigurationError(
                f"two-state values must be positive, got alpha={self.alpha}, beta={self.beta}"
            )
        if not (0.0 <= self.p <= 1.0):
            raise ConfigurationError(f"probability p must be in [0, 1], got {self.p}")

    def support(self, d: int) -> list[tuple[np.ndarray, float]]:
        eye = np.eye(d).reshape((1,) * d + (d, d))
        return [(self.alpha * eye, self.p), (self.beta * eye, 1.0 - self.p)]

    def cells_from_latent(self, u: np.ndarray, d: int) -> np.ndarray:
        vals = np.where(u < self.p, self.alpha, self.beta)
        return vals[..., None, None] * np.eye(d)

    def subgrid(self) -> int:
        return 1


@dataclass
class PerturbationSpec:
    """Structured law A(x) = C0 + eta * x_k * C1 on cell k.

    `x_law` selects the per-cell scalar law:
      * "bernoulli01": x_k in {0, 1} with P(x_k = 1) = eta_b;
      * "pm1": fair x_k in {-1, +1} (mean zero exactly).

    C1 may vary on an s x s sub-grid of the unit cell; C0 is constant.
    """

    c0: Union[float, np.ndarray]
    c1: Union[float, np.ndarray]
    eta: float
    x_law: str = "pm1"
    eta_b: Optional[float] = None
    d: int = 2

    def __post_init__(self):
        self.c0 = _as_matrix(self.c0, self.d)
        self.c1 = _canon_unit_cell(self.c1, self.d)

    def validate(self, d: int) -> None:
        if d != self.d:
            raise ConfigurationError(f"perturbation built for d={self.d}, spec says d={d}")
        _check_symmetric(self.c0, "C0")
        _check_symmetric(self.c1, "C1")
        if self.x_law not in ("bernoulli01", "pm1"):
            raise ConfigurationError(f"unknown x_law {self.x_law!r}")
        if self.x_law == "bernoulli01":
            if self.eta_b is None or not (0.0 <= self.eta_b <= 1.0):
                raise ConfigurationError(f"bernoulli01 needs eta_b in [0, 1], got {self.eta_b}")
        else:
            if abs(self.eta) > 1.0:
                raise ConfigurationError(f"pm1 law requires |eta| <= 1, got {self.eta}")
            # C0 - C1 semidefinite keeps A coercive on the whole amplitude
            # range; strict coercivity of the realized values is checked on
            # the support below.
            if _min_eig(self.c0 - self.c1.reshape(-1, d, d)) < -1e-12:
                raise ConfigurationError("C0 - C1 must be positive semidefinite for the pm1 law")
        if _min_eig(self.c0.reshape((1,) * d + (d, d))) <= 0.0:
            raise ConfigurationError("C0 must be coercive")
        for m, _ in self.support(d):
            if _min_eig(m) <= 0.0:
                raise ConfigurationError("perturbed coefficient is not coercive")

    def support(self, d: int) -> list[tuple[np.ndarray, float]]:
        if self.x_law == "bernoulli01":
            return [
                (np.broadcast_to(self.c0, self.c1.shape).copy(), 1.0 - self.eta_b),
                (self.c0 + self.eta * self.c1, self.eta_b),
            ]
        return [
            (self.c0 - self.eta * self.c1, 0.5),
            (self.c0 + self.eta * self.c1, 0.5),
        ]

    def x_from_latent(self, u: np.ndarray) -> np.ndarray:
        # Low u maps to the low state so that matched latents reproduce the
        # two-state field exactly (and antithetic coupling is shared).
        if self.x_law == "bernoulli01":
            return (u >= 1.0 - self.eta_b).astype(float)
        return np.where(u < 0.5, -1.0, 1.0)

    def cells_from_x(self, x: np.ndarray) -> np.ndarray:
        d = self.d
        n = x.shape[0]
        s = self.subgrid()
        xe = x
        for axis in range(d):
            xe = np.repeat(xe, s, axis=axis)
        c1_tiled = np.tile(self.c1, (n,) * d + (1, 1))
        return self.c0 + self.eta * xe[..., None, None] * c1_tiled

    def cells_from_latent(self, u: np.ndarray, d: int) -> np.ndarray:
        return self.cells_from_x(self.x_from_latent(u))

    def subgrid(self) -> int:
        return self.c1.shape[0]


Law = Union[TwoStateLaw, PerturbationSpec]


@dataclass
class FieldSpec:
    """Law of the random medium: dimension plus a per-cell value law."""

    d: int
    law: Law
    isotropic: bool = True

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ConfigurationError(f"dimension must be 1 or 2, got {self.d}")
        self.law.validate(self.d)

    def min_eig_bound(self) -> float:
        return min(_min_eig(m) for m, _ in self.law.support(self.d))

    def signature(self) -> str:
        """Canonical fingerprint of the cell-value distribution.

        Two specs that put the same probabilities on the same cell matrices
        (e.g. a two-state law and the equivalent perturbation form) share a
        signature, so matched-cost comparisons recognize them as one law.
        """
        entries = []
        for m, prob in self.law.support(self.d):
            vals = np.round(np.asarray(m, dtype=float), 10)
            entries.append(f"p={round(prob, 10)}:m={vals.ravel().tolist()}")
        return f"d={self.d};" + "|".join(sorted(entries))


@dataclass
class FieldRealization:
    """One draw of the medium on (0, N)^d.

    `cells` has shape (N*s,)*d + (d, d) where s is the unit-cell sub-grid
    resolution (s = 1 for per-cell-constant laws).  `latent` stores the
    underlying uniforms when the realization came from a stream.
    """

    d: int
    N: int
    cells: np.ndarray
    latent: Optional[np.ndarray] = None
    spec: Optional[FieldSpec] = None
    subgrid: int = 1
    seed: Optional[int] = None

    @classmethod
    def from_cells(cls, cells, d: int, N: int, subgrid: int = 1) -> "FieldRealization":
        """Wrap explicit per-cell (or per-sub-cell) matrices; no latent attached."""
        a = np.asarray(cells, dtype=float)
        if a.ndim == d:  # isotropic scalars
            a = a[..., None, None] * np.eye(d)
        want = (N * subgrid,) * d + (d, d)
        if a.shape != want:
            raise ConfigurationError(f"cells must have shape {want}, got {a.shape}")
        _check_symmetric(a, "cells")
        if _min_eig(a) <= 0.0:
            raise ConfigurationError("cell matrices must be coercive")
        return cls(d=d, N=N, cells=a.copy(), subgrid=subgrid)

    def element_coefficients(self, r: int) -> np.ndarray:
        """Per-element matrices on the N*r mesh, shape (n_elements, d, d)."""
        s = self.subgrid
        if r % s != 0:
            raise ConfigurationError(f"resolution r={r} must be a multiple of sub-grid s={s}")
        rep = r // s
        a = self.cells
        for axis in range(self.d):
            a = np.repeat(a, rep, axis=axis)
        return a.reshape(-1, self.d, self.d)

    def x_values(self) -> np.ndarray:
        """Per-cell scalar draws for perturbation laws."""
        if self.spec is None or not isinstance(self.spec.law, PerturbationSpec):
            raise UnsupportedLawError("x_values only defined for perturbation laws")
        if self.latent is None:
            raise UnsupportedLawError("realization carries no latent draws")
        return self.spec.law.x_from_latent(self.latent)


def draw_field(spec: FieldSpec, N: int, stream: np.random.Generator) -> FieldRealization:
    """Draw one i.i.d.-cell realization on (0, N)^d from `stream`.

    Deterministic given (spec, N, stream state); the latent uniforms are kept
    on the realization.
    """
    if N < 1:
        raise ConfigurationError(f"box side N must be >= 1, got {N}")
    u = stream.random(size=(N,) * spec.d)
    cells = spec.law.cells_from_latent(u, spec.d)
    out = FieldRealization(
        d=spec.d, N=N, cells=cells, latent=u, spec=spec, subgrid=spec.law.subgrid()
    )
    _assert_realized_coercive(out, spec)
    return out


def antithetic_of(realization: FieldRealization) -> FieldRealization:
    """The coupled antithetic realization: latent uniforms u replaced by 1 - u.

    For the balanced two-state law this swaps the two states cell-wise; for
    the fair pm1 law it flips signs.  The output has the same law as the
    input, so pair averages of derived quantities stay unbiased.
    """
    if realization.latent is None or realization.spec is None:
        raise UnsupportedLawError("antithetic transform needs a realization with latent draws")
    u = 1.0 - realization.latent
    spec = realization.spec
    cells = spec.law.cells_from_latent(u, spec.d)
    out = FieldRealization(
        d=spec.d,
        N=realization.N,
        cells=cells,
        latent=u,
        spec=spec,
        subgrid=realization.subgrid,
        seed=realization.seed,
    )
    _assert_realized_coercive(out, spec)
    return out


def realize_perturbation(spec: PerturbationSpec, x_values, N: int) -> FieldRealization:
    """Field with cell k carrying C0 + eta * x_k * C1 for given scalars x_k."""
    x = np.asarray(x_values, dtype=float)
    if x.shape != (N,) * spec.d:
        raise ConfigurationError(f"x_values must have shape {(N,) * spec.d}, got {x.shape}")
    allowed = {0.0, 1.0} if spec.x_law == "bernoulli01" else {-1.0, 1.0}
    if not set(np.unique(x)).issubset(allowed):
        raise ConfigurationError(f"x values must lie in {sorted(allowed)} for law {spec.x_law}")
    fspec = FieldSpec(d=spec.d, law=spec)
    cells = spec.cells_from_x(x)
    out = FieldRealization(
        d=spec.d, N=N, cells=cells, latent=None, spec=fspec, subgrid=spec.subgrid()
    )
    if _min_eig(cells) <= 0.0:
        raise ConfigurationError("realized perturbation is not coercive")
    return out


def _assert_realized_coercive(f: FieldRealization, spec: FieldSpec) -> None:
    bound = spec.min_eig_bound()
    if _min_eig(f.cells) < bound - 1e-12:
        raise ConfigurationError(
            f"realized cell matrices fall below the law's coercivity bound {bound}"
        )
