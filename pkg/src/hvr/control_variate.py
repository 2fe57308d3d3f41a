"""Defect-expansion control variates for Bernoulli-perturbed periodic media.

The medium is A(x) = A_per(x) + b(x) C_per(x) with i.i.d. per-cell Bernoulli
b in {0, 1}.  Two deterministic tables are precomputed once per (A_per,
C_per, N, r):

  * the one-defect coefficient: the integrated flux surplus of a medium
    perturbed on a single cell of the box, which is independent of the
    defect position;
  * pair-interaction coefficients D_l: the surplus of a two-defect medium at
    offset l beyond twice the one-defect value.

From the Bernoulli draw of a realization these tables give, at zero solver
cost, first- and second-order surrogates whose expectations are closed-form.
Subtracting the centered surrogates with regression-optimal weights from the
raw A*_N samples yields the controlled estimator.
"""

from __future__ import annotations

import itertools
import json
import os
import time
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from . import homog, mc, pde
from .errors import ConfigurationError, SelfCheckError
from .rfield import (
    FieldRealization,
    FieldSpec,
    PerturbationSpec,
    _canon_unit_cell,
    draw_field,
    seed_label,
    stream_for,
)

TABLE_SCHEMA_VERSION = 1


def _tiled_cells(unit_cell: np.ndarray, N: int, d: int) -> np.ndarray:
    return np.tile(unit_cell, (N,) * d + (1, 1))


def _with_defects(base: np.ndarray, defect: np.ndarray, cells: list[tuple], s: int) -> np.ndarray:
    out = base.copy()
    for cell in cells:
        idx = tuple(slice(c * s, (c + 1) * s) for c in cell)
        out[idx] = out[idx] + defect
    return out


def _field_from(cells: np.ndarray, d: int, N: int, s: int) -> FieldRealization:
    return FieldRealization.from_cells(cells, d=d, N=N, subgrid=s)


def canonical_offset(l, N: int) -> tuple:
    """Representative of {l, -l} on the period-N torus (lexicographic minimum)."""
    a = tuple(int(x) % N for x in l)
    b = tuple((-int(x)) % N for x in l)
    return min(a, b)


def offset_classes(N: int, d: int, cutoff: Optional[float] = None) -> list[tuple]:
    """Distinct nonzero offsets up to sign, centered sup-norm at most `cutoff`."""
    if cutoff is None:
        cutoff = N / 2.0
    seen = set()
    out = []
    for l in itertools.product(range(N), repeat=d):
        if all(c == 0 for c in l):
            continue
        rep = canonical_offset(l, N)
        if rep in seen:
            continue
        seen.add(rep)
        centered = max(abs(c if c <= N / 2 else c - N) for c in rep)
        if centered <= cutoff + 1e-12:
            out.append(rep)
    return sorted(out)


def one_defect_coefficient(
    a_per, c_per, N: int, r: int, tol: float = homog.DEFAULT_TOL, position: tuple = None, d: int = 2
) -> np.ndarray:
    """Integrated flux surplus of one perturbed cell in the box (0, N)^d.

    Equals |Q_N| (A*_N(one defect) - A*_N(unperturbed)), both terms evaluated
    with the same mesh and quadrature.  Independent of the defect position.
    """
    a_canon = _canon_unit_cell(a_per, d)
    c_canon = _canon_unit_cell(c_per, d)
    if a_canon.shape != c_canon.shape:
        s = max(a_canon.shape[0], c_canon.shape[0])
        a_canon = _resample_subgrid(a_canon, s, d)
        c_canon = _resample_subgrid(c_canon, s, d)
    s = a_canon.shape[0]
    if position is None:
        position = (0,) * d
    base = _tiled_cells(a_canon, N, d)
    star_per = homog.homogenized_matrix(_field_from(base, d, N, s), r, tol=tol).values
    defected = _with_defects(base, c_canon, [tuple(position)], s)
    star_def = homog.homogenized_matrix(_field_from(defected, d, N, s), r, tol=tol).values
    return float(N**d) * (star_def - star_per)


def two_defect_coefficient(
    a_per, c_per, N: int, r: int, offset, tol: float = homog.DEFAULT_TOL, d: int = 2,
    one_defect: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Pair-interaction surplus D_l of two defects at lattice offset l.

    D_l = |Q_N| (A*_N(two defects at offset l) - A*_N(unperturbed)) minus
    twice the one-defect coefficient; D_l = D_{-l} by relabeling.
    """
    rep = canonical_offset(offset, N)
    if all(c == 0 for c in rep):
        raise ConfigurationError("two-defect offset must be nonzero modulo the box")
    a_canon = _canon_unit_cell(a_per, d)
    c_canon = _canon_unit_cell(c_per, d)
    if a_canon.shape != c_canon.shape:
        s = max(a_canon.shape[0], c_canon.shape[0])
        a_canon = _resample_subgrid(a_canon, s, d)
        c_canon = _resample_subgrid(c_canon, s, d)
    s = a_canon.shape[0]
    base = _tiled_cells(a_canon, N, d)
    star_per = homog.homogenized_matrix(_field_from(base, d, N, s), r, tol=tol).values
    if one_defect is None:
        one_defect = one_defect_coefficient(a_per, c_per, N, r, tol=tol, d=d)
    pair = _with_defects(base, c_canon, [(0,) * d, rep], s)
    star_pair = homog.homogenized_matrix(_field_from(pair, d, N, s), r, tol=tol).values
    return float(N**d) * (star_pair - star_per) - 2.0 * one_defect


def _resample_subgrid(cells: np.ndarray, s: int, d: int) -> np.ndarray:
    s0 = cells.shape[0]
    if s % s0 != 0:
        raise ConfigurationError(f"incompatible sub-grids {s0} and {s}")
    rep = s // s0
    out = cells
    for axis in range(d):
        out = np.repeat(out, rep, axis=axis)
    return out


@dataclass
class DefectCoefficients:
    """Precomputed defect tables for one (A_per, C_per, N, r) quadruple."""

    d: int
    N: int
    r: int
    a_per: np.ndarray  # canonical unit-cell data
    c_per: np.ndarray
    a_star_per: np.ndarray  # periodic effective matrix on the Q_N mesh
    one_defect: np.ndarray
    two_defect: dict = dc_field(default_factory=dict)  # canonical offset -> (d, d)
    cutoff: float = 0.0
    tol: float = homog.DEFAULT_TOL
    build_solves: int = 0

    def d_grid(self) -> np.ndarray:
        """Pair coefficients on the full offset torus, zeros off-table and at 0."""
        N, d = self.N, self.d
        grid = np.zeros((N,) * d + (d, d))
        for l in itertools.product(range(N), repeat=d):
            rep = canonical_offset(l, N)
            if rep in self.two_defect:
                grid[l] = self.two_defect[rep]
        return grid

    def key(self) -> dict:
        return {
            "d": self.d,
            "N": self.N,
            "r": self.r,
            "a_per": self.a_per.tolist(),
            "c_per": self.c_per.tolist(),
            "cutoff": self.cutoff,
            "tol": self.tol,
        }

    def to_jsonable(self) -> dict:
        return {
            "schema_version": TABLE_SCHEMA_VERSION,
            "kind": "defect_tables",
            **self.key(),
            "a_star_per": self.a_star_per.tolist(),
            "one_defect": self.one_defect.tolist(),
            "two_defect": {
                ",".join(str(c) for c in k): v.tolist() for k, v in sorted(self.two_defect.items())
            },
            "build_solves": self.build_solves,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_jsonable(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def from_jsonable(cls, obj: dict) -> "DefectCoefficients":
        two = {
            tuple(int(c) for c in k.split(",")): np.asarray(v, dtype=float)
            for k, v in obj.get("two_defect", {}).items()
        }
        return cls(
            d=int(obj["d"]),
            N=int(obj["N"]),
            r=int(obj["r"]),
            a_per=np.asarray(obj["a_per"], dtype=float),
            c_per=np.asarray(obj["c_per"], dtype=float),
            a_star_per=np.asarray(obj["a_star_per"], dtype=float),
            one_defect=np.asarray(obj["one_defect"], dtype=float),
            two_defect=two,
            cutoff=float(obj["cutoff"]),
            tol=float(obj["tol"]),
            build_solves=int(obj.get("build_solves", 0)),
        )

    @classmethod
    def load(cls, path) -> "DefectCoefficients":
        with open(path) as fh:
            return cls.from_jsonable(json.load(fh))


def build_defect_tables(
    a_per,
    c_per,
    N: int,
    r: int,
    order: int = 1,
    cutoff: Optional[float] = None,
    tol: float = homog.DEFAULT_TOL,
    d: int = 2,
) -> DefectCoefficients:
    """Solve the deterministic defect problems and tabulate the coefficients.

    Order 1 tabulates the one-defect coefficient only; order 2 adds the
    pair-interaction matrices for all offset classes within `cutoff`
    (centered sup-norm, default N/2: the whole box).
    """
    if order not in (1, 2):
        raise ConfigurationError(f"order must be 1 or 2, got {order}")
    a_canon = _canon_unit_cell(a_per, d)
    c_canon = _canon_unit_cell(c_per, d)
    s = max(a_canon.shape[0], c_canon.shape[0])
    a_canon = _resample_subgrid(a_canon, s, d)
    c_canon = _resample_subgrid(c_canon, s, d)
    if cutoff is None:
        cutoff = N / 2.0
    sc0 = pde.solve_count()
    base = _tiled_cells(a_canon, N, d)
    star_per = homog.homogenized_matrix(_field_from(base, d, N, s), r, tol=tol).values
    defected = _with_defects(base, c_canon, [(0,) * d], s)
    star_def = homog.homogenized_matrix(_field_from(defected, d, N, s), r, tol=tol).values
    one = float(N**d) * (star_def - star_per)
    two: dict = {}
    if order == 2:
        for rep in offset_classes(N, d, cutoff):
            pair = _with_defects(base, c_canon, [(0,) * d, rep], s)
            star_pair = homog.homogenized_matrix(_field_from(pair, d, N, s), r, tol=tol).values
            two[rep] = float(N**d) * (star_pair - star_per) - 2.0 * one
    return DefectCoefficients(
        d=d,
        N=N,
        r=r,
        a_per=a_canon,
        c_per=c_canon,
        a_star_per=star_per,
        one_defect=one,
        two_defect=two,
        cutoff=float(cutoff),
        tol=tol,
        build_solves=pde.solve_count() - sc0,
    )


def load_or_build_defect_tables(path, a_per, c_per, N, r, order=1, cutoff=None,
                                tol=homog.DEFAULT_TOL, d=2) -> DefectCoefficients:
    """Reuse cached tables when every key field matches; otherwise rebuild and save."""
    if path is not None and os.path.exists(path):
        try:
            cached = DefectCoefficients.load(path)
        except (json.JSONDecodeError, KeyError, ValueError):
            cached = None
        if cached is not None:
            a_canon = _canon_unit_cell(a_per, d)
            c_canon = _canon_unit_cell(c_per, d)
            s = max(a_canon.shape[0], c_canon.shape[0])
            want = {
                "d": d,
                "N": N,
                "r": r,
                "a_per": _resample_subgrid(a_canon, s, d).tolist(),
                "c_per": _resample_subgrid(c_canon, s, d).tolist(),
                "cutoff": float(cutoff if cutoff is not None else N / 2.0),
                "tol": tol,
            }
            if cached.key() == want and (order == 1 or cached.two_defect):
                return cached
    tables = build_defect_tables(a_per, c_per, N, r, order=order, cutoff=cutoff, tol=tol, d=d)
    if path is not None:
        tables.save(path)
    return tables


def _expected_y1(defects: DefectCoefficients, eta_b: float) -> np.ndarray:
    return defects.a_star_per + eta_b * defects.one_defect


def _expected_y2(defects: DefectCoefficients, eta_b: float) -> np.ndarray:
    # E[sum_k b_k b_{k+l}] = |Q_N| eta_b^2 for l != 0, cancelling the 1/|Q_N|.
    total = defects.d_grid().reshape(-1, defects.d, defects.d).sum(axis=0)
    return 0.5 * eta_b**2 * total


def control_expectation(spec, defects: DefectCoefficients, order: int = 1) -> np.ndarray:
    """Closed-form expectation of the control surrogate for an i.i.d. Bernoulli law."""
    law = spec.law if isinstance(spec, FieldSpec) else spec
    if not isinstance(law, PerturbationSpec) or law.x_law != "bernoulli01":
        raise ConfigurationError("control expectation requires the bernoulli01 perturbation law")
    if order not in (1, 2):
        raise ConfigurationError(f"order must be 1 or 2, got {order}")
    out = _expected_y1(defects, law.eta_b)
    if order == 2:
        if not defects.two_defect:
            raise ConfigurationError(
                "order-2 expectation needs two-defect tables; none are tabulated"
            )
        out = out + _expected_y2(defects, law.eta_b)
    return out


def y1_of_draw(defects: DefectCoefficients, b_values: np.ndarray) -> np.ndarray:
    """First-order surrogate of one draw from its Bernoulli cell values."""
    vol = float(defects.N**defects.d)
    return defects.a_star_per + (b_values.sum() / vol) * defects.one_defect


def y2_of_draw(defects: DefectCoefficients, b_values: np.ndarray,
               d_grid: Optional[np.ndarray] = None) -> np.ndarray:
    """Second-order surrogate: pair-interaction sum over the defect pattern."""
    if d_grid is None:
        d_grid = defects.d_grid()
    vol = float(defects.N**defects.d)
    f = np.fft.fftn(b_values)
    corr = np.fft.ifftn(f * np.conj(f)).real  # corr[l] = sum_k b_k b_{k+l}
    dd = defects.d
    return 0.5 / vol * np.tensordot(corr.ravel(), d_grid.reshape(-1, dd, dd), axes=(0, 0))


def optimal_rho(samples_x: np.ndarray, samples_y: np.ndarray) -> tuple[np.ndarray, bool]:
    """Variance-minimizing regression weights of x on the controls y.

    Returns (rho, degenerate); a singular control covariance yields rho = 0
    with the degeneracy flag set, so the estimator falls back to plain MC.
    """
    x = np.asarray(samples_x, dtype=float)
    y = np.asarray(samples_y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] != y.shape[0] or x.shape[0] < 2:
        raise ConfigurationError("need at least 2 aligned samples for rho optimization")
    xc = x - x.mean()
    yc = y - y.mean(axis=0)
    m = x.shape[0]
    cov_yy = (yc.T @ yc) / (m - 1)
    cov_yx = (yc.T @ xc) / (m - 1)
    eigs = np.linalg.eigvalsh(cov_yy)
    if eigs[0] <= 1e-12 * max(eigs[-1], 1e-30):
        return np.zeros(y.shape[1]), True
    return np.linalg.solve(cov_yy, cov_yx), False


def run_cv(
    spec: FieldSpec,
    N: int,
    r: int,
    M: int,
    master_seed: int,
    order: int = 1,
    tol: float = homog.DEFAULT_TOL,
    threads: Optional[int] = None,
    tables: Optional[DefectCoefficients] = None,
    tables_path=None,
    cutoff: Optional[float] = None,
    pilot: int = 0,
    rho_override=None,
) -> tuple[mc.EstimatorReport, mc.SampleTable]:
    """Controlled Monte Carlo estimate of E[A*_N] for the Bernoulli-defect law.

    Per draw: one full random solve for the raw sample, zero solves for the
    surrogates (defect tables are precomputed once and their cost reported
    separately).  rho is fitted per matrix entry on the same samples unless
    `pilot` > 0 restricts the fit to the first `pilot` samples; the tiny bias
    of the same-sample fit is accepted and disclosed in the report.
    """
    law = spec.law
    if not isinstance(law, PerturbationSpec) or law.x_law != "bernoulli01":
        raise ConfigurationError("run_cv requires a bernoulli01 perturbation law")
    if order not in (1, 2):
        raise ConfigurationError(f"order must be 1 or 2, got {order}")
    if M < 2:
        raise ConfigurationError(f"need M >= 2 realizations, got {M}")
    d = spec.d
    t0 = time.perf_counter()
    c_per_eff = law.eta * law.c1
    if tables is None:
        tables = load_or_build_defect_tables(
            tables_path, law.c0, c_per_eff, N, r, order=order, cutoff=cutoff, tol=tol, d=d
        )
    if order == 2 and not tables.two_defect:
        raise ConfigurationError("order-2 control needs two-defect tables")

    def task(m: int):
        fld = draw_field(spec, N, stream_for(master_seed, m))
        fld.seed = seed_label(master_seed, m)
        raw = homog.homogenized_matrix(fld, r, tol=tol).values
        return raw, fld.x_values()

    sc_before = pde.solve_count()
    results = mc.run_indexed(M, task, threads)
    mc_solves = pde.solve_count() - sc_before
    raw = np.stack([res[0] for res in results], axis=0)  # (M, d, d)

    sc_controls = pde.solve_count()
    d_grid = tables.d_grid() if order == 2 else None
    y_list = [np.stack([y1_of_draw(tables, res[1]) for res in results], axis=0)]
    ey_list = [_expected_y1(tables, law.eta_b)]
    if order == 2:
        y_list.append(np.stack([y2_of_draw(tables, res[1], d_grid) for res in results], axis=0))
        ey_list.append(_expected_y2(tables, law.eta_b))
    if pde.solve_count() != sc_controls:
        raise SelfCheckError("control construction consumed PDE solves")
    if mc_solves != d * M:
        raise SelfCheckError(
            f"MC phase used {mc_solves} solves, expected {d * M}; "
            "is another solver running concurrently?"
        )

    y = np.stack(y_list, axis=1)  # (M, n_controls, d, d)
    ey = np.stack(ey_list, axis=0)  # (n_controls, d, d)
    n_controls = y.shape[1]
    fit_slice = slice(0, pilot) if pilot > 0 else slice(None)
    rho = np.zeros((d, d, n_controls))
    degenerate = np.zeros((d, d), dtype=bool)
    for i in range(d):
        for j in range(d):
            if rho_override is not None:
                rho[i, j, :] = rho_override
            else:
                rho[i, j], degenerate[i, j] = optimal_rho(
                    raw[fit_slice, i, j], y[fit_slice, :, i, j]
                )
    centered = y - ey  # (M, n_controls, d, d)
    controlled = raw - np.einsum("ijc,mcij->mij", rho, centered)

    if rho_override is None and pilot == 0:
        var_raw = raw.var(axis=0, ddof=1)
        var_ctl = controlled.var(axis=0, ddof=1)
        if np.any(var_ctl > var_raw * (1.0 + 1e-10) + 1e-30):
            raise SelfCheckError("controlled variance exceeds raw variance with optimal rho")

    aux_cols = [f"raw_{i + 1}{j + 1}" for i in range(d) for j in range(d)]
    for c in range(n_controls):
        aux_cols += [f"y{c + 1}_{i + 1}{j + 1}" for i in range(d) for j in range(d)]
    cols = ["index", "seed"] + mc.entry_columns(d) + aux_cols
    rows = []
    for m in range(M):
        row = [m, seed_label(master_seed, m)] + controlled[m].ravel().tolist()
        row += raw[m].ravel().tolist()
        for c in range(n_controls):
            row += y[m, c].ravel().tolist()
        rows.append(row)
    extra = {
        "order": order,
        "rho": rho,
        "rho_degenerate": degenerate.astype(int),
        "rho_from_pilot": pilot,
        "rho_same_sample_fit": pilot == 0 and rho_override is None,
        "precompute_solves": tables.build_solves,
        "control_expectation": control_expectation(spec, tables, order),
        "tabulated_offsets": len(tables.two_defect),
    }
    return mc.summarize(
        method=f"cv{order}",
        spec_signature=spec.signature(),
        d=d,
        N=N,
        r=r,
        master_seed=master_seed,
        samples=controlled,
        rows=rows,
        columns=cols,
        corrector_solves=d * M,
        extra=extra,
        wall_time_s=time.perf_counter() - t0,
        threads=mc.thread_count(threads),
    )
