"""Selected quasirandom configurations for the +-1 perturbation law.

For A(x) = C0 + eta * x_k * C1 with fair x_k in {-1, +1} and constant C0,
the effective matrix of a configuration expands in powers of eta around the
uniform medium.  The order-0 term is configuration independent on integer
periodic boxes; the order-1 term is constant across configurations with zero
cell average; the order-2 term is pinned by a quadratic form whose kernel,
the per-offset influence coefficients, is precomputed from a single
localized solve per direction.

Sampling then conditions the Monte Carlo average: order 1 draws uniformly
from exactly balanced configurations, order 2 additionally ranks a large
balanced pool by the quadratic-form mismatch against its infinite-volume
target and keeps the best.  Selection costs no PDE solves; each kept
configuration is solved at full amplitude.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from . import homog, mc, pde
from .errors import ConfigurationError, SelfCheckError
from .rfield import (
    FieldSpec,
    PerturbationSpec,
    realize_perturbation,
    seed_label,
    stream_for,
)

TABLE_SCHEMA_VERSION = 1


@dataclass
class ExpansionTerms:
    """Amplitude-expansion terms of the effective matrix of one configuration."""

    a0: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    w0: list  # ScalarField per direction
    u1: list
    u2: list

    def evaluate(self, eta: float) -> np.ndarray:
        return self.a0 + eta * self.a1 + eta**2 * self.a2


@dataclass
class SqsTables:
    """Per-offset influence coefficients for the order-2 selection rule."""

    d: int
    N: int
    r: int
    n_ref: int
    c0: np.ndarray
    c1: np.ndarray
    i_grid: np.ndarray  # (d,) + (N,)*d: direction p -> offset l -> scalar
    i_infinity: np.ndarray  # (d,)
    i_infinity_error: np.ndarray  # (d,) Cauchy-difference estimate
    i_sum: np.ndarray  # (d,) sum of i_grid over offsets (compatibility monitor)
    tol: float = homog.DEFAULT_TOL
    build_solves: int = 0

    def key(self) -> dict:
        return {
            "d": self.d,
            "N": self.N,
            "r": self.r,
            "n_ref": self.n_ref,
            "c0": self.c0.tolist(),
            "c1": self.c1.tolist(),
            "tol": self.tol,
        }

    def to_jsonable(self) -> dict:
        return {
            "schema_version": TABLE_SCHEMA_VERSION,
            "kind": "sqs_tables",
            **self.key(),
            "i_grid": self.i_grid.tolist(),
            "i_infinity": self.i_infinity.tolist(),
            "i_infinity_error": self.i_infinity_error.tolist(),
            "i_sum": self.i_sum.tolist(),
            "build_solves": self.build_solves,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_jsonable(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def from_jsonable(cls, obj: dict) -> "SqsTables":
        return cls(
            d=int(obj["d"]),
            N=int(obj["N"]),
            r=int(obj["r"]),
            n_ref=int(obj["n_ref"]),
            c0=np.asarray(obj["c0"], dtype=float),
            c1=np.asarray(obj["c1"], dtype=float),
            i_grid=np.asarray(obj["i_grid"], dtype=float),
            i_infinity=np.asarray(obj["i_infinity"], dtype=float),
            i_infinity_error=np.asarray(obj["i_infinity_error"], dtype=float),
            i_sum=np.asarray(obj["i_sum"], dtype=float),
            tol=float(obj["tol"]),
            build_solves=int(obj.get("build_solves", 0)),
        )

    @classmethod
    def load(cls, path) -> "SqsTables":
        with open(path) as fh:
            return cls.from_jsonable(json.load(fh))


@dataclass
class SqsConfiguration:
    """One +-1 configuration with its stored selection residuals."""

    x_values: np.ndarray
    sqs1_residual: float
    sqs2_residual: Optional[float] = None
    balanced: bool = True


def _pm1_law(spec) -> PerturbationSpec:
    law = spec.law if isinstance(spec, FieldSpec) else spec
    if not isinstance(law, PerturbationSpec) or law.x_law != "pm1":
        raise ConfigurationError("this operation requires the pm1 perturbation law")
    return law


def _element_grids(law: PerturbationSpec, N: int, r: int):
    """Mesh, base operator data and per-element C0 / C1 arrays."""
    d = law.d
    mesh = pde.Mesh(d=d, N=N, r=r)
    n_e = mesh.n_elements
    c0_e = np.broadcast_to(law.c0, (n_e, d, d))
    s = law.c1.shape[0]
    if r % s != 0:
        raise ConfigurationError(f"resolution r={r} must be a multiple of the C1 sub-grid s={s}")
    c1 = law.c1
    for axis in range(d):
        c1 = np.repeat(c1, r // s, axis=axis)
    c1_e = np.tile(c1, (N,) * d + (1, 1)).reshape(n_e, d, d)
    return mesh, c0_e, c1_e


def _expand_cells(values: np.ndarray, r: int) -> np.ndarray:
    out = values
    for axis in range(values.ndim):
        out = np.repeat(out, r, axis=axis)
    return out.ravel()


def expansion_terms(
    spec, x_values, N: int, r: int, tol: float = homog.DEFAULT_TOL
) -> ExpansionTerms:
    """Solve the cascaded periodic problems behind the amplitude expansion.

    Returns the three d x d coefficient matrices together with the underlying
    zero-mean potentials (per direction).
    """
    law = _pm1_law(spec)
    d = law.d
    x = np.asarray(x_values, dtype=float)
    if x.shape != (N,) * d:
        raise ConfigurationError(f"x_values must have shape {(N,) * d}, got {x.shape}")
    mesh, c0_e, c1_e = _element_grids(law, N, r)
    chi_e = _expand_cells(x, r)
    chi_c1 = chi_e[:, None, None] * c1_e
    op = pde.assemble(mesh, c0_e)
    eye = np.eye(d)
    vol = mesh.volume
    a0 = np.zeros((d, d))
    a1 = np.zeros((d, d))
    a2 = np.zeros((d, d))
    w0_l, u1_l, u2_l = [], [], []
    for j in range(d):
        p = eye[j]
        w0 = pde.solve_periodic(op, pde.load_from_flux(mesh, (c0_e @ p)[:, None, :]), tol=tol)
        g0 = pde.gradient_at_quadrature(w0)
        pg0 = p + g0
        u1 = pde.solve_periodic(
            op, pde.load_from_flux(mesh, np.einsum("eij,eqj->eqi", chi_c1, pg0)), tol=tol
        )
        g1 = pde.gradient_at_quadrature(u1)
        u2 = pde.solve_periodic(
            op, pde.load_from_flux(mesh, np.einsum("eij,eqj->eqi", chi_c1, g1)), tol=tol
        )
        g2 = pde.gradient_at_quadrature(u2)
        a0[:, j] = pde.integrate_flux(mesh, np.einsum("eij,eqj->eqi", c0_e, pg0)) / vol
        a1[:, j] = (
            pde.integrate_flux(mesh, np.einsum("eij,eqj->eqi", chi_c1, pg0))
            + pde.integrate_flux(mesh, np.einsum("eij,eqj->eqi", c0_e, g1))
        ) / vol
        a2[:, j] = (
            pde.integrate_flux(mesh, np.einsum("eij,eqj->eqi", chi_c1, g1))
            + pde.integrate_flux(mesh, np.einsum("eij,eqj->eqi", c0_e, g2))
        ) / vol
        w0_l.append(w0)
        u1_l.append(u1)
        u2_l.append(u2)
    return ExpansionTerms(a0=a0, a1=a1, a2=a2, w0=w0_l, u1=u1_l, u2=u2_l)


def _influence_solve(law: PerturbationSpec, N: int, r: int, source_cell: tuple,
                     tol: float) -> np.ndarray:
    """Per-cell projected integrals of C1 grad(phi) for a one-cell source.

    phi solves -div(C0 grad phi) = div(1_{cell} C1 p) periodically on the
    N-box; returns array (d,) + (N,)*d indexed by direction then cell.
    """
    d = law.d
    mesh, c0_e, c1_e = _element_grids(law, N, r)
    op = pde.assemble(mesh, c0_e)
    indicator = np.zeros((N,) * d)
    indicator[tuple(source_cell)] = 1.0
    ind_e = _expand_cells(indicator, r)
    out = np.empty((d,) + (N,) * d)
    for j in range(d):
        p = np.eye(d)[j]
        flux = (ind_e[:, None] * (c1_e @ p))[:, None, :]
        phi = pde.solve_periodic(op, pde.load_from_flux(mesh, flux), tol=tol)
        g = pde.gradient_at_quadrature(phi)
        per_cell = pde.cell_integrals(mesh, np.einsum("eij,eqj->eqi", c1_e, g))
        out[j] = per_cell[..., j]
    return out


def i_entry_direct(spec, N: int, r: int, k, j, direction: int,
                   tol: float = homog.DEFAULT_TOL) -> float:
    """Influence of a source at cell k on cell j, computed from scratch.

    Used as an independent oracle for the translation invariance that the
    tabulated per-offset values rely on.
    """
    law = _pm1_law(spec)
    grid = _influence_solve(law, N, r, tuple(k), tol)
    return float(grid[(direction,) + tuple(int(c) % N for c in j)])


def build_sqs_tables(
    spec, N: int, r: int, n_ref: Optional[int] = None, tol: float = homog.DEFAULT_TOL
) -> SqsTables:
    """Tabulate per-offset influence coefficients and their large-box target.

    One localized solve per direction gives the whole offset table by
    translation invariance; the infinite-volume value is approximated by the
    same integral on a reference box of side `n_ref` (default 3N) with a
    Cauchy-difference error estimate from a half-size box.
    """
    law = _pm1_law(spec)
    d = law.d
    if n_ref is None:
        n_ref = 3 * N
    if n_ref < N:
        raise ConfigurationError(f"n_ref={n_ref} must be at least N={N}")
    sc0 = pde.solve_count()
    i_grid = _influence_solve(law, N, r, (0,) * d, tol)
    origin = (slice(None),) + (0,) * d
    i_ref = _influence_solve(law, n_ref, r, (0,) * d, tol)[origin]
    n_half = max(N, n_ref // 2)
    if n_half != n_ref:
        i_half = _influence_solve(law, n_half, r, (0,) * d, tol)[origin]
        err = np.abs(i_ref - i_half)
    else:
        err = np.zeros(d)
    i_sum = i_grid.reshape(d, -1).sum(axis=1)
    return SqsTables(
        d=d,
        N=N,
        r=r,
        n_ref=n_ref,
        c0=law.c0.copy(),
        c1=law.c1.copy(),
        i_grid=i_grid,
        i_infinity=i_ref,
        i_infinity_error=err,
        i_sum=i_sum,
        tol=tol,
        build_solves=pde.solve_count() - sc0,
    )


def load_or_build_sqs_tables(path, spec, N, r, n_ref=None, tol=homog.DEFAULT_TOL) -> SqsTables:
    """Reuse cached tables when every key field matches; otherwise rebuild and save."""
    law = _pm1_law(spec)
    if n_ref is None:
        n_ref = 3 * N
    if path is not None and os.path.exists(path):
        try:
            cached = SqsTables.load(path)
        except (json.JSONDecodeError, KeyError, ValueError):
            cached = None
        if cached is not None:
            want = {
                "d": law.d,
                "N": N,
                "r": r,
                "n_ref": n_ref,
                "c0": law.c0.tolist(),
                "c1": law.c1.tolist(),
                "tol": tol,
            }
            if cached.key() == want:
                return cached
    tables = build_sqs_tables(spec, N, r, n_ref=n_ref, tol=tol)
    if path is not None:
        tables.save(path)
    return tables


def sqs1_residual(x_values, N: Optional[int] = None) -> float:
    """Cell average of the configuration: zero for exactly balanced draws."""
    x = np.asarray(x_values, dtype=float)
    if N is not None and x.shape != (N,) * x.ndim:
        raise ConfigurationError(f"x_values inconsistent with N={N}: shape {x.shape}")
    return float(abs(x.mean()))


def sqs2_residual(x_values, tables: SqsTables) -> float:
    """Mismatch of the offset-weighted pair sum against its large-box target.

    Evaluated per canonical direction via the circular autocorrelation of the
    configuration; the worst direction is returned.  Fair +-1 cells have unit
    variance, which fixes the target side.
    """
    x = np.asarray(x_values, dtype=float)
    d, N = tables.d, tables.N
    if x.shape != (N,) * d:
        raise ConfigurationError(f"x_values must have shape {(N,) * d}, got {x.shape}")
    f = np.fft.fftn(x)
    corr = np.fft.ifftn(f * np.conj(f)).real.ravel()  # corr[l] = sum_k x_k x_{k+l}
    vol = float(N**d)
    worst = 0.0
    for p in range(d):
        lhs = float(corr @ tables.i_grid[p].ravel()) / vol
        worst = max(worst, abs(lhs - tables.i_infinity[p]))
    return worst


def sample_exact_sqs1(
    N: int, stream: np.random.Generator, d: int = 2, minimal_residual: bool = False
) -> SqsConfiguration:
    """Uniformly random exactly-balanced +-1 configuration on the N-box.

    For odd N**d an exact balance is impossible; pass minimal_residual=True
    to accept |sum x| = 1 (flagged on the configuration).
    """
    n = N**d
    if n % 2 != 0 and not minimal_residual:
        raise ConfigurationError(
            f"N^d = {n} is odd: exact balance impossible; "
            "pass minimal_residual=True to sample at |sum x| = 1"
        )
    n_plus = n // 2 + (n % 2)
    base = np.concatenate([np.ones(n_plus), -np.ones(n - n_plus)])
    x = stream.permutation(base).reshape((N,) * d)
    return SqsConfiguration(
        x_values=x, sqs1_residual=sqs1_residual(x), balanced=(n % 2 == 0)
    )


def select_sqs2(
    N: int,
    stream: np.random.Generator,
    pool_size: int,
    keep: int,
    tables: SqsTables,
    minimal_residual: bool = False,
) -> list[SqsConfiguration]:
    """Draw a balanced pool and keep the `keep` best order-2 configurations.

    Ranking is by stored residual ascending with draw index as the
    deterministic tie-break (earlier wins).
    """
    if not pool_size >= keep >= 1:
        raise ConfigurationError(f"need pool_size >= keep >= 1, got {pool_size}, {keep}")
    pool = [
        sample_exact_sqs1(N, stream, d=tables.d, minimal_residual=minimal_residual)
        for _ in range(pool_size)
    ]
    for cfg in pool:
        cfg.sqs2_residual = sqs2_residual(cfg.x_values, tables)
    order = sorted(range(pool_size), key=lambda i: (pool[i].sqs2_residual, i))
    return [pool[i] for i in order[:keep]]


def run_sqs(
    spec: FieldSpec,
    N: int,
    r: int,
    M: int,
    master_seed: int,
    order: int = 1,
    pool: int = 2000,
    n_ref: Optional[int] = None,
    tol: float = homog.DEFAULT_TOL,
    threads: Optional[int] = None,
    tables: Optional[SqsTables] = None,
    tables_path=None,
    baseline_mean=None,
) -> tuple[mc.EstimatorReport, mc.SampleTable]:
    """Selection Monte Carlo: average A*_N over conditioned configurations.

    Order 1 uses M exactly balanced configurations; order 2 selects the M
    best of a `pool`-sized balanced pool by the order-2 residual.  Selection
    performs zero PDE solves; each kept configuration is then realized at
    full amplitude and solved.  The report carries residual statistics and,
    when a plain-MC mean is supplied, a per-entry bias indicator
    (mean difference over confidence half-width).
    """
    law = _pm1_law(spec)
    if order not in (1, 2):
        raise ConfigurationError(f"order must be 1 or 2, got {order}")
    if M < 2:
        raise ConfigurationError(f"need M >= 2 configurations, got {M}")
    d = spec.d
    t0 = time.perf_counter()
    precompute_solves = 0
    if order == 2 and tables is None:
        tables = load_or_build_sqs_tables(tables_path, spec, N, r, n_ref=n_ref, tol=tol)
        precompute_solves = tables.build_solves
    stream = stream_for(master_seed, 0)
    sc_selection = pde.solve_count()
    if order == 1:
        configs = [sample_exact_sqs1(N, stream, d=d) for _ in range(M)]
    else:
        configs = select_sqs2(N, stream, pool, M, tables)
    if pde.solve_count() != sc_selection:
        raise SelfCheckError("configuration selection consumed PDE solves")

    def task(m: int):
        fld = realize_perturbation(law, configs[m].x_values, N)
        fld.seed = seed_label(master_seed, m)
        return homog.homogenized_matrix(fld, r, tol=tol).values

    results = mc.run_indexed(M, task, threads)
    samples = np.stack(results, axis=0)
    aux_cols = ["sqs1_residual"] + (["sqs2_residual"] if order == 2 else [])
    cols = ["index", "seed"] + mc.entry_columns(d) + aux_cols
    rows = []
    for m in range(M):
        row = [m, seed_label(master_seed, m)] + samples[m].ravel().tolist()
        row.append(configs[m].sqs1_residual)
        if order == 2:
            row.append(configs[m].sqs2_residual)
        rows.append(row)
    extra = {
        "order": order,
        "sqs1_residual_max": max(c.sqs1_residual for c in configs),
        "precompute_solves": precompute_solves,
    }
    if order == 2:
        res = np.array([c.sqs2_residual for c in configs])
        extra.update(
            {
                "pool": pool,
                "sqs2_residual_max": float(res.max()),
                "sqs2_residual_median": float(np.median(res)),
                "n_ref": tables.n_ref,
                "i_infinity_error": tables.i_infinity_error,
            }
        )
    report, table = mc.summarize(
        method=f"sqs{order}",
        spec_signature=spec.signature(),
        d=d,
        N=N,
        r=r,
        master_seed=master_seed,
        samples=samples,
        rows=rows,
        columns=cols,
        corrector_solves=d * M,
        extra=extra,
        wall_time_s=time.perf_counter() - t0,
        threads=mc.thread_count(threads),
    )
    report.extra["bias_indicator"] = _bias_indicator(report, baseline_mean)
    return report, table


def _bias_indicator(report: mc.EstimatorReport, baseline_mean) -> Optional[list]:
    """(selected mean - plain MC mean) / CI half-width, entrywise; None if unknown."""
    if baseline_mean is None:
        return None
    base = np.asarray(baseline_mean, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ind = (report.mean - base) / report.ci_halfwidth
    return [[v if np.isfinite(v) else None for v in row] for row in ind.tolist()]
