"""Monte Carlo estimation of E[A*_N]: seeded streams, reports, comparisons.

Every estimator in the package funnels through the same machinery: one
counter-split RNG stream per realization index, an ordered per-index sample
table, and an EstimatorReport with per-entry mean, unbiased sample variance,
95% confidence half-width and cost accounting in corrector solves (the unit
in which matched-cost comparisons are defined).
"""

from __future__ import annotations

import json
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Sequence

import numpy as np

from . import homog
from .errors import ConfigurationError, EstimationError, HvrError
from .rfield import FieldSpec, draw_field, seed_label, stream_for

Z_95 = 1.96  # normal quantile for the built-in 95% confidence level
SCHEMA_VERSION = 1


def entry_columns(d: int) -> list[str]:
    return [f"entry_{i + 1}{j + 1}" for i in range(d) for j in range(d)]


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


@dataclass
class SampleTable:
    """Per-realization rows: index, seed, estimator-sample entries, aux fields.

    The entry_* columns always hold the estimator samples whose mean the
    report states; method-specific raw material goes in the aux columns.
    """

    columns: list[str]
    rows: list[list]

    def to_csv_text(self) -> str:
        lines = [",".join(self.columns)]
        for row in self.rows:
            lines.append(",".join(_fmt(v) for v in row))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv_text())

    def column(self, name: str) -> np.ndarray:
        k = self.columns.index(name)
        return np.array([row[k] for row in self.rows], dtype=float)

    def entry_samples(self, d: int) -> np.ndarray:
        """Estimator samples as an (M, d, d) array."""
        cols = [self.column(c) for c in entry_columns(d)]
        return np.stack(cols, axis=1).reshape(len(self.rows), d, d)


@dataclass
class EstimatorReport:
    """Summary of one estimator run; serializes to a deterministic JSON object."""

    method: str
    d: int
    N: int
    r: int
    M: int
    mean: np.ndarray
    variance: np.ndarray
    ci_halfwidth: np.ndarray
    corrector_solves: int
    master_seed: int
    law_signature: str
    extra: dict = dc_field(default_factory=dict)
    wall_time_s: float = 0.0
    threads: int = 1

    def to_jsonable(self, include_timing: bool = False) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "method": self.method,
            "d": self.d,
            "N": self.N,
            "r": self.r,
            "M": self.M,
            "mean": _listify(self.mean),
            "variance": _listify(self.variance),
            "ci_halfwidth": _listify(self.ci_halfwidth),
            "corrector_solves": int(self.corrector_solves),
            "master_seed": int(self.master_seed),
            "law_signature": self.law_signature,
            "extra": _listify(self.extra),
        }
        if include_timing:
            # Volatile fields: kept out of the canonical file form so that
            # reruns (any thread count) are byte-identical.
            out["timing"] = {"wall_time_s": self.wall_time_s, "threads": self.threads}
        return out

    def to_json_text(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_jsonable(include_timing), sort_keys=True, indent=2) + "\n"

    def save(self, path, include_timing: bool = False) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json_text(include_timing))

    @classmethod
    def from_jsonable(cls, obj: dict) -> "EstimatorReport":
        return cls(
            method=obj["method"],
            d=int(obj["d"]),
            N=int(obj["N"]),
            r=int(obj["r"]),
            M=int(obj["M"]),
            mean=np.asarray(obj["mean"], dtype=float),
            variance=np.asarray(obj["variance"], dtype=float),
            ci_halfwidth=np.asarray(obj["ci_halfwidth"], dtype=float),
            corrector_solves=int(obj["corrector_solves"]),
            master_seed=int(obj["master_seed"]),
            law_signature=obj.get("law_signature", ""),
            extra=obj.get("extra", {}),
        )


def _listify(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, dict):
        return {k: _listify(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_listify(v) for v in x]
    return x


def confidence_interval(mean: float, variance: float, M: int) -> tuple[float, float]:
    """95% CLT confidence interval mean -/+ 1.96 sqrt(variance / M)."""
    if variance < 0.0:
        raise ConfigurationError(f"variance must be >= 0, got {variance}")
    if M < 2:
        raise ConfigurationError(f"need M >= 2 samples, got {M}")
    half = Z_95 * np.sqrt(variance / M)
    return (float(mean - half), float(mean + half))


def thread_count(threads: Optional[int] = None) -> int:
    """Worker count: explicit argument, else the HVR_THREADS environment variable."""
    if threads is None:
        threads = int(os.environ.get("HVR_THREADS", "1"))
    return max(1, threads)


def run_indexed(M: int, task: Callable[[int], tuple], threads: Optional[int] = None) -> list:
    """Evaluate task(0..M-1), possibly concurrently; results in index order.

    Aggregation order is fixed by index, so the output is independent of the
    worker count.
    """
    nt = thread_count(threads)

    def guarded(i: int):
        try:
            return task(i)
        except HvrError as exc:
            raise EstimationError(f"realization {i} failed: {exc}") from exc

    if nt == 1 or M <= 1:
        return [guarded(i) for i in range(M)]
    with ThreadPoolExecutor(max_workers=nt) as pool:
        return list(pool.map(guarded, range(M)))


def summarize(
    method: str,
    spec_signature: str,
    d: int,
    N: int,
    r: int,
    master_seed: int,
    samples: np.ndarray,
    rows: list[list],
    columns: list[str],
    corrector_solves: int,
    extra: Optional[dict] = None,
    wall_time_s: float = 0.0,
    threads: int = 1,
) -> tuple[EstimatorReport, SampleTable]:
    """Aggregate (M, d, d) estimator samples into a report plus its table."""
    M = samples.shape[0]
    mean = samples.mean(axis=0)
    variance = samples.var(axis=0, ddof=1)
    ci = Z_95 * np.sqrt(variance / M)
    report = EstimatorReport(
        method=method,
        d=d,
        N=N,
        r=r,
        M=M,
        mean=mean,
        variance=variance,
        ci_halfwidth=ci,
        corrector_solves=corrector_solves,
        master_seed=master_seed,
        law_signature=spec_signature,
        extra=extra or {},
        wall_time_s=wall_time_s,
        threads=threads,
    )
    return report, SampleTable(columns=columns, rows=rows)


def run_mc(
    spec: FieldSpec,
    N: int,
    r: int,
    M: int,
    master_seed: int,
    tol: float = homog.DEFAULT_TOL,
    threads: Optional[int] = None,
) -> tuple[EstimatorReport, SampleTable]:
    """Plain Monte Carlo estimate of E[A*_N] from M independent draws."""
    if M < 2:
        raise ConfigurationError(f"need M >= 2 realizations, got {M}")
    d = spec.d
    t0 = time.perf_counter()

    def task(m: int):
        fld = draw_field(spec, N, stream_for(master_seed, m))
        fld.seed = seed_label(master_seed, m)
        return homog.homogenized_matrix(fld, r, tol=tol).values

    results = run_indexed(M, task, threads)
    samples = np.stack(results, axis=0)
    cols = ["index", "seed"] + entry_columns(d)
    rows = [
        [m, seed_label(master_seed, m), *samples[m].ravel().tolist()] for m in range(M)
    ]
    return summarize(
        method="mc",
        spec_signature=spec.signature(),
        d=d,
        N=N,
        r=r,
        master_seed=master_seed,
        samples=samples,
        rows=rows,
        columns=cols,
        corrector_solves=d * M,
        wall_time_s=time.perf_counter() - t0,
        threads=thread_count(threads),
    )


def cost_matched(baseline: EstimatorReport, reduced: EstimatorReport, rtol: float = 0.05) -> bool:
    a, b = baseline.corrector_solves, reduced.corrector_solves
    return abs(a - b) <= rtol * max(a, b)


def variance_ratio(
    baseline: EstimatorReport, reduced: EstimatorReport, entry: tuple[int, int] = (0, 0)
) -> float:
    """Baseline variance / reduced variance for one matrix entry.

    Both reports must target the same (law, N, r).  A corrector-solve budget
    mismatch beyond 5% is flagged with a warning, not an error.
    """
    for attr in ("d", "N", "r"):
        if getattr(baseline, attr) != getattr(reduced, attr):
            raise ConfigurationError(
                f"reports target different {attr}: "
                f"{getattr(baseline, attr)} vs {getattr(reduced, attr)}"
            )
    if baseline.law_signature != reduced.law_signature:
        raise ConfigurationError("reports target different field laws")
    if not cost_matched(baseline, reduced):
        warnings.warn(
            f"cost mismatch beyond 5%: {baseline.corrector_solves} vs "
            f"{reduced.corrector_solves} corrector solves",
            stacklevel=2,
        )
    i, j = entry
    return float(baseline.variance[i, j] / reduced.variance[i, j])


def compare_reports(baseline: EstimatorReport, reduced: EstimatorReport) -> dict:
    """Per-entry variance ratios plus cost accounting, as a JSON-able dict."""
    warns: list[str] = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ratios = {
            f"{i + 1}{j + 1}": variance_ratio(baseline, reduced, (i, j))
            for i in range(baseline.d)
            for j in range(baseline.d)
        }
        warns.extend(str(w.message) for w in caught)
    return {
        "baseline_method": baseline.method,
        "reduced_method": reduced.method,
        "variance_ratio": ratios,
        "cost_ratio": reduced.corrector_solves / baseline.corrector_solves,
        "cost_matched": cost_matched(baseline, reduced),
        "warnings": warns,
    }
