"""Server-side decoding of aggregated reports into candidate frequencies.

Pipeline: aggregate -> estimate_signal -> per-cohort proportions ->
nonnegative LASSO selection -> weighted least-squares refit ->
multiple-testing filter.

Regression scale: the response for row (cohort j, bit i) is t_ij / N_j, the
estimated fraction of cohort j whose Bloom bit i is truly set. A candidate's
coefficient is then its population frequency, and rows are weighted by N_j.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from rappor.client import Report, ReportFormatError, as_bytes, bloom_indices, parse_report
from rappor.numerics import (
    LassoOptions,
    SparseColumns,
    kkt_violation,
    lasso_path,
    least_squares,
    norm_sf,
)
from rappor.params import Params, require_decodable, response_probabilities

log = logging.getLogger(__name__)

CORRECTIONS = ("bonferroni", "benjamini_hochberg")
CSV_HEADER = ("candidate", "estimate", "stderr", "p_value", "proportion", "significant")


class MalformedReport(ValueError):
    pass


# --- aggregation -------------------------------------------------------------

@dataclass
class CohortCounts:
    n: np.ndarray  # (m,) reports per cohort
    counts: np.ndarray  # (m, k) per-bit set counts
    skipped: int = 0
    errors: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: Params) -> "CohortCounts":
        return cls(np.zeros(params.m, dtype=np.int64), np.zeros((params.m, params.k), dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.n.sum())

    def __add__(self, other: "CohortCounts") -> "CohortCounts":
        errors = dict(self.errors)
        for key, value in other.errors.items():
            errors[key] = errors.get(key, 0) + value
        return CohortCounts(self.n + other.n, self.counts + other.counts,
                            self.skipped + other.skipped, errors)

    def add(self, cohort: int, bits: np.ndarray) -> None:
        self.n[cohort] += 1
        self.counts[cohort] += bits

    def add_batch(self, cohorts: np.ndarray, bits: np.ndarray) -> None:
        """Bulk tally of an (n, k) bit matrix."""
        m = len(self.n)
        self.n += np.bincount(cohorts, minlength=m)
        for j in range(m):
            sel = cohorts == j
            if sel.any():
                self.counts[j] += bits[sel].sum(axis=0, dtype=np.int64)

    def to_dict(self) -> dict:
        return {"n": self.n.tolist(), "counts": self.counts.tolist(),
                "skipped": self.skipped, "errors": dict(self.errors)}

    @classmethod
    def from_dict(cls, data: dict) -> "CohortCounts":
        return cls(np.asarray(data["n"], dtype=np.int64), np.asarray(data["counts"], dtype=np.int64),
                   int(data.get("skipped", 0)), dict(data.get("errors", {})))


def aggregate(reports: Iterable, params: Params, strict: bool = False) -> CohortCounts:
    """Tally reports per cohort and bit.

    Items may be ``Report`` objects or wire-format lines. Malformed items are
    skipped and counted by error kind, unless ``strict`` is set.
    """
    out = CohortCounts.zeros(params)
    for lineno, item in enumerate(reports, 1):
        if isinstance(item, (str, bytes)) and not item.strip():
            continue
        try:
            report = item if isinstance(item, Report) else parse_report(item, params)
            if len(report.bits) != params.k or not 0 <= report.cohort < params.m:
                raise ReportFormatError("report does not match params")
        except ReportFormatError as exc:
            if strict:
                raise MalformedReport(f"report {lineno}: {exc}") from exc
            out.skipped += 1
            kind = type(exc).__name__ if not str(exc) else str(exc).split(":")[0]
            out.errors[kind] = out.errors.get(kind, 0) + 1
            continue
        out.add(report.cohort, report.bits)
    if out.skipped:
        log.warning("skipped %d malformed reports", out.skipped)
    return out


# --- signal estimate ---------------------------------------------------------

@dataclass
class EstimatedSignal:
    y: np.ndarray  # (k*m,) t_ij stacked cohort-major
    n: np.ndarray  # (m,)


def estimate_signal(counts: CohortCounts, params: Params) -> EstimatedSignal:
    """Unbiased estimate of how many reporters truly had each bit set."""
    require_decodable(params)
    q_star, p_star = response_probabilities(params.f, params.p, params.q)
    denom = (1.0 - params.f) * (params.q - params.p)
    t = (counts.counts - p_star * counts.n[:, None]) / denom
    return EstimatedSignal(t.reshape(-1).astype(float), counts.n.copy())


# --- design matrix -----------------------------------------------------------

@dataclass
class DesignMatrix:
    X: SparseColumns
    candidates: list[bytes]
    k: int
    m: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.X.shape

    def column_rows(self, s: int) -> np.ndarray:
        return self.X.column(s)[0]

    def to_dense(self) -> np.ndarray:
        return self.X.to_dense()


def build_design_matrix(candidates: Sequence[str | bytes], params: Params) -> DesignMatrix:
    """0/1 matrix with row j*k + i set when a candidate hashes to bit i in cohort j.

    In basic modes the candidate list is the category list and candidate s
    maps to bit s.
    """
    keys = [as_bytes(c) for c in candidates]
    if not keys:
        raise ValueError("candidate list is empty")
    if len(set(keys)) != len(keys):
        dupes = sorted({c for c in keys if keys.count(c) > 1})
        raise ValueError(f"duplicate candidates: {dupes}")
    k, m = params.k, params.m
    columns = []
    if params.is_basic:
        if len(keys) > k:
            raise ValueError(f"{len(keys)} categories do not fit in k={k} bits")
        columns = [[s] for s in range(len(keys))]
    else:
        for key in keys:
            rows = set()
            for j in range(m):
                rows.update(j * k + i for i in bloom_indices(key, j, k, params.h))
            columns.append(sorted(rows))
    return DesignMatrix(SparseColumns.from_row_lists(k * m, columns), keys, k, m)


# --- options and results -----------------------------------------------------

@dataclass
class DecodeOptions:
    alpha: float = 0.05
    correction: str = "bonferroni"
    seed: int = 0
    n_lambdas: int = 50
    lambda_min_ratio: float = 1e-4
    folds: int = 5
    tolerance: float = 1e-9  # relative to the largest correlation |X'Wy|
    max_iterations: int = 100_000
    strict: bool = False

    def __post_init__(self):
        if self.correction == "bh":
            self.correction = "benjamini_hochberg"
        if self.correction not in CORRECTIONS:
            raise ValueError(f"correction must be one of {CORRECTIONS}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass
class Selection:
    indices: list[int]
    coefficients: np.ndarray
    lam: float
    rule: str
    cv_error: np.ndarray | None = None
    lambda_path: np.ndarray | None = None


@dataclass
class Fit:
    index: int
    frequency: float
    stderr: float
    p_value: float


@dataclass
class RefitResult:
    fits: list[Fit]
    dropped: list[int]
    residual_variance: float
    dof: int
    jittered: bool


@dataclass
class DecodedRow:
    candidate: str
    estimate: float
    stderr: float
    p_value: float
    proportion: float
    significant: bool
    clipped: bool = False


@dataclass
class DecodedDistribution:
    rows: list[DecodedRow]
    correction: str
    alpha: float
    M: int
    N: int
    lam: float | None = None
    lambda_rule: str | None = None
    dropped_collinear: list[str] = field(default_factory=list)
    skipped_reports: int = 0

    def significant(self) -> list[DecodedRow]:
        return [r for r in self.rows if r.significant]

    def by_candidate(self) -> dict[str, DecodedRow]:
        return {r.candidate: r for r in self.rows}

    def metadata(self) -> dict:
        return {
            "method": self.correction,
            "alpha": self.alpha,
            "M": self.M,
            "N": self.N,
            "lambda": self.lam,
            "lambda_rule": self.lambda_rule,
            "dropped_collinear": list(self.dropped_collinear),
            "clipped_negative": [r.candidate for r in self.rows if r.clipped],
            "skipped_reports": self.skipped_reports,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows:
            writer.writerow([r.candidate, repr(float(r.estimate)), repr(float(r.stderr)),
                             repr(float(r.p_value)), repr(float(r.proportion)),
                             "true" if r.significant else "false"])
        return buf.getvalue()

    def write(self, path) -> None:
        from pathlib import Path

        path = Path(path)
        path.write_text(self.to_csv())
        path.with_suffix(path.suffix + ".meta.json").write_text(json.dumps(self.metadata(), indent=2))


# --- regression stages -------------------------------------------------------

def regression_inputs(signal: EstimatedSignal, design: DesignMatrix):
    """Proportion-scale response, row weights and design restricted to non-empty cohorts."""
    n_rows = np.repeat(signal.n, design.k).astype(float)
    keep = n_rows > 0
    y = np.zeros_like(signal.y)
    y[keep] = signal.y[keep] / n_rows[keep]
    w = n_rows / n_rows[keep].mean() if keep.any() else n_rows
    return design.X.rows(keep), y[keep], w[keep]


def _path_for(X: SparseColumns, y, w, options: DecodeOptions):
    corr = X.rmatvec(w * y)
    lam_max = float(max(corr.max(initial=0.0), 0.0)) / X.n_rows
    if lam_max <= 0.0:
        return None
    path = lam_max * np.geomspace(1.0, options.lambda_min_ratio, options.n_lambdas)
    return path


def _solve_path(X, y, w, path_per_row, options: DecodeOptions, tol_scale: float):
    lo = LassoOptions(path_per_row * X.n_rows, tolerance=options.tolerance * tol_scale,
                      max_iterations=options.max_iterations, nonnegative=True)
    return lasso_path(X, y, w, lo)


def _cv_is_informative(X: SparseColumns) -> bool:
    # A column seen in a single row can never be predicted on held-out rows.
    return bool((np.diff(X.indptr) > 1).any())


def lasso_select(design: DesignMatrix | SparseColumns, y_prop: np.ndarray,
                 weights: np.ndarray | None = None, options: DecodeOptions | None = None,
                 noise_var: np.ndarray | None = None, lam: float | None = None) -> Selection:
    """Pick candidates with nonzero nonnegative-LASSO coefficients.

    The objective is 1/(2 n) ||W^(1/2)(y - X b)||^2 + lam ||b||_1 over n rows.
    ``lam`` fixes the penalty; otherwise it is chosen on a geometric path by
    K-fold cross-validation over rows. When no column spans more than one row
    (basic modes) cross-validation cannot score anything, and the penalty
    minimizing Stein's unbiased risk estimate is used instead, which needs
    the per-row ``noise_var``.
    """
    options = options or DecodeOptions()
    X = design.X if isinstance(design, DesignMatrix) else design
    y = np.asarray(y_prop, dtype=float)
    w = np.ones(X.n_rows) if weights is None else np.asarray(weights, dtype=float)
    corr = X.rmatvec(w * y)
    tol_scale = max(float(np.abs(corr).max(initial=0.0)), 1e-300)

    if lam is not None:
        coef = _solve_path(X, y, w, np.array([lam]), options, tol_scale)[-1]
        return Selection(list(np.flatnonzero(coef > 0)), coef, float(lam), "fixed")

    path = _path_for(X, y, w, options)
    if path is None:
        return Selection([], np.zeros(X.n_cols), 0.0, "empty")
    coefs = _solve_path(X, y, w, path, options, tol_scale)

    if _cv_is_informative(X) and options.folds >= 2:
        rng = np.random.default_rng(options.seed)
        fold = rng.permutation(X.n_rows) % options.folds
        err = np.zeros(len(path))
        for f in range(options.folds):
            train = fold != f
            Xt = X.rows(train)
            fold_coefs = _solve_path(Xt, y[train], w[train], path, options, tol_scale)
            Xh = X.rows(~train)
            for i in range(len(path)):
                pred = Xh.matvec(fold_coefs[i])
                err[i] += np.sum(w[~train] * (y[~train] - pred) ** 2)
        best = int(np.argmin(err))
        rule = "cv"
    else:
        if noise_var is None:
            raise ValueError("noise_var is required when cross-validation is uninformative")
        err = np.array([_sure(X, y, w, noise_var, c) for c in coefs])
        best = int(np.argmin(err))
        rule = "sure"
    coef = coefs[best]
    return Selection(list(np.flatnonzero(coef > 0)), coef, float(path[best]), rule, err, path)


def _sure(X: SparseColumns, y, w, noise_var, coef) -> float:
    # Weighted risk estimate; LASSO degrees of freedom = size of the active set.
    resid = y - X.matvec(coef)
    sigma2 = np.asarray(noise_var, dtype=float) * w  # variance in weighted units
    return float(np.sum(w * resid ** 2) - np.sum(sigma2) + 2.0 * np.count_nonzero(coef) * sigma2.mean())


def ols_refit(X: SparseColumns, selected: Sequence[int], y: np.ndarray,
              weights: np.ndarray | None = None) -> RefitResult:
    """Least-squares frequencies for the selected columns with one-sided p-values.

    H0: frequency = 0 against H1: frequency > 0, normal reference.
    """
    selected = list(selected)
    if not selected:
        return RefitResult([], [], 0.0, len(y), False)
    Xs = X.to_dense(selected)
    res = least_squares(Xs, y, weights)
    se = res.stderr
    fits = []
    for j in res.kept:
        beta, s = float(res.beta[j]), float(se[j])
        if s > 0:
            p_value = float(norm_sf(beta / s))
        else:
            p_value = 0.0 if beta > 0 else 1.0
        fits.append(Fit(selected[j], beta, s, p_value))
    return RefitResult(fits, [selected[j] for j in res.dropped], res.residual_variance,
                       res.dof, res.jittered)


def significance_filter(p_values: Sequence[float], M: int, alpha: float, method: str) -> list[bool]:
    """Per-hypothesis verdicts; the M - len(p_values) untested hypotheses count toward M."""
    p = np.asarray(p_values, dtype=float)
    if M < len(p):
        raise ValueError("M must be at least the number of tested hypotheses")
    if method == "bh":
        method = "benjamini_hochberg"
    if method == "bonferroni":
        return [bool(v < alpha / M) for v in p]
    if method != "benjamini_hochberg":
        raise ValueError(f"unknown correction {method!r}")
    order = np.argsort(p, kind="stable")
    thresholds = alpha * np.arange(1, len(p) + 1) / M
    passing = np.flatnonzero(p[order] <= thresholds)
    verdict = np.zeros(len(p), dtype=bool)
    if len(passing):
        verdict[order[: passing[-1] + 1]] = True
    return verdict.tolist()


# --- full pipeline -----------------------------------------------------------

def noise_variance(counts: CohortCounts, params: Params) -> np.ndarray:
    """Per-row variance of t_ij / N_j under the no-signal model."""
    q_star, p_star = response_probabilities(params.f, params.p, params.q)
    denom = (1.0 - params.f) * (params.q - params.p)
    n = np.repeat(counts.n, params.k).astype(float)
    n = n[n > 0]
    return p_star * (1.0 - p_star) / (n * denom ** 2)


def decode_counts(counts: CohortCounts, candidates: Sequence[str | bytes], params: Params,
                  options: DecodeOptions | None = None) -> DecodedDistribution:
    options = options or DecodeOptions()
    require_decodable(params)
    labels = [c.decode("utf-8", "replace") if isinstance(c, bytes) else c for c in candidates]
    M, N = len(labels), counts.total
    design = build_design_matrix(candidates, params)
    empty = DecodedDistribution([], options.correction, options.alpha, M, N,
                                skipped_reports=counts.skipped)
    if N == 0:
        return empty
    signal = estimate_signal(counts, params)
    X, y, w = regression_inputs(signal, design)
    selection = lasso_select(X, y, w, options, noise_var=noise_variance(counts, params))
    empty.lam, empty.lambda_rule = selection.lam, selection.rule
    if not selection.indices:
        return empty
    refit = ols_refit(X, selection.indices, y, w)
    verdicts = significance_filter([f.p_value for f in refit.fits], M, options.alpha,
                                   options.correction)
    rows = []
    for fit, sig in zip(refit.fits, verdicts):
        clipped = fit.frequency < 0
        freq = max(fit.frequency, 0.0)
        rows.append(DecodedRow(labels[fit.index], freq * N, fit.stderr * N, fit.p_value,
                               freq, bool(sig) and not clipped, clipped))
    rows.sort(key=lambda r: (-r.estimate, r.candidate))
    return DecodedDistribution(rows, options.correction, options.alpha, M, N, selection.lam,
                               selection.rule, [labels[i] for i in refit.dropped], counts.skipped)


def decode(reports: Iterable, candidates: Sequence[str | bytes], params: Params,
           options: DecodeOptions | None = None) -> DecodedDistribution:
    options = options or DecodeOptions()
    counts = aggregate(reports, params, strict=options.strict)
    return decode_counts(counts, candidates, params, options)


def check_kkt(selection: Selection, X: SparseColumns, y, w) -> float:
    """KKT violation of a selection on the per-row penalty scale."""
    return kkt_violation(X, y, w, selection.coefficients, selection.lam * X.n_rows) / X.n_rows
