"""Numerical primitives: normal CDF/quantile, nonnegative coordinate-descent
LASSO on column-sparse matrices, and weighted least squares with
collinearity handling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

SQRT2 = math.sqrt(2.0)
SQRT2PI = math.sqrt(2.0 * math.pi)


# --- normal distribution ---------------------------------------------------

def _vectorized(fn):
    ufunc = np.frompyfunc(fn, 1, 1)

    def wrapper(x):
        if np.ndim(x) == 0:
            return fn(float(x))
        return ufunc(np.asarray(x, dtype=float)).astype(float)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_vectorized
def norm_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / SQRT2)


@_vectorized
def norm_sf(z: float) -> float:
    """Upper tail 1 - Phi(z), accurate far into the tail."""
    return 0.5 * math.erfc(z / SQRT2)


# Acklam's rational approximation, central and tail regions.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def _lower_quantile(p: float) -> float:
    # p in (0, 0.5]
    if p < _P_LOW:
        t = math.sqrt(-2.0 * math.log(p))
        x = ((((( _C[0] * t + _C[1]) * t + _C[2]) * t + _C[3]) * t + _C[4]) * t + _C[5]) / \
            ((((_D[0] * t + _D[1]) * t + _D[2]) * t + _D[3]) * t + 1.0)
    else:
        r = p - 0.5
        s = r * r
        x = ((((( _A[0] * s + _A[1]) * s + _A[2]) * s + _A[3]) * s + _A[4]) * s + _A[5]) * r / \
            (((((_B[0] * s + _B[1]) * s + _B[2]) * s + _B[3]) * s + _B[4]) * s + 1.0)
    # one Halley refinement step
    e = 0.5 * math.erfc(-x / SQRT2) - p
    u = e * SQRT2PI * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


@_vectorized
def inv_norm_cdf(prob: float) -> float:
    if not 0.0 < prob < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {prob}")
    if prob > 0.5:
        return -_lower_quantile(1.0 - prob)  # 1 - prob is exact here
    return _lower_quantile(prob)


# --- sparse columns ----------------------------------------------------------

@dataclass
class SparseColumns:
    """Column-major sparse matrix (CSC layout)."""

    n_rows: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    @property
    def n_cols(self) -> int:
        return len(self.indptr) - 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_rows, self.n_cols

    @classmethod
    def from_row_lists(cls, n_rows: int, columns: list) -> "SparseColumns":
        indptr = np.zeros(len(columns) + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(c) for c in columns])
        indices = np.concatenate([np.asarray(c, dtype=np.int64) for c in columns]) \
            if columns else np.zeros(0, dtype=np.int64)
        return cls(n_rows, indptr, indices, np.ones(len(indices)))

    @classmethod
    def from_dense(cls, X: np.ndarray) -> "SparseColumns":
        X = np.asarray(X, dtype=float)
        cols, indices, data = [0], [], []
        for s in range(X.shape[1]):
            nz = np.flatnonzero(X[:, s])
            indices.append(nz)
            data.append(X[nz, s])
            cols.append(cols[-1] + len(nz))
        return cls(X.shape[0], np.asarray(cols, dtype=np.int64),
                   np.concatenate(indices).astype(np.int64) if indices else np.zeros(0, np.int64),
                   np.concatenate(data) if data else np.zeros(0))

    def column(self, s: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[s], self.indptr[s + 1]
        return self.indices[lo:hi], self.data[lo:hi]

    def to_dense(self, columns=None) -> np.ndarray:
        columns = range(self.n_cols) if columns is None else columns
        columns = list(columns)
        out = np.zeros((self.n_rows, len(columns)))
        for j, s in enumerate(columns):
            rows, vals = self.column(s)
            out[rows, j] = vals
        return out

    def rows(self, keep: np.ndarray) -> "SparseColumns":
        """Restrict to a subset of rows given as a boolean mask, renumbering them."""
        keep = np.asarray(keep, dtype=bool)
        new_index = np.cumsum(keep) - 1
        mask = keep[self.indices]
        counts = np.add.reduceat(mask.astype(np.int64), self.indptr[:-1]) if len(mask) else \
            np.zeros(self.n_cols, dtype=np.int64)
        # reduceat misreports empty columns
        counts[self.indptr[:-1] == self.indptr[1:]] = 0
        indptr = np.zeros(self.n_cols + 1, dtype=np.int64)
        indptr[1:] = np.cumsum(counts)
        return SparseColumns(int(keep.sum()), indptr, new_index[self.indices[mask]], self.data[mask])

    def matvec(self, beta: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n_rows)
        col_of = np.repeat(np.arange(self.n_cols), np.diff(self.indptr))
        np.add.at(out, self.indices, self.data * beta[col_of])
        return out

    def rmatvec(self, v: np.ndarray) -> np.ndarray:
        col_of = np.repeat(np.arange(self.n_cols), np.diff(self.indptr))
        return np.bincount(col_of, weights=self.data * v[self.indices], minlength=self.n_cols)


def as_sparse(X) -> SparseColumns:
    return X if isinstance(X, SparseColumns) else SparseColumns.from_dense(np.asarray(X))


# --- LASSO -------------------------------------------------------------------

class LassoConvergenceError(RuntimeError):
    def __init__(self, lam: float, iterations: int, max_gap: float, residual: float):
        self.lam = lam
        self.iterations = iterations
        self.max_gap = max_gap
        self.residual = residual
        super().__init__(f"coordinate descent did not converge at lambda={lam:g} after "
                         f"{iterations} sweeps (max update {max_gap:.3g}, weighted RSS {residual:.6g})")


@dataclass
class LassoOptions:
    lambda_path: np.ndarray
    tolerance: float = 1e-10
    max_iterations: int = 100_000
    nonnegative: bool = True

    def __post_init__(self):
        path = np.atleast_1d(np.asarray(self.lambda_path, dtype=float))
        if len(path) == 0 or (path < 0).any():
            raise ValueError("lambda path must be non-empty and nonnegative")
        if (np.diff(path) >= 0).any():
            raise ValueError("lambda path must be strictly descending")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        self.lambda_path = path


@njit(cache=True)
def _cd_solve(indptr, indices, data, w, resid, beta, norms, lam, tol, max_iter, nonneg):
    n_cols = len(beta)
    max_gap = 0.0
    for sweep in range(max_iter):
        max_gap = 0.0
        for s in range(n_cols):
            norm = norms[s]
            if norm == 0.0:
                continue
            g = 0.0
            for idx in range(indptr[s], indptr[s + 1]):
                r = indices[idx]
                g += data[idx] * w[r] * resid[r]
            rho = g + norm * beta[s]
            if nonneg:
                new = max(rho - lam, 0.0) / norm
            elif rho > lam:
                new = (rho - lam) / norm
            elif rho < -lam:
                new = (rho + lam) / norm
            else:
                new = 0.0
            delta = new - beta[s]
            if delta != 0.0:
                for idx in range(indptr[s], indptr[s + 1]):
                    resid[indices[idx]] -= data[idx] * delta
                beta[s] = new
                gap = abs(delta) * norm
                if gap > max_gap:
                    max_gap = gap
        if max_gap < tol:
            return sweep + 1, max_gap
    return -1, max_gap


def lasso_path(X, y: np.ndarray, weights: np.ndarray | None, options: LassoOptions,
               beta0: np.ndarray | None = None) -> np.ndarray:
    """Solutions of  1/2 ||W^(1/2) (y - X b)||^2 + lam ||b||_1  along the path.

    Coordinates are visited cyclically in index order, warm-starting each
    lambda from the previous solution. Convergence is declared when a full
    sweep moves no coordinate by more than ``tolerance`` in gradient units
    (|delta b_s| * ||x_s||_W^2), which bounds the KKT violation it closes.
    Returns an array of shape (len(path), n_cols).
    """
    X = as_sparse(X)
    y = np.asarray(y, dtype=float)
    if len(y) != X.n_rows:
        raise ValueError(f"y has {len(y)} rows, X has {X.n_rows}")
    w = np.ones(X.n_rows) if weights is None else np.asarray(weights, dtype=float)
    if len(w) != X.n_rows or (w <= 0).any():
        raise ValueError("weights must be positive, one per row")
    col_of = np.repeat(np.arange(X.n_cols), np.diff(X.indptr))
    norms = np.bincount(col_of, weights=X.data ** 2 * w[X.indices], minlength=X.n_cols)
    beta = np.zeros(X.n_cols) if beta0 is None else np.array(beta0, dtype=float)
    resid = y - X.matvec(beta)
    out = np.empty((len(options.lambda_path), X.n_cols))
    for i, lam in enumerate(options.lambda_path):
        sweeps, gap = _cd_solve(X.indptr, X.indices, X.data.astype(float), w, resid, beta, norms,
                                float(lam), float(options.tolerance), int(options.max_iterations),
                                bool(options.nonnegative))
        if sweeps < 0:
            raise LassoConvergenceError(float(lam), options.max_iterations, gap,
                                        float(np.sum(w * resid ** 2)))
        out[i] = beta
    return out


def lasso_cd(X, y: np.ndarray, weights: np.ndarray | None, options: LassoOptions) -> np.ndarray:
    """Coefficients at the last lambda of the path."""
    return lasso_path(X, y, weights, options)[-1]


def kkt_violation(X, y, weights, beta, lam, nonnegative=True) -> float:
    """Largest violation of the LASSO optimality conditions at ``beta``."""
    X = as_sparse(X)
    w = np.ones(X.n_rows) if weights is None else np.asarray(weights, dtype=float)
    grad = X.rmatvec(w * (y - X.matvec(beta)))
    active = beta != 0
    if nonnegative:
        inactive_excess = np.maximum(grad[~active] - lam, 0.0)
    else:
        inactive_excess = np.maximum(np.abs(grad[~active]) - lam, 0.0)
    active_gap = np.abs(grad[active] - lam * np.sign(beta[active]))
    return float(max(inactive_excess.max(initial=0.0), active_gap.max(initial=0.0)))


# --- least squares -----------------------------------------------------------

class RankDeficientError(np.linalg.LinAlgError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"normal equations singular even after dropping collinear columns; "
                         f"offending columns: {self.columns}")


@dataclass
class LeastSquaresResult:
    beta: np.ndarray  # full length; dropped columns are 0
    covariance: np.ndarray  # over kept columns, in ``kept`` order
    residual_variance: float
    dof: int
    kept: list[int]
    dropped: list[int] = field(default_factory=list)
    jittered: bool = False

    @property
    def stderr(self) -> np.ndarray:
        """Per-column standard errors; NaN for dropped columns."""
        out = np.full(len(self.beta), np.nan)
        out[self.kept] = np.sqrt(np.maximum(np.diag(self.covariance), 0.0))
        return out


def _independent_columns(G: np.ndarray, rel_tol: float = 1e-10) -> tuple[list[int], list[int]]:
    """Greedy in index order: drop a column if it lies in the span of earlier kept ones."""
    kept, dropped = [], []
    L = np.zeros((0, 0))
    for j in range(G.shape[0]):
        gjj = G[j, j]
        if gjj <= 0:
            dropped.append(j)
            continue
        if kept:
            v = np.linalg.solve(L, G[kept, j])
            d = gjj - v @ v
        else:
            v = np.zeros(0)
            d = gjj
        if d <= rel_tol * gjj:
            dropped.append(j)
            continue
        n = len(kept)
        L_new = np.zeros((n + 1, n + 1))
        L_new[:n, :n] = L
        L_new[n, :n] = v
        L_new[n, n] = math.sqrt(d)
        L = L_new
        kept.append(j)
    return kept, dropped


def least_squares(X, y: np.ndarray, weights: np.ndarray | None = None) -> LeastSquaresResult:
    """Weighted least squares via the normal equations.

    Later-indexed collinear columns are dropped. A 1e-10 ridge is added to
    the diagonal only if the plain Cholesky solve fails; ``jittered`` records it.
    """
    Xd = X.to_dense() if isinstance(X, SparseColumns) else np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = Xd.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    G = Xd.T @ (w[:, None] * Xd)
    kept, dropped = _independent_columns(G)
    if len(kept) > n:
        raise RankDeficientError(kept[n:])
    Gk = G[np.ix_(kept, kept)]
    b = Xd[:, kept].T @ (w * y)
    jittered = False
    try:
        L = np.linalg.cholesky(Gk)
    except np.linalg.LinAlgError:
        jittered = True
        try:
            L = np.linalg.cholesky(Gk + 1e-10 * np.eye(len(kept)))
        except np.linalg.LinAlgError:
            raise RankDeficientError(kept) from None
    Linv = np.linalg.inv(L) if len(kept) else np.zeros((0, 0))
    G_inv = Linv.T @ Linv
    beta_k = G_inv @ b
    beta = np.zeros(p)
    beta[kept] = beta_k
    resid = y - Xd[:, kept] @ beta_k
    dof = n - len(kept)
    sigma2 = float(np.sum(w * resid ** 2) / dof) if dof > 0 else 0.0
    return LeastSquaresResult(beta=beta, covariance=sigma2 * G_inv, residual_variance=sigma2,
                              dof=dof, kept=kept, dropped=dropped, jittered=jittered)
