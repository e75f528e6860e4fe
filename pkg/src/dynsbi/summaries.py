"""Summary statistics for count series.

The primitives are written for batches, ``(n, T)`` arrays with one series
per row; the scalar versions wrap the batch code so a statistic computed
inside a summary vector is bit-identical to the standalone call.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

VOLE_NAMES = (
    "acov0", "acov1", "acov2", "acov3", "acov4", "acov5",
    "mean", "mean_minus_median",
    "beta1", "beta2", "beta3", "beta4", "beta5",
    "diff_cubic1", "diff_cubic2", "diff_cubic3",
    "turning_points",
)
RICKER_NAMES = (
    "acov0", "acov1", "acov2", "acov3", "acov4", "acov5",
    "mean", "n_zeros",
    "diff_cubic1", "diff_cubic2", "diff_cubic3",
    "ar_b1", "ar_b2",
)


@dataclass
class SummaryVector:
    values: np.ndarray
    names: tuple[str, ...]
    degenerate: tuple[str, ...] = field(default=())

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1 or self.values.size == 0:
            raise ValueError("summary vector must be a non-empty 1-d array")
        if len(self.names) != self.values.size or len(set(self.names)) != len(self.names):
            raise ValueError("names must be unique and match the number of values")

    def __len__(self):
        return self.values.size

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.names)
        w.writerow([repr(float(v)) for v in self.values])
        return buf.getvalue()


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :]
    if x.ndim != 2:
        raise ValueError("expected a series or a 2-d batch of series")
    return x


# ---------------------------------------------------------------------------
# primitives


def autocovariances(X, max_lag: int) -> np.ndarray:
    """Biased (1/T) autocovariances at lags 0..max_lag for each row."""
    X = _as_batch(X)
    T = X.shape[1]
    if max_lag >= T:
        raise ValueError(f"lag {max_lag} must be smaller than the series length {T}")
    # shifting by the first value first makes constant rows exactly zero
    xs = X - X[:, :1]
    xc = xs - xs.mean(axis=1, keepdims=True)
    out = np.empty((X.shape[0], max_lag + 1))
    for k in range(max_lag + 1):
        out[:, k] = np.sum(xc[:, k:] * xc[:, : T - k], axis=1) / T
    return out


def autocovariance(x, lag: int) -> float:
    x = np.asarray(x, dtype=float)
    if lag < 0 or lag >= x.size:
        raise ValueError(f"lag {lag} must be in [0, {x.size})")
    return float(autocovariances(x, lag)[0, lag])


def turning_points_batch(X) -> np.ndarray:
    """Sign changes of the first differences; flat steps are skipped."""
    X = _as_batch(X)
    if X.shape[1] < 3:
        raise ValueError("need at least 3 points to count turning points")
    sgn = np.sign(np.diff(X, axis=1))
    # carry the last non-zero sign across ties
    idx = np.where(sgn != 0, np.arange(sgn.shape[1]), 0)
    np.maximum.accumulate(idx, axis=1, out=idx)
    filled = np.take_along_axis(sgn, idx, axis=1)
    out = np.sum(filled[:, :-1] * filled[:, 1:] < 0, axis=1).astype(float)
    out[~np.all(np.isfinite(X), axis=1)] = np.nan
    return out


def turning_points(x) -> int:
    return int(turning_points_batch(x)[0])


def lstsq_batch(A: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-norm least squares for stacked systems via SVD.

    ``A`` is ``(n, rows, k)``, ``b`` is ``(n, rows)``. Returns the
    coefficients ``(n, k)`` and a rank-deficiency flag per system. Systems
    containing non-finite entries give NaN coefficients.
    """
    n, _, k = A.shape
    coef = np.full((n, k), np.nan)
    flag = np.zeros(n, dtype=bool)
    ok = np.all(np.isfinite(A), axis=(1, 2)) & np.all(np.isfinite(b), axis=1)
    if not ok.any():
        return coef, flag
    U, s, Vt = np.linalg.svd(A[ok], full_matrices=False)
    cutoff = np.finfo(float).eps * max(A.shape[1:]) * s[:, :1]
    keep = s > cutoff
    inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    utb = np.einsum("nrk,nr->nk", U, b[ok])
    coef[ok] = np.einsum("nkj,nk->nj", Vt, inv * utb)
    flag[ok] = keep.sum(axis=1) < k
    return coef, flag


def poly_autoregression_batch(X) -> tuple[np.ndarray, np.ndarray]:
    """Regress x_{t+1} on (x_t, x_t^2, x_{t-6}, x_{t-6}^2, x_{t-6}^3), no intercept."""
    X = _as_batch(X)
    T = X.shape[1]
    if T < 13:
        raise ValueError("polynomial autoregression needs at least 13 points")
    resp = X[:, 7:]
    x1 = X[:, 6:-1]
    x6 = X[:, :-7]
    A = np.stack([x1, x1 ** 2, x6, x6 ** 2, x6 ** 3], axis=2)
    return lstsq_batch(A, resp)


def poly_autoregression(x) -> tuple[np.ndarray, bool]:
    coef, flag = poly_autoregression_batch(x)
    return coef[0], bool(flag[0])


def rank_grid(m: int) -> np.ndarray:
    """Centred rank positions (i - 0.5)/m - 0.5, i = 1..m."""
    return (np.arange(1, m + 1) - 0.5) / m - 0.5


def ordered_diff_cubic_batch(X) -> tuple[np.ndarray, np.ndarray]:
    """Regress sorted first differences on (u, u^2, u^3), u the rank grid."""
    X = _as_batch(X)
    if X.shape[1] < 5:
        raise ValueError("ordered-difference regression needs at least 5 points")
    D = np.sort(np.diff(X, axis=1), axis=1)
    u = rank_grid(D.shape[1])
    A = np.column_stack([u, u ** 2, u ** 3])
    coef = np.full((X.shape[0], 3), np.nan)
    ok = np.all(np.isfinite(D), axis=1)
    coef[ok] = np.linalg.lstsq(A, D[ok].T, rcond=None)[0].T
    flat = ok & (D[:, -1] == D[:, 0])
    coef[flat] = 0.0
    return coef, flat


def ordered_diff_cubic(x) -> tuple[np.ndarray, bool]:
    coef, flag = ordered_diff_cubic_batch(x)
    return coef[0], bool(flag[0])


def lower_median(X) -> np.ndarray:
    X = _as_batch(X)
    return np.sort(X, axis=1)[:, (X.shape[1] - 1) // 2]


def power_autoregression_batch(X) -> tuple[np.ndarray, np.ndarray]:
    """Regress y_{t+1}^0.3 on (y_t^0.3, y_t^0.6), no intercept."""
    X = _as_batch(X)
    with np.errstate(invalid="ignore"):
        z = np.abs(X) ** 0.3
    A = np.stack([z[:, :-1], z[:, :-1] ** 2], axis=2)
    return lstsq_batch(A, z[:, 1:])


# ---------------------------------------------------------------------------
# statistic sets


def vole_summaries_batch(Y) -> tuple[np.ndarray, np.ndarray]:
    """The 17 vole statistics for each row; returns values and a degeneracy flag."""
    Y = _as_batch(Y)
    if Y.shape[1] < 13:
        raise ValueError("vole summaries need at least 13 observations")
    acov = autocovariances(Y, 5)
    mean = Y.mean(axis=1)
    beta, f1 = poly_autoregression_batch(Y)
    cubic, f2 = ordered_diff_cubic_batch(Y)
    tp = turning_points_batch(Y)
    S = np.column_stack([acov, mean, mean - lower_median(Y), beta, cubic, tp])
    return S, f1 | f2


def vole_summaries(y) -> SummaryVector:
    S, _ = vole_summaries_batch(y)
    _, f1 = poly_autoregression_batch(y)
    _, f2 = ordered_diff_cubic_batch(y)
    flags = tuple(n for n, f in (("poly_autoregression", f1[0]), ("ordered_diff_cubic", f2[0])) if f)
    return SummaryVector(S[0], VOLE_NAMES, flags)


def ricker_summaries_batch(Y) -> tuple[np.ndarray, np.ndarray]:
    """The 13 Ricker statistics for each row; returns values and a degeneracy flag."""
    Y = _as_batch(Y)
    if Y.shape[1] < 10:
        raise ValueError("Ricker summaries need at least 10 observations")
    acov = autocovariances(Y, 5)
    mean = Y.mean(axis=1)
    zeros = np.sum(Y == 0, axis=1).astype(float)
    zeros[~np.all(np.isfinite(Y), axis=1)] = np.nan
    cubic, f1 = ordered_diff_cubic_batch(Y)
    ar, f2 = power_autoregression_batch(Y)
    return np.column_stack([acov, mean, zeros, cubic, ar]), f1 | f2


def ricker_summaries(y) -> SummaryVector:
    S, _ = ricker_summaries_batch(y)
    _, f1 = ordered_diff_cubic_batch(y)
    _, f2 = power_autoregression_batch(y)
    flags = tuple(n for n, f in (("ordered_diff_cubic", f1[0]), ("power_autoregression", f2[0])) if f)
    return SummaryVector(S[0], RICKER_NAMES, flags)


def vole_stats(Y) -> np.ndarray:
    return vole_summaries_batch(Y)[0]


def ricker_stats(Y) -> np.ndarray:
    return ricker_summaries_batch(Y)[0]


def identity_stats(Y) -> np.ndarray:
    return _as_batch(Y)


# ---------------------------------------------------------------------------
# distances


def _values(s):
    return s.values if isinstance(s, SummaryVector) else np.asarray(s, dtype=float)


def mahalanobis_sq(s_obs, s, a) -> np.ndarray | float:
    """(s_obs - s)^T A (s_obs - s); ``s`` may be a single vector or a batch."""
    s_obs = _values(s_obs)
    s_arr = _values(s)
    a = np.asarray(a, dtype=float)
    d = s_obs.shape[-1]
    if s_arr.shape[-1] != d or a.shape != (d, d):
        raise ValueError(f"dimension mismatch: s_obs {s_obs.shape}, s {s_arr.shape}, A {a.shape}")
    diff = s_obs - s_arr
    out = np.einsum("...i,ij,...j->...", diff, a, diff)
    return float(out) if np.ndim(out) == 0 else out


def check_scaling_matrix(a, tol: float = 1e-10) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("scaling matrix must be square")
    if not np.allclose(a, a.T, atol=tol, rtol=0):
        raise ValueError("scaling matrix must be symmetric")
    if np.linalg.eigvalsh((a + a.T) / 2).min() < -tol * max(1.0, np.abs(a).max()):
        raise ValueError("scaling matrix must be positive semi-definite")
    return a
