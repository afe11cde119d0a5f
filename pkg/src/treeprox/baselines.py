"""Linear baselines: OLS with classical standard errors, L1-penalized
regression with a cross-validated penalty path, and hand-coded proximity
threshold dummies.

The L1 solver is cyclical coordinate descent on standardized columns
(columns scaled to unit variance under the 1/n convention), minimizing
(1/2n)·||y - Xb||^2 + lambda·||b||_1. Coefficients are reported on the
original scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from numba import njit

from .dataset import FeatureTable, kfold_indices
from .errors import ConfigurationError, InputDataError, NumericalError

INTERCEPT = "(intercept)"


@dataclass
class LinearModel:
    """A fitted linear predictor on the original column scale."""

    intercept: float
    coefficients: dict[str, float]
    lam: float = 0.0
    standardization: dict[str, tuple[float, float]] | None = None
    std_errors: dict[str, float] | None = None
    intercept_se: float | None = None
    adj_r2: float | None = None
    cv_table: list[tuple[float, float]] | None = None

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(self.coefficients)

    def predict(self, table: FeatureTable) -> np.ndarray:
        out = np.full(table.n, self.intercept)
        for name, coef in self.coefficients.items():
            if coef != 0.0:
                out += coef * table.column(name)
            else:
                table.column(name)  # still require the column to exist
        return out

    def to_json(self) -> str:
        payload = {
            "model": "linear",
            "intercept": self.intercept,
            "coefficients": self.coefficients,
            "lambda": self.lam,
            "standardization": (
                None
                if self.standardization is None
                else {k: list(v) for k, v in self.standardization.items()}
            ),
            "std_errors": self.std_errors,
            "intercept_se": self.intercept_se,
            "adj_r2": self.adj_r2,
        }
        return json.dumps(payload, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "LinearModel":
        d = json.loads(text)
        std = d.get("standardization")
        return cls(
            intercept=float(d["intercept"]),
            coefficients={k: float(v) for k, v in d["coefficients"].items()},
            lam=float(d.get("lambda", 0.0)),
            standardization=None if std is None else {k: (v[0], v[1]) for k, v in std.items()},
            std_errors=d.get("std_errors"),
            intercept_se=d.get("intercept_se"),
            adj_r2=d.get("adj_r2"),
        )


def fit_ols(train: FeatureTable) -> LinearModel:
    """Least squares with classical standard errors and adjusted R².

    The design must have more rows than columns and be full rank after
    one-hot reference dropping; a deficient design raises an error naming
    the dependent column set (found by pivoted QR).
    """
    y = train.require_outcome()
    names = train.feature_names
    n, p = train.n, len(names)
    if n <= p + 1:
        raise ConfigurationError(f"need n > p + 1 for OLS, got n={n}, p={p}")
    X = np.column_stack([np.ones(n), train.matrix()])
    all_names = (INTERCEPT, *names)

    r_diag = scipy.linalg.qr(X, mode="r", pivoting=True)
    r_mat, pivots = r_diag
    diag = np.abs(np.diag(r_mat))
    tol = diag.max() * max(X.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    if rank < p + 1:
        dependent = sorted(all_names[j] for j in pivots[rank:])
        raise InputDataError(f"design is rank deficient; dependent columns: {dependent}")

    beta, _, _, _ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    rss = float(resid @ resid)
    dof = n - p - 1
    sigma2 = rss / dof
    xtx_inv = np.linalg.inv(X.T @ X)
    se = np.sqrt(np.maximum(sigma2 * np.diag(xtx_inv), 0.0))
    tss = float(np.sum((y - y.mean()) ** 2))
    adj_r2 = 1.0 - (rss / dof) / (tss / (n - 1)) if tss > 0 else 1.0

    return LinearModel(
        intercept=float(beta[0]),
        coefficients={name: float(b) for name, b in zip(names, beta[1:])},
        lam=0.0,
        std_errors={name: float(s) for name, s in zip(names, se[1:])},
        intercept_se=float(se[0]),
        adj_r2=adj_r2,
    )


def _soft(rho: float, lam: float) -> float:
    if rho > lam:
        return rho - lam
    if rho < -lam:
        return rho + lam
    return 0.0


@njit(cache=True)
def _cd_solve(
    G: np.ndarray,
    Xy: np.ndarray,
    lam: float,
    beta: np.ndarray,
    cols: np.ndarray,
    n: int,
    tol: float,
    max_passes: int,
) -> int:
    """Cyclical coordinate descent in place; returns passes used.

    Works off the Gram matrix G = Xs'Xs and Xy = Xs'y, so one update
    costs O(p) regardless of n. Columns have unit variance under the
    1/n convention, making each update a pure soft-threshold.
    """
    p = beta.shape[0]
    gb = np.zeros(p)
    for k in range(cols.shape[0]):
        j = cols[k]
        if beta[j] != 0.0:
            for q in range(p):
                gb[q] += beta[j] * G[q, j]
    passes = 0
    while passes < max_passes:
        delta = 0.0
        for k in range(cols.shape[0]):
            j = cols[k]
            rho = beta[j] + (Xy[j] - gb[j]) / n
            if rho > lam:
                new = rho - lam
            elif rho < -lam:
                new = rho + lam
            else:
                new = 0.0
            d = new - beta[j]
            if d != 0.0:
                beta[j] = new
                for q in range(p):
                    gb[q] += d * G[q, j]
                if abs(d) > delta:
                    delta = abs(d)
        passes += 1
        if delta < tol:
            return passes
    return -1


def _standardize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    mu = X.mean(axis=0)
    Xc = X - mu
    sd = np.sqrt(np.mean(Xc * Xc, axis=0))
    keep = sd > 0.0
    Xs = np.zeros_like(Xc)
    Xs[:, keep] = Xc[:, keep] / sd[keep]
    return Xs, mu, sd, keep


def default_lambda_path(lambda_max: float, count: int = 100, min_ratio: float = 1e-4) -> np.ndarray:
    return lambda_max * np.logspace(0.0, math.log10(min_ratio), count)


def lasso_path(
    train: FeatureTable,
    lambdas: np.ndarray | None = None,
    tol: float = 1e-9,
    max_passes: int = 100_000,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Solve the full penalty path with warm starts.

    Returns (lambdas descending, coefficient matrix L x p on the original
    scale, intercepts length L). Constant columns are pinned at zero.
    """
    y = train.require_outcome()
    X = train.matrix()
    n, p = X.shape
    Xs, mu, sd, keep = _standardize(X)
    yc = y - y.mean()
    cols = np.flatnonzero(keep)

    if lambdas is None:
        lam_max = float(np.max(np.abs(Xs.T @ yc)) / n) if cols.size else 0.0
        if lam_max <= 0.0:
            lambdas = np.array([0.0])
        else:
            lambdas = default_lambda_path(lam_max)
    else:
        lambdas = np.sort(np.asarray(lambdas, dtype=float))[::-1]
        if np.any(lambdas < 0):
            raise ConfigurationError("lambdas must be >= 0")

    betas_std = np.zeros((len(lambdas), p))
    beta = np.zeros(p)
    G = Xs.T @ Xs
    Xy = Xs.T @ yc
    for li, lam in enumerate(lambdas):
        used = _cd_solve(G, Xy, float(lam), beta, cols, n, tol, max_passes)
        if used < 0:
            raise NumericalError(
                f"coordinate descent did not converge at lambda index {li} (lambda={lam:.6g})"
            )
        betas_std[li] = beta

    coefs = np.zeros_like(betas_std)
    coefs[:, keep] = betas_std[:, keep] / sd[keep]
    intercepts = y.mean() - coefs @ mu
    return np.asarray(lambdas, dtype=float), coefs, intercepts


def fit_lasso(
    train: FeatureTable,
    lambdas: np.ndarray | None = None,
    folds: int = 10,
    seed: int = 0,
    tol: float = 1e-9,
    max_passes: int = 100_000,
) -> LinearModel:
    """L1 path fit with the penalty chosen at minimum mean CV MSE.

    The candidate path defaults to 100 log-spaced values from the smallest
    penalty that zeroes every slope down to 1e-4 of it. Folds are a pure
    function of (row ids, seed). No 1-SE rule.
    """
    y = train.require_outcome()
    X = train.matrix()
    names = train.feature_names
    n = train.n
    if n < folds:
        raise ConfigurationError(f"n={n} is smaller than folds={folds}")

    Xs, mu, sd, keep = _standardize(X)
    cols = np.flatnonzero(keep)
    if lambdas is None:
        yc = y - y.mean()
        lam_max = float(np.max(np.abs(Xs.T @ yc)) / n) if cols.size else 0.0
        if lam_max <= 0.0:
            # nothing varies: intercept-only model for any penalty
            return LinearModel(
                intercept=float(y.mean()),
                coefficients={name: 0.0 for name in names},
                lam=0.0,
                standardization={name: (float(m), float(s)) for name, m, s in zip(names, mu, sd)},
                cv_table=[],
            )
        lams = default_lambda_path(lam_max)
    else:
        lams = np.sort(np.asarray(lambdas, dtype=float))[::-1]
        if np.any(lams < 0):
            raise ConfigurationError("lambdas must be >= 0")

    fold_idx = kfold_indices(train.ids, folds, seed)
    all_rows = np.arange(n)
    sse = np.zeros(len(lams))
    for held in fold_idx:
        rest = np.setdiff1d(all_rows, held, assume_unique=True)
        _, coefs, intercepts = lasso_path(train.take(rest), lams, tol, max_passes)
        preds = intercepts[:, None] + coefs @ X[held].T
        sse += np.sum((y[held][None, :] - preds) ** 2, axis=1)
    cv_mse = sse / n
    best = int(np.argmin(cv_mse))

    _, coefs, intercepts = lasso_path(train, lams, tol, max_passes)
    return LinearModel(
        intercept=float(intercepts[best]),
        coefficients={name: float(c) for name, c in zip(names, coefs[best])},
        lam=float(lams[best]),
        standardization={name: (float(m), float(s)) for name, m, s in zip(names, mu, sd)},
        cv_table=list(zip(lams.tolist(), cv_mse.tolist())),
    )


def threshold_dummies(
    table: FeatureTable,
    distance_column: str = "dist_near_1",
    cutoff: float = 0.25,
    size_column: str = "size_near_1",
    size_cutoff: float = 3.0,
) -> dict[str, np.ndarray]:
    """Hand-coded proximity indicators: near a small event / near a large one.

    ``near_small`` = (distance < cutoff) and (size <= size_cutoff);
    ``near_large`` = (distance < cutoff) and (size > size_cutoff). Rows at
    or beyond the cutoff get zeros in both (far is the reference).
    """
    if not (math.isfinite(cutoff) and math.isfinite(size_cutoff)):
        raise ConfigurationError("threshold cutoffs must be finite")
    dist = table.column(distance_column)
    size = table.column(size_column)
    near = dist < cutoff
    return {
        "near_small": (near & (size <= size_cutoff)).astype(np.float64),
        "near_large": (near & (size > size_cutoff)).astype(np.float64),
    }
