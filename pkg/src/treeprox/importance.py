"""Permutation-based variable importance on held-out data.

Works with any fitted model exposing ``predict(FeatureTable) -> array``.
For each feature group and each of K replicates, the group's columns are
shuffled by one shared row permutation, predictions are recomputed, and
the percent MSE increase over the unpermuted baseline is reported. A
local variant records the per-observation squared-error increase.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import FeatureTable
from .errors import ConfigurationError, InputDataError, NumericalError


def mse(y: np.ndarray, yhat: np.ndarray) -> float:
    """Mean squared error; errors on length mismatch or empty input."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape or y.ndim != 1:
        raise InputDataError(f"length mismatch: y has shape {y.shape}, yhat {yhat.shape}")
    if y.size == 0:
        raise InputDataError("mse of empty vectors")
    d = y - yhat
    return float(np.mean(d * d))


@dataclass
class ImportanceReport:
    """Global (and optionally local) permutation importance results.

    ``features`` are permutation groups: one-hot indicator blocks collapse
    to their attribute name unless per-indicator mode was requested.
    ``local`` rows follow ``row_ids``; columns follow ``features``.
    """

    features: tuple[str, ...]
    importance_pct: dict[str, float]
    mse_perm: dict[str, float]
    mse_base: float
    k: int
    seed: int
    local: np.ndarray | None = None
    row_ids: np.ndarray | None = None

    def ranked(self) -> list[tuple[str, float]]:
        """Features sorted by descending importance; ties keep column order."""
        order = sorted(
            range(len(self.features)),
            key=lambda i: (-self.importance_pct[self.features[i]], i),
        )
        return [(self.features[i], self.importance_pct[self.features[i]]) for i in order]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "importance_pct", "mse_perm", "mse_base", "k"])
            for name, pct in self.ranked():
                w.writerow(
                    [name, repr(pct), repr(self.mse_perm[name]), repr(self.mse_base), self.k]
                )

    def local_to_csv(self, path: str | Path) -> None:
        if self.local is None:
            raise ConfigurationError("report carries no local matrix; rerun with with_local")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", *self.features])
            for rid, row in zip(self.row_ids, self.local):
                w.writerow([str(rid), *[repr(float(v)) for v in row]])


def feature_groups(table: FeatureTable, per_indicator: bool = False) -> dict[str, list[str]]:
    """Permutation groups in first-appearance column order."""
    groups: dict[str, list[str]] = {}
    for name in table.feature_names:
        key = name if per_indicator else table.group_of(name)
        groups.setdefault(key, []).append(name)
    return groups


def permutation_importance(
    model,
    test: FeatureTable,
    K: int = 3,
    seed: int = 0,
    per_indicator: bool = False,
    with_local: bool = False,
) -> ImportanceReport:
    """Percent MSE increase per feature group when its columns are shuffled.

    Replicate streams are derived from (seed, group index, replicate), so
    results are deterministic and independent of evaluation order. A
    replicate that happens to draw the identity permutation reuses the
    baseline predictions, keeping its MSE exactly equal to the baseline.
    """
    if K < 1:
        raise ConfigurationError(f"K must be >= 1, got {K}")
    if seed < 0:
        raise ConfigurationError(f"seed must be >= 0, got {seed}")
    y = test.require_outcome()
    n = test.n
    base_pred = np.asarray(model.predict(test), dtype=float)
    e0 = (y - base_pred) ** 2
    mse_0 = float(np.mean(e0))

    groups = feature_groups(test, per_indicator)
    names = tuple(groups)
    identity = np.arange(n)

    mse_perm: dict[str, float] = {}
    pct: dict[str, float] = {}
    local = np.zeros((n, len(names))) if with_local else None

    for g_idx, (gname, members) in enumerate(groups.items()):
        mse_ks = np.empty(K)
        local_acc = np.zeros(n) if with_local else None
        for rep in range(K):
            rng = np.random.default_rng(np.random.SeedSequence([seed, g_idx, rep]))
            perm = rng.permutation(n)
            if np.array_equal(perm, identity):
                mse_ks[rep] = mse_0
                continue
            shuffled = test.with_columns({name: test.column(name)[perm] for name in members})
            pred = np.asarray(model.predict(shuffled), dtype=float)
            e_p = (y - pred) ** 2
            mse_ks[rep] = float(np.mean(e_p))
            if with_local:
                local_acc += e_p - e0
        mse_p = float(np.mean(mse_ks))
        mse_perm[gname] = mse_p
        if mse_p == mse_0:
            pct[gname] = 0.0
        elif mse_0 == 0.0:
            raise NumericalError("baseline MSE is zero; importance percentages are undefined")
        else:
            pct[gname] = (mse_p / mse_0 - 1.0) * 100.0
        if with_local:
            local[:, g_idx] = local_acc / K

    return ImportanceReport(
        features=names,
        importance_pct=pct,
        mse_perm=mse_perm,
        mse_base=mse_0,
        k=K,
        seed=seed,
        local=local,
        row_ids=test.ids.copy() if with_local else None,
    )


def local_importance(
    model,
    test: FeatureTable,
    K: int = 3,
    seed: int = 0,
    per_indicator: bool = False,
) -> ImportanceReport:
    """Permutation importance with the per-observation SE-increase matrix."""
    return permutation_importance(model, test, K, seed, per_indicator, with_local=True)
