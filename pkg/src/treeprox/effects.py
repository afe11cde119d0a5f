"""Marginal-effect curves: sweep one feature over a grid, hold the rest.

A profile is a single complete feature row. The swept feature runs over
the grid while every other column stays fixed at the profile's value.
For a posterior model the curve carries uncertainty bands, and effects
are paired differences against the baseline grid point computed inside
each draw, never across draws; that is what makes the effect band a
credible interval for the change itself. Point models (OLS, tree,
forest) produce the point difference curve with no bands.

The baseline must be given explicitly; there is no default.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bart import BartFit, predict_posterior
from .dataset import FeatureTable, _format_value
from .errors import ConfigurationError, InputDataError
from .importance import ImportanceReport

Profile = dict[str, float]

BASELINE_MATCH_TOL = 1e-9


@dataclass(frozen=True)
class EffectCurve:
    """Per-grid-point predictions and effects relative to the baseline.

    Band arrays are None for models without posterior draws.
    """

    feature: str
    baseline: float
    grid: np.ndarray
    pred_mean: np.ndarray
    pred_lo: np.ndarray | None
    pred_hi: np.ndarray | None
    effect_mean: np.ndarray
    effect_lo: np.ndarray | None
    effect_hi: np.ndarray | None

    @property
    def has_bands(self) -> bool:
        return self.pred_lo is not None

    def to_csv(self, path: str | Path) -> None:
        """Write `grid,pred_mean,pred_lo,pred_hi,effect_mean,effect_lo,effect_hi`.

        Band cells are left empty for point-only curves."""
        def cell(arr: np.ndarray | None, i: int) -> str:
            return "" if arr is None else _format_value(arr[i])

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["grid", "pred_mean", "pred_lo", "pred_hi",
                        "effect_mean", "effect_lo", "effect_hi"])
            for i in range(self.grid.shape[0]):
                w.writerow([
                    _format_value(self.grid[i]),
                    _format_value(self.pred_mean[i]),
                    cell(self.pred_lo, i),
                    cell(self.pred_hi, i),
                    _format_value(self.effect_mean[i]),
                    cell(self.effect_lo, i),
                    cell(self.effect_hi, i),
                ])


def grid_range(start: float, stop: float, step: float) -> np.ndarray:
    """Inclusive evenly spaced grid; each point rounded to 12 decimals so
    0.1-step grids land on exact tenths."""
    if not (np.isfinite(start) and np.isfinite(stop) and np.isfinite(step)):
        raise ConfigurationError("grid endpoints and step must be finite")
    if step <= 0.0:
        raise ConfigurationError(f"grid step must be > 0, got {step}")
    if stop < start:
        raise ConfigurationError(f"grid stop {stop} is below start {start}")
    count = int(np.floor((stop - start) / step + 1e-9)) + 1
    return np.array([round(start + i * step, 12) for i in range(count)])


def default_grid() -> np.ndarray:
    """Distance sweep 0 to 1 thousand km in 0.1 steps (11 points)."""
    return grid_range(0.0, 1.0, 0.1)


def _baseline_index(grid: np.ndarray, baseline: float) -> int:
    hits = np.nonzero(np.abs(grid - baseline) <= BASELINE_MATCH_TOL)[0]
    if hits.size == 0:
        raise ConfigurationError(
            f"baseline {baseline} is not on the grid; pick one of its points")
    return int(hits[0])


def _profile_table(profile: Profile, feature: str, grid: np.ndarray) -> FeatureTable:
    if feature not in profile:
        raise ConfigurationError(f"profile has no column {feature!r} to sweep")
    for name, value in profile.items():
        if not np.isfinite(value):
            raise InputDataError(f"profile column {name!r} is not finite: {value}")
    n = grid.shape[0]
    cols = {name: np.full(n, float(value)) for name, value in profile.items()}
    cols[feature] = grid.astype(np.float64)
    return FeatureTable(np.arange(n), cols, None, "outcome")


def sweep(model, profile: Profile, feature: str,
          grid: np.ndarray | None = None, *, baseline: float) -> EffectCurve:
    """Effect curve for `feature` swept over `grid`, rest fixed at `profile`.

    `model` is either a posterior fit (BartFit, or anything exposing
    predict_draws(table) -> (draws, rows)) or a point predictor with
    predict(table). Effects at each grid point are differences against
    the baseline point, taken within each posterior draw.
    """
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.shape[0] == 0:
        raise ConfigurationError("grid must be a nonempty 1-d array of values")
    if not np.all(np.isfinite(grid)):
        raise ConfigurationError("grid values must be finite")
    b = _baseline_index(grid, baseline)
    table = _profile_table(profile, feature, grid)

    if isinstance(model, BartFit):
        draws = predict_posterior(model, table).draws
    elif hasattr(model, "predict_draws"):
        draws = np.asarray(model.predict_draws(table), dtype=np.float64)
    else:
        point = np.asarray(model.predict(table), dtype=np.float64)
        return EffectCurve(
            feature=feature, baseline=float(grid[b]), grid=grid,
            pred_mean=point, pred_lo=None, pred_hi=None,
            effect_mean=point - point[b], effect_lo=None, effect_hi=None)

    if draws.ndim != 2 or draws.shape[1] != grid.shape[0]:
        raise InputDataError(
            f"posterior draw matrix has shape {draws.shape}; expected (draws, {grid.shape[0]})")
    effects = draws - draws[:, b:b + 1]
    pred_lo, pred_hi = np.quantile(draws, [0.025, 0.975], axis=0)
    eff_lo, eff_hi = np.quantile(effects, [0.025, 0.975], axis=0)
    return EffectCurve(
        feature=feature, baseline=float(grid[b]), grid=grid,
        pred_mean=draws.mean(axis=0), pred_lo=pred_lo, pred_hi=pred_hi,
        effect_mean=effects.mean(axis=0), effect_lo=eff_lo, effect_hi=eff_hi)


def apply_overrides(profile: Profile, overrides: dict[str, str | float]) -> Profile:
    """Copy of `profile` with attribute overrides applied.

    A string value names a categorical level: every `attr=...` indicator
    in the block is zeroed and the named level's indicator set to 1; a
    level with no indicator column is the reference level, leaving the
    whole block at 0. A numeric value sets the column directly.
    """
    out = dict(profile)
    for key, value in overrides.items():
        if isinstance(value, str):
            block = [c for c in out if c.startswith(key + "=")]
            if not block:
                raise ConfigurationError(f"profile has no indicator block for {key!r}")
            for c in block:
                out[c] = 0.0
            target = f"{key}={value}"
            if target in out:
                out[target] = 1.0
        else:
            if key not in out:
                raise ConfigurationError(f"profile has no column {key!r} to override")
            out[key] = float(value)
    return out


def pick_profile(report: ImportanceReport, table: FeatureTable, feature: str,
                 overrides: dict[str, str | float] | None = None,
                 ) -> tuple[Profile, Profile]:
    """Profile pair for the sweep: the test row where `feature` matters most
    locally, and a copy with the attribute overrides applied.

    With an all-zero local column the choice falls back to the smallest
    row id so it stays deterministic."""
    if report.local is None:
        raise ConfigurationError(
            "importance report carries no local matrix; rerun with with_local")
    if feature not in report.features:
        raise ConfigurationError(
            f"feature {feature!r} is not in the local importance matrix "
            f"(has {', '.join(report.features)})")
    col = report.local[:, report.features.index(feature)]
    if np.any(col != 0.0):
        pos = int(np.argmax(col))
    else:
        pos = int(np.argmin(report.row_ids))
    row_id = report.row_ids[pos]
    where = np.nonzero(table.ids == row_id)[0]
    if where.size == 0:
        raise InputDataError(f"row id {row_id!r} from the report is not in the table")
    at = int(where[0])
    base: Profile = {name: float(table.column(name)[at]) for name in table.feature_names}
    other = apply_overrides(base, overrides) if overrides else dict(base)
    return base, other
