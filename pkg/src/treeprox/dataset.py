"""CSV ingestion, categorical encoding, table assembly, and train/test splits.

The core structure is :class:`FeatureTable`: an immutable-by-convention
columnar table of float64 feature columns plus row ids and an optional
outcome column. CSV round-trips are bit-exact for finite doubles (values
are printed with shortest round-trip formatting).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, InputDataError
from .geo import Event, GeoPoint

# One-hot indicator columns are named "<attribute>=<level>"; the prefix
# before "=" identifies the group for joint permutation in importance.
ONE_HOT_SEP = "="


def _format_value(x: float) -> str:
    return repr(float(x))


def _parse_float(text: str, *, row: int, column: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise InputDataError(f"row {row}: column {column!r} has non-numeric value {text!r}") from None
    if not math.isfinite(v):
        raise InputDataError(f"row {row}: column {column!r} has non-finite value {text!r}")
    return v


class FeatureTable:
    """Named float64 columns with row ids and an optional outcome column."""

    def __init__(
        self,
        ids: Sequence,
        columns: Mapping[str, np.ndarray],
        outcome: np.ndarray | None = None,
        outcome_name: str = "outcome",
    ):
        ids_arr = np.asarray(ids)
        if ids_arr.ndim != 1:
            raise InputDataError("row ids must be one-dimensional")
        n = len(ids_arr)
        if len(np.unique(ids_arr)) != n:
            raise InputDataError("row ids must be unique")
        cols: dict[str, np.ndarray] = {}
        for name, values in columns.items():
            if not name:
                raise InputDataError("empty column name")
            arr = np.asarray(values, dtype=np.float64)
            if arr.shape != (n,):
                raise InputDataError(f"column {name!r} has length {arr.shape}, expected {n}")
            if not np.all(np.isfinite(arr)):
                raise InputDataError(f"column {name!r} contains missing or non-finite values")
            cols[name] = arr
        if outcome is not None:
            outcome = np.asarray(outcome, dtype=np.float64)
            if outcome.shape != (n,):
                raise InputDataError(f"outcome has length {outcome.shape}, expected {n}")
            if not np.all(np.isfinite(outcome)):
                raise InputDataError("outcome contains missing or non-finite values")
            if outcome_name in cols:
                raise InputDataError(f"outcome name {outcome_name!r} collides with a feature column")
        self.ids = ids_arr
        self._columns = cols
        self.outcome = outcome
        self.outcome_name = outcome_name

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(self._columns)

    def column(self, name: str) -> np.ndarray:
        if name not in self._columns:
            raise InputDataError(f"table has no column {name!r}")
        return self._columns[name]

    def has_column(self, name: str) -> bool:
        return name in self._columns

    def matrix(self, names: Sequence[str] | None = None) -> np.ndarray:
        """Feature matrix with columns stacked in the given (or declared) order."""
        use = self.feature_names if names is None else names
        missing = [c for c in use if c not in self._columns]
        if missing:
            raise InputDataError(f"table is missing columns {missing}")
        if not use:
            return np.empty((self.n, 0))
        return np.column_stack([self._columns[c] for c in use])

    def columns_dict(self) -> dict[str, np.ndarray]:
        return dict(self._columns)

    def take(self, indices: np.ndarray) -> "FeatureTable":
        idx = np.asarray(indices)
        return FeatureTable(
            self.ids[idx],
            {name: col[idx] for name, col in self._columns.items()},
            None if self.outcome is None else self.outcome[idx],
            self.outcome_name,
        )

    def select(self, names: Sequence[str]) -> "FeatureTable":
        return FeatureTable(
            self.ids,
            {name: self.column(name) for name in names},
            self.outcome,
            self.outcome_name,
        )

    def with_columns(self, new: Mapping[str, np.ndarray]) -> "FeatureTable":
        """Copy of the table with columns added or replaced."""
        cols = dict(self._columns)
        cols.update(new)
        return FeatureTable(self.ids, cols, self.outcome, self.outcome_name)

    def without_outcome(self) -> "FeatureTable":
        return FeatureTable(self.ids, self._columns, None, self.outcome_name)

    def require_outcome(self) -> np.ndarray:
        if self.outcome is None:
            raise InputDataError(f"table has no outcome column {self.outcome_name!r}")
        return self.outcome

    def group_of(self, name: str) -> str:
        """Permutation group of a column: the attribute prefix for one-hot indicators."""
        return name.split(ONE_HOT_SEP, 1)[0] if ONE_HOT_SEP in name else name

    def to_csv(self, path: str | Path) -> None:
        header = ["id", *self.feature_names]
        if self.outcome is not None:
            header.append(self.outcome_name)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            cols = [self._columns[c] for c in self.feature_names]
            for i in range(self.n):
                row = [str(self.ids[i])]
                row.extend(_format_value(c[i]) for c in cols)
                if self.outcome is not None:
                    row.append(_format_value(self.outcome[i]))
                w.writerow(row)

    @classmethod
    def from_csv(cls, path: str | Path, outcome: str | None = None) -> "FeatureTable":
        """Load a table written by :meth:`to_csv` (or any all-numeric CSV with an id column)."""
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise InputDataError(f"{path}: empty file") from None
            if not header or header[0] != "id":
                raise InputDataError(f"{path}: first column must be 'id', got {header[:1]}")
            names = header[1:]
            if outcome is not None and outcome not in names:
                raise InputDataError(f"{path}: no outcome column {outcome!r}")
            raw_ids: list[str] = []
            data: list[list[float]] = [[] for _ in names]
            for rownum, row in enumerate(reader, start=2):
                if len(row) != len(header):
                    raise InputDataError(f"{path}: row {rownum} has {len(row)} fields, expected {len(header)}")
                raw_ids.append(row[0])
                for j, text in enumerate(row[1:]):
                    data[j].append(_parse_float(text, row=rownum, column=names[j]))
        ids = _coerce_ids(raw_ids)
        cols = {name: np.array(vals) for name, vals in zip(names, data)}
        y = cols.pop(outcome) if outcome is not None else None
        return cls(ids, cols, y, outcome if outcome is not None else "outcome")


def _coerce_ids(raw: list[str]) -> np.ndarray:
    try:
        return np.array([int(r) for r in raw], dtype=np.int64)
    except ValueError:
        return np.array(raw, dtype=object)


def split(
    table: FeatureTable,
    *,
    n_train: int | None = None,
    train_fraction: float | None = None,
    seed: int = 0,
) -> tuple[FeatureTable, FeatureTable]:
    """Deterministic disjoint train/test partition.

    The assignment is a pure function of (row ids, seed): rows are taken in
    ascending-id order, shuffled by the seeded generator, and re-sorted by
    id within each part, so input row order never matters.
    """
    if (n_train is None) == (train_fraction is None):
        raise ConfigurationError("specify exactly one of n_train / train_fraction")
    n = table.n
    if train_fraction is not None:
        if not 0.0 < train_fraction < 1.0:
            raise ConfigurationError(f"train_fraction must be in (0, 1), got {train_fraction}")
        n_train = int(train_fraction * n)
    assert n_train is not None
    if not 0 < n_train < n:
        raise ConfigurationError(f"n_train={n_train} must be strictly between 0 and n={n}")
    order = np.argsort(table.ids, kind="stable")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    perm = order[rng.permutation(n)]
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return table.take(train_idx), table.take(test_idx)


def kfold_indices(ids: np.ndarray, folds: int, seed: int) -> list[np.ndarray]:
    """Deterministic k-fold assignment; a pure function of (row ids, seed)."""
    n = len(ids)
    if folds < 2:
        raise ConfigurationError(f"folds must be >= 2, got {folds}")
    if n < folds:
        raise ConfigurationError(f"n={n} is smaller than folds={folds}")
    order = np.argsort(ids, kind="stable")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    perm = order[rng.permutation(n)]
    return [np.sort(part) for part in np.array_split(perm, folds)]


@dataclass(frozen=True)
class CategoricalSpec:
    """Declared level set for one categorical attribute; first level is the reference."""

    name: str
    levels: tuple[str, ...]

    def __post_init__(self):
        if len(self.levels) < 2:
            raise ConfigurationError(f"categorical {self.name!r} needs at least 2 levels")
        if len(set(self.levels)) != len(self.levels):
            raise ConfigurationError(f"categorical {self.name!r} has duplicate levels")

    @property
    def indicator_columns(self) -> tuple[str, ...]:
        return tuple(f"{self.name}{ONE_HOT_SEP}{lvl}" for lvl in self.levels[1:])

    def encode(self, values: Sequence[str]) -> dict[str, np.ndarray]:
        """One-hot columns for the non-reference levels; errors on unseen levels."""
        vals = np.asarray(values, dtype=object)
        known = set(self.levels)
        for v in vals:
            if v not in known:
                raise InputDataError(f"column {self.name!r}: unseen level {v!r}")
        return {
            f"{self.name}{ONE_HOT_SEP}{lvl}": (vals == lvl).astype(np.float64)
            for lvl in self.levels[1:]
        }


@dataclass
class Observations:
    """Pre-encoding observation set: locations plus raw attribute columns."""

    ids: np.ndarray
    points: list[GeoPoint]
    numeric: dict[str, np.ndarray] = field(default_factory=dict)
    categorical: dict[str, np.ndarray] = field(default_factory=dict)
    outcome: np.ndarray | None = None
    outcome_name: str = "outcome"

    @property
    def n(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class ObservationSchema:
    """Column declaration for an observations CSV."""

    id_column: str = "id"
    lat_column: str = "lat"
    lon_column: str = "lon"
    zip_column: str | None = None
    numeric: tuple[str, ...] = ()
    categorical: tuple[CategoricalSpec, ...] = ()
    outcome: str | None = None
    impute: bool = False


def load_gazetteer(path: str | Path) -> dict[str, GeoPoint]:
    """Load a `zip,lat,lon` CSV; zips are matched as zero-padded 5-char strings."""
    out: dict[str, GeoPoint] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"zip", "lat", "lon"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise InputDataError(f"{path}: gazetteer must have columns zip,lat,lon")
        for rownum, row in enumerate(reader, start=2):
            z = row["zip"].strip().zfill(5)
            if z in out:
                raise InputDataError(f"{path}: duplicate zip {z!r} at row {rownum}")
            lat = _parse_float(row["lat"], row=rownum, column="lat")
            lon = _parse_float(row["lon"], row=rownum, column="lon")
            out[z] = GeoPoint(lat, lon)
    if not out:
        raise InputDataError(f"{path}: gazetteer is empty")
    return out


def load_events(path: str | Path) -> list[Event]:
    """Load an `id,lat,lon,time,size[,flags...]` CSV into an event catalog."""
    events: list[Event] = []
    seen: set[int] = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = ["id", "lat", "lon", "time", "size"]
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in required):
            raise InputDataError(f"{path}: events file must have columns {','.join(required)}")
        flag_names = [c for c in reader.fieldnames if c not in required]
        for rownum, row in enumerate(reader, start=2):
            try:
                eid = int(row["id"])
            except ValueError:
                raise InputDataError(f"{path}: row {rownum}: event id {row['id']!r} is not an integer") from None
            if eid in seen:
                raise InputDataError(f"{path}: duplicate event id {eid} at row {rownum}")
            seen.add(eid)
            point = GeoPoint(
                _parse_float(row["lat"], row=rownum, column="lat"),
                _parse_float(row["lon"], row=rownum, column="lon"),
            )
            flags = {
                name: _parse_float(row[name], row=rownum, column=name) for name in flag_names
            }
            events.append(
                Event(
                    id=eid,
                    location=point,
                    time=_parse_float(row["time"], row=rownum, column="time"),
                    size=_parse_float(row["size"], row=rownum, column="size"),
                    flags=flags,
                )
            )
    if not events:
        raise InputDataError(f"{path}: events file is empty")
    return events


def load_observations(
    path: str | Path,
    schema: ObservationSchema,
    gazetteer: Mapping[str, GeoPoint] | None = None,
) -> Observations:
    """Load an observations CSV, resolving zips through the gazetteer when needed.

    Missing values (empty cells) are rejected unless ``schema.impute`` is
    set, in which case numeric columns fall back to the column median and
    categoricals to the modal level (ties broken by declared level order).
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise InputDataError(f"{path}: empty file")
        fields = set(reader.fieldnames)
        needed = [schema.id_column, *schema.numeric] + [c.name for c in schema.categorical]
        if schema.outcome is not None:
            needed.append(schema.outcome)
        missing = [c for c in needed if c not in fields]
        if missing:
            raise InputDataError(f"{path}: missing required columns {missing}")
        has_coords = schema.lat_column in fields and schema.lon_column in fields
        has_zip = schema.zip_column is not None and schema.zip_column in fields
        if not has_coords and not has_zip:
            raise InputDataError(f"{path}: need {schema.lat_column}/{schema.lon_column} or a zip column")
        if has_zip and gazetteer is None and not has_coords:
            raise ConfigurationError("observations use zip locations but no gazetteer was supplied")
        rows = list(reader)

    n = len(rows)
    if n == 0:
        raise InputDataError(f"{path}: no data rows")

    raw_ids = [r[schema.id_column] for r in rows]
    points: list[GeoPoint] = []
    unknown_zips: list[str] = []
    for i, r in enumerate(rows):
        rownum = i + 2
        lat_text = r.get(schema.lat_column, "") or ""
        lon_text = r.get(schema.lon_column, "") or ""
        if lat_text.strip() and lon_text.strip():
            points.append(
                GeoPoint(
                    _parse_float(lat_text, row=rownum, column=schema.lat_column),
                    _parse_float(lon_text, row=rownum, column=schema.lon_column),
                )
            )
        elif has_zip:
            if gazetteer is None:
                raise ConfigurationError("observations use zip locations but no gazetteer was supplied")
            z = (r.get(schema.zip_column, "") or "").strip().zfill(5)
            if z in gazetteer:
                points.append(gazetteer[z])
            else:
                unknown_zips.append(f"zip {z!r} at row {rownum}")
                points.append(GeoPoint(0.0, 0.0))  # placeholder, never survives the error below
        else:
            raise InputDataError(f"{path}: row {rownum}: missing coordinates")
    if unknown_zips:
        shown = "; ".join(unknown_zips[:5])
        more = "" if len(unknown_zips) <= 5 else f" (and {len(unknown_zips) - 5} more)"
        raise InputDataError(f"{path}: unknown zips: {shown}{more}")

    def numeric_column(name: str) -> np.ndarray:
        vals = np.full(n, np.nan)
        holes = []
        for i, r in enumerate(rows):
            text = (r.get(name, "") or "").strip()
            if not text:
                holes.append(i)
            else:
                vals[i] = _parse_float(text, row=i + 2, column=name)
        if holes:
            if not schema.impute or len(holes) == n:
                raise InputDataError(f"{path}: column {name!r} missing at row {holes[0] + 2}")
            vals[holes] = float(np.median(vals[~np.isnan(vals)]))
        return vals

    numeric = {name: numeric_column(name) for name in schema.numeric}

    categorical: dict[str, np.ndarray] = {}
    for spec in schema.categorical:
        vals = [(r.get(spec.name, "") or "").strip() for r in rows]
        holes = [i for i, v in enumerate(vals) if not v]
        if holes:
            if not schema.impute:
                raise InputDataError(f"{path}: column {spec.name!r} missing at row {holes[0] + 2}")
            filled = [v for v in vals if v]
            counts = {lvl: filled.count(lvl) for lvl in spec.levels}
            mode = max(spec.levels, key=lambda lvl: counts[lvl])  # declared order breaks ties
            for i in holes:
                vals[i] = mode
        categorical[spec.name] = np.array(vals, dtype=object)

    outcome = numeric_column(schema.outcome) if schema.outcome is not None else None
    return Observations(
        ids=_coerce_ids(raw_ids),
        points=points,
        numeric=numeric,
        categorical=categorical,
        outcome=outcome,
        outcome_name=schema.outcome or "outcome",
    )


def assemble_table(
    obs: Observations,
    schema: ObservationSchema,
    extra: Mapping[str, np.ndarray] | None = None,
) -> FeatureTable:
    """Build the modeling table: numeric attributes, one-hot blocks, then extras."""
    cols: dict[str, np.ndarray] = {}
    for name in schema.numeric:
        cols[name] = obs.numeric[name]
    for spec in schema.categorical:
        cols.update(spec.encode(obs.categorical[spec.name]))
    if extra:
        for name, values in extra.items():
            if name in cols:
                raise InputDataError(f"extra column {name!r} collides with an attribute column")
            cols[name] = np.asarray(values, dtype=np.float64)
    return FeatureTable(obs.ids, cols, obs.outcome, obs.outcome_name)
