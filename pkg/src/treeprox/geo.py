"""Great-circle geometry and event-proximity feature construction.

Distances use the haversine formula on a sphere with the IUGG mean Earth
radius. Feature columns are emitted in a fixed, documented order so that
downstream tables are reproducible byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, InputDataError

EARTH_RADIUS_KM = 6371.0088  # IUGG mean radius

DISTANCE_SCALES = ("km", "thousand-km")


@dataclass(frozen=True)
class GeoPoint:
    """A point on the sphere, normalized to lat [-90, 90], lon (-180, 180]."""

    lat: float
    lon: float

    def __post_init__(self):
        lat = float(self.lat)
        lon = float(self.lon)
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise InputDataError(f"non-finite coordinates ({self.lat!r}, {self.lon!r})")
        if not -90.0 <= lat <= 90.0:
            raise InputDataError(f"latitude {lat!r} outside [-90, 90]")
        # in-range longitudes pass through bitwise untouched; only wrap
        # out-of-range ones (modulo would perturb values like -72.6)
        if not -180.0 < lon <= 180.0:
            lon = lon % 360.0  # [0, 360); maps -180 and 180 both to 180
            if lon > 180.0:
                lon -= 360.0
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)


@dataclass(frozen=True)
class Event:
    """A catalogued event: location plus timing, magnitude, and binary flags.

    ``time`` is measured in years before the reference date (smaller means
    more recent); ``size`` is the event magnitude in whatever unit the
    catalog uses. ``flags`` maps flag names to 0/1 values.
    """

    id: int
    location: GeoPoint
    time: float
    size: float
    flags: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.id, (int, np.integer)):
            raise InputDataError(f"event id {self.id!r} is not an integer")
        object.__setattr__(self, "id", int(self.id))
        for name, value in (("time", self.time), ("size", self.size)):
            v = float(value)
            if not math.isfinite(v) or v < 0:
                raise InputDataError(f"event {self.id}: {name} must be finite and >= 0, got {value!r}")
        for name, value in self.flags.items():
            if float(value) not in (0.0, 1.0):
                raise InputDataError(f"event {self.id}: flag {name!r} must be 0 or 1, got {value!r}")


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance between two points, in km.

    Exactly symmetric in its arguments and zero iff the normalized
    points coincide.
    """
    if a.lat == b.lat and a.lon == b.lon:
        return 0.0
    phi1 = math.radians(a.lat)
    phi2 = math.radians(b.lat)
    dphi = math.radians(b.lat - a.lat)
    dlam = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def _pairwise_km(points: Sequence[GeoPoint], events: Sequence[Event]) -> np.ndarray:
    """Distance matrix (n_points x n_events) in km.

    Computed through the scalar function so matrix entries are bitwise
    identical to individual haversine_km calls (tie-breaking depends on it).
    """
    d = np.empty((len(points), len(events)))
    locs = [e.location for e in events]
    for i, p in enumerate(points):
        row = d[i]
        for j, loc in enumerate(locs):
            row[j] = haversine_km(p, loc)
    return d


def featurize(
    points: Sequence[GeoPoint],
    catalog: Sequence[Event],
    k: int,
    scale: str = "km",
) -> dict[str, np.ndarray]:
    """Build the proximity feature columns for each observation point.

    Emits, in order: distance/time/size/flags of the k nearest events,
    distances to the k most recent events, distances to the k largest
    events, then running-mean distance variants (mean of the 2..k nearest,
    mean of the 2..k most recent). All ordering ties break by ascending
    event id. Returns an ordered mapping of column name to float column.
    """
    if scale not in DISTANCE_SCALES:
        raise ConfigurationError(f"scale must be one of {DISTANCE_SCALES}, got {scale!r}")
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    if len(catalog) < k:
        raise ConfigurationError(f"catalog has {len(catalog)} events but k={k}")
    ids = [e.id for e in catalog]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise InputDataError(f"duplicate event ids in catalog: {dupes}")
    flag_names = tuple(catalog[0].flags.keys())
    for e in catalog:
        if tuple(e.flags.keys()) != flag_names:
            raise InputDataError(f"event {e.id} flag set {tuple(e.flags)} differs from {flag_names}")

    # Work in ascending-id order so stable sorts break ties by id.
    events = sorted(catalog, key=lambda e: e.id)
    dist = _pairwise_km(points, events)
    unit = 1000.0 if scale == "thousand-km" else 1.0
    dist_scaled = dist / unit

    near_order = np.argsort(dist_scaled, axis=1, kind="stable")[:, :k]
    rows = np.arange(len(points))[:, None]
    near_dist = dist_scaled[rows, near_order]

    times = np.array([e.time for e in events])
    sizes = np.array([e.size for e in events])
    recent_order = np.argsort(times, kind="stable")[:k]
    largest_order = np.argsort(-sizes, kind="stable")[:k]

    cols: dict[str, np.ndarray] = {}
    for j in range(k):
        cols[f"dist_near_{j + 1}"] = near_dist[:, j].copy()
    for j in range(k):
        cols[f"time_near_{j + 1}"] = times[near_order[:, j]]
    for j in range(k):
        cols[f"size_near_{j + 1}"] = sizes[near_order[:, j]]
    for name in flag_names:
        fvals = np.array([float(e.flags[name]) for e in events])
        for j in range(k):
            cols[f"flag_{name}_near_{j + 1}"] = fvals[near_order[:, j]]
    for j in range(k):
        cols[f"dist_recent_{j + 1}"] = dist_scaled[:, recent_order[j]].copy()
    for j in range(k):
        cols[f"dist_large_{j + 1}"] = dist_scaled[:, largest_order[j]].copy()

    near_csum = np.cumsum(near_dist, axis=1)
    recent_csum = np.cumsum(dist_scaled[:, recent_order], axis=1)
    for j in range(2, k + 1):
        cols[f"avg_dist_near_{j}"] = near_csum[:, j - 1] / j
    for j in range(2, k + 1):
        cols[f"avg_dist_recent_{j}"] = recent_csum[:, j - 1] / j
    return cols
