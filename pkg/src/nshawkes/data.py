"""Event ingestion, covariate standardization, chronological splitting."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from datetime import datetime, timedelta

import numpy as np

from .geo import Region, RegionSet

log = logging.getLogger(__name__)

DEFAULT_EPOCH = "2021-01-01T00:00:00"


class EventParseError(ValueError):
    pass


class CovariateError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    t: float  # days since the dataset epoch
    lon: float
    lat: float

    @property
    def s(self) -> np.ndarray:
        return np.array([self.lon, self.lat])


class EventSequence:
    """Time-ordered events on [0, T], stored as arrays.

    ``times`` is non-decreasing and bounded by ``horizon``; ``locs`` is
    the matching (n, 2) array of lon/lat points.
    """

    def __init__(self, times, locs, horizon: float, dropped: int = 0):
        self.times = np.asarray(times, dtype=float).reshape(-1)
        self.locs = np.asarray(locs, dtype=float).reshape(-1, 2)
        if len(self.times) != len(self.locs):
            raise ValueError("times and locs length mismatch")
        if len(self.times) and np.any(np.diff(self.times) < 0):
            raise ValueError("event times must be non-decreasing")
        if len(self.times) and (self.times[0] < 0 or self.times[-1] > horizon + 1e-12):
            raise ValueError("event times must lie in [0, horizon]")
        self.horizon = float(horizon)
        self.dropped = int(dropped)

    def __len__(self):
        return len(self.times)

    def __getitem__(self, i) -> Event:
        return Event(float(self.times[i]), float(self.locs[i, 0]), float(self.locs[i, 1]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def before(self, t: float) -> "EventSequence":
        """Events strictly before time t, keeping the original horizon."""
        n = int(np.searchsorted(self.times, t, side="left"))
        return EventSequence(self.times[:n], self.locs[:n], self.horizon)


def _domain_bbox(domain):
    if isinstance(domain, RegionSet):
        return domain.bbox
    lo, hi = domain
    return np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)


def load_events(path, domain) -> EventSequence:
    """Read a `timestamp,lon,lat` CSV into an EventSequence.

    Timestamps become fractional days from the earliest event.  Rows
    outside the domain bounding box are dropped and counted on the
    returned sequence's ``dropped`` attribute.
    """
    lo, hi = _domain_bbox(domain)
    stamps, lons, lats = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"timestamp", "lon", "lat"} <= set(
            reader.fieldnames
        ):
            raise EventParseError(f"{path}: expected header with timestamp,lon,lat")
        for lineno, row in enumerate(reader, start=2):
            try:
                stamps.append(datetime.fromisoformat(row["timestamp"]))
                lons.append(float(row["lon"]))
                lats.append(float(row["lat"]))
            except (ValueError, TypeError, KeyError) as exc:
                raise EventParseError(f"{path}:{lineno}: unparseable row ({exc})") from exc
    if not stamps:
        raise EventParseError(f"{path}: no events")

    t0 = min(stamps)
    t = np.array([(s - t0).total_seconds() / 86400.0 for s in stamps])
    locs = np.column_stack([lons, lats])

    keep = (
        (locs[:, 0] >= lo[0])
        & (locs[:, 0] <= hi[0])
        & (locs[:, 1] >= lo[1])
        & (locs[:, 1] <= hi[1])
    )
    dropped = int(np.count_nonzero(~keep))
    if dropped:
        log.warning("dropped %d event(s) outside the domain bounding box", dropped)
    t, locs = t[keep], locs[keep]
    order = np.argsort(t, kind="stable")
    t, locs = t[order], locs[order]
    horizon = float(t[-1]) if len(t) else 0.0
    return EventSequence(t, locs, horizon, dropped=dropped)


def save_events(seq: EventSequence, path, epoch: str = DEFAULT_EPOCH) -> None:
    """Write events in the same CSV format ``load_events`` reads."""
    base = datetime.fromisoformat(epoch)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "lon", "lat"])
        for ev in seq:
            stamp = base + timedelta(days=ev.t)
            writer.writerow([stamp.isoformat(), f"{ev.lon:.10f}", f"{ev.lat:.10f}"])


@dataclass(frozen=True)
class CovariateStats:
    names: tuple
    means: np.ndarray  # (L,)
    stds: np.ndarray  # (L,), sample (n-1) standard deviations


def standardize(regions: RegionSet):
    """Center and scale every covariate column; return (regions, stats)."""
    if len(regions) < 2 and len(regions.covariate_names) > 0:
        raise CovariateError("standardization needs at least 2 regions")
    X = regions.covariate_matrix
    L = X.shape[1]
    means = X.mean(axis=0) if L else np.empty(0)
    stds = X.std(axis=0, ddof=1) if L else np.empty(0)
    for name, sd in zip(regions.covariate_names, stds):
        if sd <= 0:
            raise CovariateError(f"constant covariate {name!r} (zero standard deviation)")
    Z = (X - means) / stds if L else X
    new_regions = [
        replace(r, covariates=Z[k].copy()) for k, r in enumerate(regions.regions)
    ]
    out = RegionSet(
        regions=new_regions,
        covariate_names=list(regions.covariate_names),
        adjacency=regions.adjacency,
    )
    stats = CovariateStats(tuple(regions.covariate_names), means, stds)
    return out, stats


def apply_standardization(regions: RegionSet, stats: CovariateStats) -> RegionSet:
    """Standardize with previously-computed stats (e.g. from a checkpoint)."""
    if tuple(regions.covariate_names) != tuple(stats.names):
        raise CovariateError(
            f"covariate names {regions.covariate_names} do not match stats {list(stats.names)}"
        )
    L = len(stats.names)
    X = regions.covariate_matrix
    Z = (X - stats.means) / stats.stds if L else X
    new_regions = [
        replace(r, covariates=Z[k].copy()) for k, r in enumerate(regions.regions)
    ]
    return RegionSet(
        regions=new_regions,
        covariate_names=list(regions.covariate_names),
        adjacency=regions.adjacency,
    )


def destandardize(regions: RegionSet, stats: CovariateStats) -> RegionSet:
    """Inverse of :func:`standardize`."""
    X = regions.covariate_matrix * stats.stds + stats.means
    new_regions = [
        replace(r, covariates=X[k].copy()) for k, r in enumerate(regions.regions)
    ]
    return RegionSet(
        regions=new_regions,
        covariate_names=list(regions.covariate_names),
        adjacency=regions.adjacency,
    )


def split(seq: EventSequence, t_split: float):
    """Chronological split: train gets t < t_split, test gets the rest."""
    if not (0 < t_split <= seq.horizon):
        raise ValueError(f"t_split must lie in (0, {seq.horizon}], got {t_split}")
    n = int(np.searchsorted(seq.times, t_split, side="left"))
    train = EventSequence(seq.times[:n], seq.locs[:n], horizon=t_split)
    test = EventSequence(
        seq.times[n:] , seq.locs[n:], horizon=seq.horizon
    )
    return train, test
