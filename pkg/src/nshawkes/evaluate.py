"""Expected-count estimation, MAE/MRE reports, raster and kernel export.

Counts come from integrating the conditional intensity over a region's
grid cells and over temporal sub-steps (midpoint rule, default 0.25 day).
Two history modes exist: ``insample`` lets observed events enter the sum
as the interval unfolds; ``frozen`` fixes the history at the interval
start, which is the leak-free out-of-sample protocol.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .data import EventSequence
from .geo import IntensityGrid, RegionSet, region_of
from .utils import map_ordered, substream

MODES = ("insample", "frozen")


@dataclass
class PredictionReport:
    region_ids: list
    intervals: list  # list of (t1, t2)
    predicted: np.ndarray  # (J, K)
    observed: np.ndarray  # (J, K)
    frequent_ids: list  # top-ranked regions by training counts (oos only)
    mae_rare: float = None
    mae_frequent: float = None
    mae_total: float = None
    mre_total: float = None

    def summary(self) -> dict:
        out = {
            "mae_rare": self.mae_rare,
            "mae_frequent": self.mae_frequent,
            "mae_total": self.mae_total,
            "mre_total": self.mre_total,
            "n_regions": len(self.region_ids),
            "n_intervals": len(self.intervals),
            "frequent_regions": list(self.frequent_ids),
        }
        return {k: v for k, v in out.items() if v is not None}


def _interval_steps(t1: float, t2: float, dt_step: float):
    """Midpoints and width of the sub-steps covering [t1, t2]."""
    K = max(1, math.ceil((t2 - t1) / dt_step - 1e-12))
    width = (t2 - t1) / K
    mids = t1 + width * (np.arange(K) + 0.5)
    return mids, width


def expected_counts_by_region(
    model, interval, grid: IntensityGrid, regions: RegionSet,
    history: EventSequence, mode: str = "frozen", dt_step: float = 0.25,
) -> np.ndarray:
    """Integral of lambda over each region and the interval, shape (J,).

    The spatial kernel factor is time-invariant, so each history event
    contributes (temporal quadrature weight) x (per-region spatial mass).
    """
    if mode not in MODES:
        raise ValueError(f"unknown history mode {mode!r}")
    t1, t2 = float(interval[0]), float(interval[1])
    if t2 <= t1:
        raise ValueError("empty interval")
    mids, width = _interval_steps(t1, t2, dt_step)
    cell_area = grid.cell_area
    inside = np.flatnonzero(grid.inside)
    cells = grid.centers[inside]
    cell_region = grid.region_idx[inside]
    J = len(regions)

    mu_cells = model.background_on_grid(grid)
    counts = np.bincount(cell_region, weights=mu_cells, minlength=J) * cell_area * (t2 - t1)

    window = model.trigger_window()
    if mode == "frozen":
        keep = (history.times < t1) & (history.times > t1 - window)
    else:
        keep = (history.times < t2) & (history.times > t1 - window)
    src_t = history.times[keep]
    src_s = history.locs[keep]
    if len(src_t):
        # temporal quadrature weight per source event
        dt = mids[:, None] - src_t[None, :]  # (K, m)
        wtemp = (model.temporal_decay(dt) * width).sum(axis=0)  # (m,)
        live = wtemp > 0
        if live.any():
            ups = model.spatial_matrix(cells, src_s[live])  # (ncells, m_live)
            mass = np.zeros((J, int(live.sum())))
            for j in range(J):
                sel = cell_region == j
                if sel.any():
                    mass[j] = ups[sel].sum(axis=0) * cell_area
            counts += mass @ wtemp[live]
    return counts


def expected_count(
    model, interval, region_id: str, grid: IntensityGrid, regions: RegionSet,
    history: EventSequence, mode: str = "frozen", dt_step: float = 0.25,
) -> float:
    """Expected event count in one region over one interval."""
    if region_id not in regions.index:
        raise KeyError(f"unknown region id {region_id!r}")
    counts = expected_counts_by_region(model, interval, grid, regions, history, mode, dt_step)
    return float(counts[regions.index[region_id]])


def observed_counts_by_region(
    events: EventSequence, regions: RegionSet, intervals,
) -> np.ndarray:
    """Event counts per (region, interval); intervals are half-open."""
    J = len(regions)
    out = np.zeros((J, len(intervals)))
    ridx = np.array(
        [
            regions.index.get(region_of(s, regions), -1)
            for s in events.locs
        ]
    ) if len(events) else np.empty(0, dtype=int)
    for k, (t1, t2) in enumerate(intervals):
        sel = (events.times >= t1) & (events.times < t2)
        valid = sel & (ridx >= 0) if len(events) else sel
        if len(events):
            out[:, k] = np.bincount(ridx[valid], minlength=J)
    return out


def rank_frequent(region_ids, train_counts: np.ndarray, top_fraction: float = 0.2):
    """Top ceil(f*J) region ids by training counts; ties go to lower id."""
    J = len(region_ids)
    k = math.ceil(top_fraction * J)
    order = sorted(range(J), key=lambda j: (-train_counts[j], region_ids[j]))
    return [region_ids[j] for j in order[:k]]


def make_report(region_ids, intervals, predicted, observed, train_counts=None) -> PredictionReport:
    """Assemble a PredictionReport with the split MAEs and total MRE."""
    predicted = np.asarray(predicted, dtype=float)
    observed = np.asarray(observed, dtype=float)
    err = np.abs(predicted - observed)
    report = PredictionReport(
        region_ids=list(region_ids),
        intervals=list(intervals),
        predicted=predicted,
        observed=observed,
        frequent_ids=[],
    )
    report.mae_total = float(err.mean())
    tot_pred = predicted.sum(axis=0)
    tot_obs = observed.sum(axis=0)
    if tot_obs.sum() > 0:
        report.mre_total = float(np.abs(tot_pred - tot_obs).sum() / tot_obs.sum())
    if train_counts is not None:
        frequent = set(rank_frequent(region_ids, train_counts))
        fmask = np.array([rid in frequent for rid in region_ids])
        report.frequent_ids = [rid for rid in region_ids if rid in frequent]
        report.mae_frequent = float(err[fmask].mean())
        report.mae_rare = float(err[~fmask].mean())
    return report


def insample_series(
    model, events: EventSequence, bins, regions: RegionSet, grid: IntensityGrid,
    dt_step: float = 0.25, workers: int = 1,
) -> PredictionReport:
    """Per-bin, per-region estimated vs observed counts on training data.

    History accumulates through each bin (mode ``insample``): the fitted
    model re-reads the training events it was estimated on.
    """
    cols = map_ordered(
        lambda b: expected_counts_by_region(
            model, b, grid, regions, events, mode="insample", dt_step=dt_step
        ),
        bins,
        workers,
    )
    predicted = np.column_stack(cols)
    observed = observed_counts_by_region(events, regions, bins)
    return make_report(regions.ids, bins, predicted, observed)


def month_bins(horizon: float, length: float = 30.0):
    edges = np.arange(0.0, horizon + 1e-9, length)
    if edges[-1] < horizon:
        edges = np.append(edges, horizon)
    return list(zip(edges[:-1], edges[1:]))


def week_edges(t_start: float, t_end: float, length: float = 7.0) -> np.ndarray:
    n = int(math.floor((t_end - t_start) / length + 1e-9))
    if n < 1:
        raise ValueError("test window holds no complete interval")
    return t_start + length * np.arange(n + 1)


def oos_predict(
    model, train: EventSequence, test: EventSequence, regions: RegionSet,
    grid: IntensityGrid, week_length: float = 7.0, dt_step: float = 0.25,
    workers: int = 1,
) -> PredictionReport:
    """Weekly frozen-history predictions over the test window.

    History for a week starting at w1 is every event observed before w1
    (training set plus earlier test weeks); events inside the predicted
    week never enter, so predictions carry no leakage.
    """
    if len(test) == 0:
        raise ValueError("test window is empty")
    edges = week_edges(train.horizon, test.horizon, week_length)
    intervals = list(zip(edges[:-1], edges[1:]))
    all_times = np.concatenate([train.times, test.times])
    all_locs = np.vstack([train.locs, test.locs])

    def one_week(interval):
        w1, w2 = interval
        keep = all_times < w1
        history = EventSequence(all_times[keep], all_locs[keep], horizon=test.horizon)
        return expected_counts_by_region(
            model, (w1, w2), grid, regions, history, mode="frozen", dt_step=dt_step
        )

    predicted = np.column_stack(map_ordered(one_week, intervals, workers))
    observed = observed_counts_by_region(test, regions, intervals)
    train_counts = observed_counts_by_region(train, regions, [(0.0, train.horizon)]).sum(axis=1)
    return make_report(regions.ids, intervals, predicted, observed, train_counts=train_counts)


def render_intensity(model, t_star: float, grid: IntensityGrid, history: EventSequence,
                     path) -> None:
    """Write `lon,lat,intensity` rows for every in-domain cell at t_star."""
    cells = grid.inside_centers
    lam = model.background_on_grid(grid)
    keep = (history.times < t_star) & (history.times > t_star - model.trigger_window())
    if keep.any():
        nu = model.temporal_decay(t_star - history.times[keep])
        ups = model.spatial_matrix(cells, history.locs[keep])
        lam = lam + ups @ nu
    with open(path, "w") as fh:
        fh.write("lon,lat,intensity\n")
        for (x, y), v in zip(cells, lam):
            fh.write(f"{x:.10g},{y:.10g},{v:.10g}\n")


def export_kernel_viz(params, regions: RegionSet, path, n_locations: int = 200,
                      seed: int = 0) -> None:
    """Sample locations and write per-feature focus offsets and weights.

    Rows are `lon,lat,psi_x,psi_y,weight,r`; the segment for a row runs
    from (lon,lat) - psi to (lon,lat) + psi.
    """
    from .neural import net_forward_batch

    rng = substream(seed, "viz")
    lo, hi = regions.bbox
    points = []
    guard = 0
    while len(points) < n_locations:
        s = lo + rng.uniform(size=2) * (hi - lo)
        if region_of(s, regions) is not None:
            points.append(s)
        guard += 1
        if guard > 1000 * n_locations:
            raise RuntimeError("domain too sparse to sample visualization points")
    points = np.array(points)
    cache = net_forward_batch(params.kernel.nets, points)
    with open(path, "w") as fh:
        fh.write("lon,lat,psi_x,psi_y,weight,r\n")
        for k, (x, y) in enumerate(points):
            for r in range(params.kernel.nets.R):
                px, py = cache.psi[k, r]
                w = cache.weights[k, r]
                fh.write(f"{x:.10g},{y:.10g},{px:.10g},{py:.10g},{w:.10g},{r + 1}\n")


def report_rows(report: PredictionReport):
    for j, rid in enumerate(report.region_ids):
        for k, (t1, t2) in enumerate(report.intervals):
            yield rid, t1, t2, report.predicted[j, k], report.observed[j, k]


def write_report(report: PredictionReport, csv_path, json_path=None) -> None:
    with open(csv_path, "w") as fh:
        fh.write("region,start,end,predicted,observed\n")
        for rid, t1, t2, p, o in report_rows(report):
            fh.write(f"{rid},{t1:.10g},{t2:.10g},{p:.10g},{o:.10g}\n")
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump(report.summary(), fh, sort_keys=True, indent=1)
