"""Comparison models: persistent, differenced autoregression, stationary ETAS.

The time-series baselines work on per-region weekly counts and are fit
independently per region; ETAS is a single jointly-fit Hawkes model with
a constant background and an isotropic Gaussian diffusion kernel with
exponential temporal decay.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .data import EventSequence
from .geo import IntensityGrid, RegionSet, build_grid
from .evaluate import observed_counts_by_region, oos_predict
from .model import FitDivergence, SeparableModelBase

log = logging.getLogger(__name__)

# Exponential-decay window cutoff matching the Gaussian kernel's e^-12.5.
ETAS_WINDOW_LOGCUT = 12.5


@dataclass
class WeeklySeries:
    """Per-region ordered interval counts (not necessarily 7-day)."""

    region_ids: list
    counts: np.ndarray  # (J, K) nonnegative ints
    edges: np.ndarray  # (K+1,)

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if (self.counts < 0).any():
            raise ValueError("counts must be nonnegative")
        if self.counts.shape != (len(self.region_ids), len(self.edges) - 1):
            raise ValueError("counts shape does not match regions/edges")


def weekly_counts(events: EventSequence, regions: RegionSet, edges) -> WeeklySeries:
    edges = np.asarray(edges, dtype=float)
    intervals = list(zip(edges[:-1], edges[1:]))
    counts = observed_counts_by_region(events, regions, intervals)
    return WeeklySeries(region_ids=regions.ids, counts=counts.astype(int), edges=edges)


def persistent_predict(series: WeeklySeries) -> np.ndarray:
    """Next interval equals the last observed one, per region."""
    if series.counts.shape[1] < 1:
        raise ValueError("need at least one observed interval")
    return series.counts[:, -1].astype(float)


@dataclass
class ARModel:
    """AR(p) with intercept on the d-times differenced series."""

    p: int
    d: int
    coef: np.ndarray  # (p+1,) intercept first
    tail: np.ndarray  # last values of the original series, length >= p + d


def _difference(y: np.ndarray, d: int) -> np.ndarray:
    for _ in range(d):
        y = np.diff(y)
    return y


def ar_fit(series: np.ndarray, p: int = 2, d: int = 1) -> ARModel:
    """Conditional least squares on lagged values of the differenced series."""
    y = np.asarray(series, dtype=float).reshape(-1)
    if len(y) <= p + d + 1:
        raise ValueError(f"series length {len(y)} too short for AR({p}) with d={d}")
    z = _difference(y, d)
    rows = len(z) - p
    X = np.ones((rows, p + 1))
    for k in range(1, p + 1):
        X[:, k] = z[p - k:len(z) - k]
    target = z[p:]
    coef, *_ = np.linalg.lstsq(X, target, rcond=None)
    if not np.isfinite(coef).all():
        log.warning("AR normal equations unusable; falling back to persistent")
        coef = np.zeros(p + 1)
        coef[0] = 0.0  # zero differenced forecast = repeat last level
        if d == 0:
            coef[0] = y[-1]
    return ARModel(p=p, d=d, coef=coef, tail=y[-(p + d + 2):].copy())


def ar_predict(model: ARModel, horizon: int = 1) -> np.ndarray:
    """Recursive forecasts, integrated back and clamped at zero."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    y = list(model.tail)
    preds = []
    for _ in range(horizon):
        z = _difference(np.array(y), model.d)
        lags = z[::-1][: model.p] if model.p else np.empty(0)
        step = model.coef[0] + float(model.coef[1:] @ lags)
        nxt = y[-1] + step if model.d == 1 else step
        if model.d > 1:
            # integrate d times from the tail of each difference level
            nxt = step
            for lvl in range(model.d, 0, -1):
                nxt = _difference(np.array(y), lvl - 1)[-1] + nxt
        preds.append(max(0.0, nxt))
        y.append(nxt)
    return np.array(preds)


def rolling_forecasts(series: WeeklySeries, n_test: int, method: str = "ar",
                      p: int = 2, d: int = 1) -> np.ndarray:
    """One-step-ahead forecasts for the last ``n_test`` intervals.

    Each forecast uses only intervals before it (expanding window), the
    same information set the frozen-history model predictions see.
    """
    J, K = series.counts.shape
    if n_test >= K:
        raise ValueError("need observed intervals before the test window")
    out = np.zeros((J, n_test))
    for k in range(n_test):
        cut = K - n_test + k
        past = series.counts[:, :cut].astype(float)
        if method == "persistent":
            out[:, k] = past[:, -1]
        elif method == "ar":
            for j in range(J):
                try:
                    m = ar_fit(past[j], p=p, d=d)
                    out[j, k] = ar_predict(m, 1)[0]
                except ValueError:
                    out[j, k] = past[j, -1]
        else:
            raise ValueError(f"unknown method {method!r}")
    return out


@dataclass
class EtasParams:
    mu0: float
    C: float
    beta: float  # temporal decay rate
    sigma_x: float  # isotropic spatial scale

    def __post_init__(self):
        if min(self.mu0, self.C, self.beta, self.sigma_x) <= 0:
            raise ValueError("ETAS parameters must be positive")


class EtasHawkes(SeparableModelBase):
    """Stationary Hawkes: constant background, Gaussian diffusion kernel."""

    def __init__(self, params: EtasParams, regions: RegionSet):
        self.params = params
        self.regions = regions

    def background_at(self, points) -> np.ndarray:
        return np.full(len(np.atleast_2d(points)), self.params.mu0)

    def spatial_matrix(self, points, sources) -> np.ndarray:
        points = np.atleast_2d(points)
        sources = np.atleast_2d(sources)
        delta = points[:, None, :] - sources[None, :, :]
        s2 = self.params.sigma_x**2
        sq = (delta**2).sum(axis=2)
        return np.exp(-sq / (2.0 * s2)) / (2.0 * np.pi * s2)

    def temporal_decay(self, dt) -> np.ndarray:
        dt = np.asarray(dt, dtype=float)
        val = self.params.C * np.exp(-self.params.beta * dt)
        return np.where(dt > 0, val, 0.0)

    def trigger_window(self) -> float:
        return ETAS_WINDOW_LOGCUT / self.params.beta

    def trigger_peak(self) -> float:
        return self.params.C / (2.0 * np.pi * self.params.sigma_x**2)


def etas_loglik_grad(theta: np.ndarray, events: EventSequence, area: float,
                     window_cut: float = ETAS_WINDOW_LOGCUT):
    """(ll, grad) in the log-parameter space [mu0, C, beta, sigma_x].

    Same approximation contract as the main model: the triggering
    integral treats each kernel's spatial mass as 1 and the pair sums
    are truncated once the temporal factor falls below e^-window_cut.
    """
    mu0, C, beta, sigma = np.exp(theta)
    t, locs, T = events.times, events.locs, events.horizon
    n = len(t)
    window = window_cut / beta

    hi = np.searchsorted(t, t, side="left")
    lo = np.searchsorted(t, t - window, side="left")
    counts = hi - lo
    pi = np.repeat(np.arange(n), counts)
    pj = (
        np.concatenate([np.arange(a, b) for a, b in zip(lo, hi)])
        if counts.sum()
        else np.empty(0, dtype=int)
    )
    dt = t[pi] - t[pj]
    delta = locs[pi] - locs[pj]
    sq = (delta**2).sum(axis=1)
    s2 = sigma * sigma
    g = np.exp(-sq / (2.0 * s2)) / (2.0 * np.pi * s2)
    nu = C * np.exp(-beta * dt)
    contrib = nu * g

    lam = mu0 + np.bincount(pi, weights=contrib, minlength=n)
    u = T - t
    decay = np.exp(-beta * u)
    comp_trig = (C / beta) * float(np.sum(1.0 - decay))
    ll = float(np.sum(np.log(lam)) - mu0 * area * T - comp_trig)

    inv = 1.0 / lam
    e_pair = inv[pi]
    d_mu0 = float(inv.sum()) - area * T
    d_C = float(np.sum(e_pair * g * np.exp(-beta * dt))) - comp_trig / C
    d_beta = float(np.sum(e_pair * contrib * (-dt))) - (
        -comp_trig / beta + (C / beta) * float(np.sum(u * decay))
    )
    d_sigma = float(np.sum(e_pair * contrib * (sq / (s2 * sigma) - 2.0 / sigma)))
    grad = np.array([mu0 * d_mu0, C * d_C, beta * d_beta, sigma * d_sigma])
    return ll, grad


@dataclass
class EtasFitResult:
    model: EtasHawkes
    trace: np.ndarray
    converged: bool


def etas_fit(events: EventSequence, regions: RegionSet, grid: IntensityGrid = None,
             learning_rate: float = 0.1, max_iters: int = 500, tol: float = 1e-6,
             patience: int = 10, grid_spacing: float = 0.05,
             init: EtasParams = None) -> EtasFitResult:
    """Gradient ascent with the same loop contract as the main model."""
    if grid is None:
        grid = build_grid(regions, grid_spacing)
    n = max(len(events), 1)
    T = max(events.horizon, 1e-9)
    if init is None:
        lo, hi = regions.bbox
        init = EtasParams(
            mu0=0.5 * n / (grid.area * T),
            C=0.1,
            beta=1.0,
            sigma_x=0.1 * float((hi - lo).mean()),
        )
    theta = np.log([init.mu0, init.C, init.beta, init.sigma_x])
    trace = []
    converged = False
    for it in range(max_iters):
        ll, grad = etas_loglik_grad(theta, events, grid.area)
        if not np.isfinite(ll):
            raise FitDivergence(
                f"ETAS likelihood became non-finite at iteration {it}; "
                "try a smaller learning rate"
            )
        trace.append(ll)
        if len(trace) > patience:
            ref = trace[-1 - patience]
            if abs(trace[-1] - ref) / max(1.0, abs(ref)) < tol:
                converged = True
                break
        theta = theta + (learning_rate / n) * grad
    mu0, C, beta, sigma = np.exp(theta)
    model = EtasHawkes(EtasParams(mu0, C, beta, sigma), regions)
    return EtasFitResult(model=model, trace=np.array(trace), converged=converged)


def etas_predict(fit_result: EtasFitResult, train: EventSequence, test: EventSequence,
                 regions: RegionSet, grid: IntensityGrid, week_length: float = 7.0,
                 dt_step: float = 0.25):
    """Weekly out-of-sample report; identical protocol to the main model."""
    return oos_predict(fit_result.model, train, test, regions, grid,
                       week_length=week_length, dt_step=dt_step)
