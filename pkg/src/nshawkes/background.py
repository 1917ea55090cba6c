"""Covariate-driven background intensity and its domain integral.

mu(s) = mu0 + exp( sum_l gamma_l * xbar_l(s) ), where xbar(s) is the
covariate vector of the regions around s averaged with weights
exp(-alpha_bw * d(s, c_j)) normalized over the neighborhood N(s).  The
weights depend only on geometry and the fixed bandwidth, so they are
precomputed once per grid or event set and every optimizer step just
re-plugs gamma.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geo import IntensityGrid, RegionSet, nearest_region_index, region_of

# Exponent clamp: keeps early wild gamma steps finite instead of fatal.
EXP_CLAMP = 700.0

_clamp_events = 0


def clamp_count() -> int:
    """Number of clamped background exponents since the last reset."""
    return _clamp_events


def reset_clamp_count() -> None:
    global _clamp_events
    _clamp_events = 0


def clamped_exp(x):
    """exp with the overflow clamp; returns (values, clamped mask)."""
    global _clamp_events
    x = np.asarray(x, dtype=float)
    over = x > EXP_CLAMP
    n_over = int(np.count_nonzero(over))
    if n_over:
        _clamp_events += n_over
        x = np.where(over, EXP_CLAMP, x)
    return np.exp(x), over


@dataclass
class BackgroundParams:
    mu0: float  # base rate, > 0
    gamma: np.ndarray  # (L,) covariate coefficients
    alpha_bw: float = 1.0  # distance bandwidth, fixed hyperparameter

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float).reshape(-1)
        if self.mu0 <= 0:
            raise ValueError("mu0 must be positive")
        if self.alpha_bw <= 0:
            raise ValueError("alpha_bw must be positive")


def region_weights(s, regions: RegionSet, alpha_bw: float):
    """Exponential-decay centroid weights over N(s); sums to 1.

    Returns (region indices of N(s), weights).  For a point outside
    every polygon, N(s) is the nearest region plus its adjacency.
    """
    s = np.asarray(s, dtype=float)
    rid = region_of(s, regions)
    ridx = regions.index[rid] if rid is not None else nearest_region_index(s, regions)
    nbr = regions.neighbors_index(ridx)
    d = np.hypot(*(regions.centroids[nbr] - s).T)
    w = np.exp(-alpha_bw * (d - d.min()))
    w /= w.sum()
    assert len(nbr) > 0
    return nbr, w


def covariate_blend(points, regions: RegionSet, alpha_bw: float) -> np.ndarray:
    """Weighted covariate vector xbar(s) for each point, shape (n, L).

    Points are grouped by containing region so the distance weights are
    computed in one vectorized pass per group; points outside every
    polygon fall back to the nearest region's neighborhood, matching
    :func:`region_weights`.
    """
    from .geo import region_index_batch

    points = np.atleast_2d(np.asarray(points, dtype=float))
    X = regions.covariate_matrix
    out = np.empty((len(points), X.shape[1]))
    if len(points) == 0 or X.shape[1] == 0:
        return out
    ridx = region_index_batch(points, regions)
    for k in np.flatnonzero(ridx < 0):
        ridx[k] = nearest_region_index(points[k], regions)
    for j in np.unique(ridx):
        sel = ridx == j
        nbr = regions.neighbors_index(int(j))
        diff = points[sel][:, None, :] - regions.centroids[nbr][None, :, :]
        d = np.hypot(diff[..., 0], diff[..., 1])
        w = np.exp(-alpha_bw * (d - d.min(axis=1, keepdims=True)))
        w /= w.sum(axis=1, keepdims=True)
        out[sel] = w @ X[nbr]
    return out


def grid_covariate_blend(grid: IntensityGrid, regions: RegionSet, alpha_bw: float) -> np.ndarray:
    """xbar(u) for every in-domain grid cell, using the stored distances."""
    X = regions.covariate_matrix
    inside = np.flatnonzero(grid.inside)
    out = np.empty((len(inside), X.shape[1]))
    for k, cell in enumerate(inside):
        nbr = grid.neighbor_sets[cell]
        d = grid.distances[cell]
        w = np.exp(-alpha_bw * (d - d.min()))
        w /= w.sum()
        out[k] = w @ X[nbr]
    return out


def background_intensity(s, regions: RegionSet, params: BackgroundParams) -> float:
    """mu(s) = mu0 + exp(gamma . xbar(s)); time-invariant."""
    xbar = covariate_blend(np.reshape(s, (1, 2)), regions, params.alpha_bw)[0]
    val, _ = clamped_exp(float(params.gamma @ xbar))
    return params.mu0 + float(val)


def background_on_blend(xbar: np.ndarray, params: BackgroundParams) -> np.ndarray:
    """Vectorized mu over precomputed covariate blends."""
    val, _ = clamped_exp(xbar @ params.gamma)
    return params.mu0 + val


def background_integral(
    grid: IntensityGrid, regions: RegionSet, params: BackgroundParams, T: float
) -> float:
    """Integral of mu over the domain and [0, T] via the cell-sum rule.

    mu0 |S| T plus T (|S| / |U|) sum_u exp(gamma . xbar(u)) over the
    in-domain cells U.
    """
    if T == 0:
        return 0.0
    xbar = grid_covariate_blend(grid, regions, params.alpha_bw)
    val, _ = clamped_exp(xbar @ params.gamma)
    n_cells = len(xbar)
    return params.mu0 * grid.area * T + T * (grid.area / n_cells) * float(val.sum())


def background_integral_terms(xbar_grid: np.ndarray, area: float, T: float, params: BackgroundParams):
    """(integral, d/dmu0, d/dgamma) from a precomputed grid blend.

    The derivative with respect to mu0 is |S| T; gamma derivatives are
    zero wherever the exponent clamp is active (the implemented objective
    is flat there).
    """
    n_cells = len(xbar_grid)
    expo, over = clamped_exp(xbar_grid @ params.gamma)
    scale = T * area / n_cells
    value = params.mu0 * area * T + scale * float(expo.sum())
    d_mu0 = area * T
    live = np.where(over, 0.0, expo)
    d_gamma = scale * (live @ xbar_grid)
    return value, d_mu0, d_gamma
