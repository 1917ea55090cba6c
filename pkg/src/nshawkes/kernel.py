"""Separable influence kernel: Gaussian temporal decay times a
non-stationary spatial kernel built from focus-point covariances.

The spatial part mixes R location-dependent Gaussian feature functions.
A feature function at location s is the bivariate Gaussian centered at s
whose one-standard-deviation ellipse has fixed area A and focus points
+/- psi(s); the closed form for the covariance lives in
:func:`covariance_from_focus`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .neural import FeatureNet, net_forward_batch

SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass
class KernelParams:
    """Learnable kernel parameters plus the two fixed hyperparameters."""

    C: float  # temporal magnitude, > 0
    sigma0: float  # temporal scale in days, > 0
    tau_z: float  # covariance scale, > 0
    nets: FeatureNet
    A: float = 0.35  # ellipse area (fixed during fitting)

    def __post_init__(self):
        if min(self.C, self.sigma0, self.tau_z) <= 0:
            raise ValueError("C, sigma0 and tau_z must be positive")
        if self.A <= 0:
            raise ValueError("A must be positive")

    @property
    def c(self) -> float:
        return self.nets.c


def covariance_from_focus(psi, A: float, tau_z: float) -> np.ndarray:
    """2x2 covariance whose std ellipse has area A and foci +/- psi.

    With p = |psi|^2 and Q = sqrt(4 A^2 + p^2 pi^2) / (2 pi), the matrix is

        tau_z^2 [[Q + (p/2) cos 2a,  (p/2) sin 2a],
                 [(p/2) sin 2a,      Q - (p/2) cos 2a]]

    where a is the two-argument arctangent angle of psi.  The angular
    terms reduce to polynomials in psi ((p/2)cos2a = (px^2 - py^2)/2,
    (p/2)sin2a = px*py), which is what is implemented: smooth at psi = 0
    and exactly the same matrix elsewhere.
    """
    psi = np.asarray(psi, dtype=float)
    px, py = psi[..., 0], psi[..., 1]
    p = px * px + py * py
    Q = np.sqrt(4.0 * A * A + p * p * np.pi**2) / (2.0 * np.pi)
    u = (px * px - py * py) / 2.0
    w = px * py
    out = np.empty(psi.shape[:-1] + (2, 2))
    t2 = tau_z * tau_z
    out[..., 0, 0] = t2 * (Q + u)
    out[..., 0, 1] = t2 * w
    out[..., 1, 0] = t2 * w
    out[..., 1, 1] = t2 * (Q - u)
    return out


def temporal_kernel(dt, C: float, sigma0: float):
    """C * exp(-dt^2 / (2 sigma0^2)) for dt > 0, zero otherwise."""
    dt = np.asarray(dt, dtype=float)
    val = C * np.exp(-(dt * dt) / (2.0 * sigma0 * sigma0))
    return np.where(dt > 0, val, 0.0)


def gaussian2_density(delta, cov):
    """Density of N(0, cov) at displacement(s) delta; closed 2x2 formulas."""
    delta = np.asarray(delta, dtype=float)
    a = cov[..., 0, 0]
    b = cov[..., 0, 1]
    d = cov[..., 1, 1]
    det = a * d - b * b
    dx, dy = delta[..., 0], delta[..., 1]
    # quadratic form delta^T cov^{-1} delta
    quad = (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    return np.exp(-0.5 * quad) / (2.0 * np.pi * np.sqrt(det))


def feature_outputs(nets: FeatureNet, points) -> tuple:
    """(psi, weights, covariances) at a batch of locations, for given tau.

    Covariances are not included here; use :func:`covariance_from_focus`
    with the caller's tau_z.  Returned arrays are (n, R, 2) and (n, R).
    """
    cache = net_forward_batch(nets, np.atleast_2d(points))
    return cache.psi, cache.weights


@dataclass
class SpatialFeatures:
    """Per-location kernel inputs reusable across many kernel evaluations."""

    locs: np.ndarray  # (n, 2)
    weights: np.ndarray  # (n, R)
    cov: np.ndarray  # (n, R, 2, 2)


def spatial_features(points, params: KernelParams) -> SpatialFeatures:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    psi, w = feature_outputs(params.nets, points)
    cov = covariance_from_focus(psi, params.A, params.tau_z)
    return SpatialFeatures(locs=points, weights=w, cov=cov)


def spatial_cross(feats_a: SpatialFeatures, feats_b: SpatialFeatures) -> np.ndarray:
    """upsilon between two featurized point sets, shape (n, m)."""
    delta = feats_a.locs[:, None, :] - feats_b.locs[None, :, :]
    R = feats_a.weights.shape[1]
    out = np.zeros((len(feats_a.locs), len(feats_b.locs)))
    for r1 in range(R):
        for r2 in range(R):
            cov = feats_a.cov[:, None, r1] + feats_b.cov[None, :, r2]
            g = gaussian2_density(delta, cov)
            out += feats_a.weights[:, None, r1] * feats_b.weights[None, :, r2] * g
    return out


def spatial_kernel_matrix(points, sources, params: KernelParams) -> np.ndarray:
    """upsilon(points[i], sources[j]) as an (n, m) matrix."""
    return spatial_cross(
        spatial_features(points, params), spatial_features(sources, params)
    )


def spatial_kernel(s, s_prime, params: KernelParams) -> float:
    """Non-stationary spatial kernel value at one pair of locations."""
    return float(spatial_kernel_matrix(np.reshape(s, (1, 2)), np.reshape(s_prime, (1, 2)), params)[0, 0])


def influence_kernel(t, t_prime, s, s_prime, params: KernelParams) -> float:
    """k(t, t', s, s') = nu(t - t') * upsilon(s, s'); zero for t <= t'."""
    if t <= t_prime:
        return 0.0
    nu = float(temporal_kernel(t - t_prime, params.C, params.sigma0))
    return nu * spatial_kernel(s, s_prime, params)


def triggering_integral(times, horizon: float, C: float, sigma0: float) -> float:
    """Closed-form O(n) approximation of the triggering double integral.

    sqrt(2 pi) * C * sigma0 * sum_i [Phi((T - t_i)/sigma0) - 1/2], treating
    the spatial mass of each kernel as exactly 1.  The relative error of
    that treatment is bounded by :func:`integral_error_bound`.
    """
    times = np.asarray(times, dtype=float)
    z = (horizon - times) / sigma0
    return float(SQRT_2PI * C * sigma0 * np.sum(ndtr(z) - 0.5))


def triggering_integral_gradients(times, horizon: float, C: float, sigma0: float):
    """(value, d/dC, d/dsigma0) of :func:`triggering_integral`."""
    times = np.asarray(times, dtype=float)
    z = (horizon - times) / sigma0
    mass = ndtr(z) - 0.5
    phi = np.exp(-0.5 * z * z) / SQRT_2PI
    value = SQRT_2PI * C * sigma0 * mass.sum()
    d_C = SQRT_2PI * sigma0 * mass.sum()
    d_sigma = SQRT_2PI * C * np.sum(mass - z * phi)
    return float(value), float(d_C), float(d_sigma)


def integral_error_bound(A: float, c: float) -> float:
    """Bound on the relative error of the triggering-integral closed form.

    U = (sqrt(4 A^2 + c^4 pi^2) + c^2 pi) / (2 A); the bound is
    max(U - 1, 1 - 1/U).  At the defaults (A=0.35, c=0.1) this is about
    0.0459.
    """
    U = (np.sqrt(4.0 * A * A + c**4 * np.pi**2) + c * c * np.pi) / (2.0 * A)
    return float(max(U - 1.0, 1.0 - 1.0 / U))


def min_covariance_eigenvalue(A: float, c: float, tau_z: float) -> float:
    """Smallest possible eigenvalue of a focus covariance, over |psi| <= c.

    Eigenvalues are tau^2 (Q(p) +/- p/2) with p = |psi|^2; Q - p/2 is
    decreasing in p, so the minimum sits at p = c^2.
    """
    p = c * c
    Q = np.sqrt(4.0 * A * A + p * p * np.pi**2) / (2.0 * np.pi)
    return float(tau_z * tau_z * (Q - p / 2.0))


def spatial_kernel_upper_bound(params: KernelParams) -> float:
    """sup over all location pairs of the spatial kernel.

    Every mixture component is a Gaussian density whose covariance has
    eigenvalues at least twice the minimum eigenvalue of a single focus
    covariance, so its peak is at most 1 / (4 pi e_min); the weights
    average over components and cannot push the sum above that peak.
    """
    e_min = min_covariance_eigenvalue(params.A, params.nets.c, params.tau_z)
    return float(1.0 / (4.0 * np.pi * e_min))
