"""Conditional intensity, log-likelihood, exact gradients, GD fitting.

The free parameter vector theta is

    [log C, log sigma0, log tau_z, log mu0, gamma_1..gamma_L, net params]

so the positivity constraints hold for any theta.  The likelihood uses
the O(n) closed form for the triggering integral and the grid rule for
the covariate integral; the gradient is the exact gradient of that
implemented objective, which is what the finite-difference suites check.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import background as bg
from .background import BackgroundParams
from .data import CovariateStats, EventSequence
from .geo import IntensityGrid, RegionSet, build_grid
from .kernel import (
    KernelParams,
    covariance_from_focus,
    spatial_cross,
    spatial_features,
    spatial_kernel_matrix,
    spatial_kernel_upper_bound,
    temporal_kernel,
    triggering_integral_gradients,
)
from .neural import (
    FeatureNet,
    init_feature_net,
    net_forward_batch,
    net_gradient_batch,
    pack_net_grads,
    pack_net_params,
    unpack_net_params,
)
from .utils import substream

CHECKPOINT_FORMAT = "nshawkes-checkpoint"
CHECKPOINT_VERSION = 1


class FitDivergence(RuntimeError):
    pass


class LikelihoodError(FloatingPointError):
    pass


@dataclass
class ModelParams:
    """Full parameter bundle: kernel plus background."""

    kernel: KernelParams
    background: BackgroundParams

    @property
    def n_free(self) -> int:
        return 4 + len(self.background.gamma) + self.kernel.nets.n_params


def params_to_vector(params: ModelParams) -> np.ndarray:
    head = np.log(
        [
            params.kernel.C,
            params.kernel.sigma0,
            params.kernel.tau_z,
            params.background.mu0,
        ]
    )
    return np.concatenate([head, params.background.gamma, pack_net_params(params.kernel.nets)])


def params_from_vector(template: ModelParams, theta: np.ndarray) -> ModelParams:
    theta = np.asarray(theta, dtype=float)
    L = len(template.background.gamma)
    C, sigma0, tau_z, mu0 = np.exp(theta[:4])
    gamma = theta[4:4 + L].copy()
    nets = unpack_net_params(template.kernel.nets, theta[4 + L:])
    kernel = replace(template.kernel, C=float(C), sigma0=float(sigma0), tau_z=float(tau_z), nets=nets)
    bgp = BackgroundParams(mu0=float(mu0), gamma=gamma, alpha_bw=template.background.alpha_bw)
    return ModelParams(kernel=kernel, background=bgp)


def make_initial_params(
    events: EventSequence,
    regions: RegionSet,
    grid: IntensityGrid,
    R: int = 3,
    H: int = 32,
    A: float = 0.35,
    c: float = 0.1,
    alpha_bw: float = 1.0,
    seed: int = 0,
) -> ModelParams:
    """Start near a homogeneous Poisson fit with small triggering."""
    rng = substream(seed, "init")
    nets = init_feature_net(R, H, c, regions.bbox, rng)
    n = max(len(events), 1)
    T = max(events.horizon, 1e-9)
    mu0 = 0.5 * n / (grid.area * T)
    kernel = KernelParams(C=0.1, sigma0=1.0, tau_z=1.0, nets=nets, A=A)
    bgp = BackgroundParams(
        mu0=mu0, gamma=np.zeros(len(regions.covariate_names)), alpha_bw=alpha_bw
    )
    return ModelParams(kernel=kernel, background=bgp)


class LikelihoodEvaluator:
    """Caches geometry-dependent quantities for repeated (ll, grad) calls.

    Safe to reuse across parameter values as long as the architecture,
    A, c and alpha_bw stay fixed (they do during fitting).
    """

    def __init__(self, events: EventSequence, regions: RegionSet, grid: IntensityGrid,
                 alpha_bw: float, window_mult: float = 5.0):
        self.events = events
        self.regions = regions
        self.grid = grid
        self.window_mult = window_mult
        self.xbar_events = bg.covariate_blend(events.locs, regions, alpha_bw) \
            if len(events) else np.empty((0, len(regions.covariate_names)))
        self.xbar_grid = bg.grid_covariate_blend(grid, regions, alpha_bw)
        self.alpha_bw = alpha_bw
        self._pair_window = None
        self._pairs = None

    def _pairs_for(self, window: float):
        if self._pair_window == window:
            return self._pairs
        t = self.events.times
        hi = np.searchsorted(t, t, side="left")
        lo = np.searchsorted(t, t - window, side="left")
        counts = hi - lo
        pi = np.repeat(np.arange(len(t)), counts)
        pj = np.concatenate(
            [np.arange(a, b) for a, b in zip(lo, hi)]
        ) if counts.sum() else np.empty(0, dtype=int)
        self._pair_window = window
        self._pairs = (pi, pj.astype(int))
        return self._pairs

    def _check(self, params: ModelParams):
        if params.background.alpha_bw != self.alpha_bw:
            raise ValueError("evaluator was built for a different alpha_bw")

    def loglik(self, params: ModelParams) -> float:
        return self._evaluate(params, want_grad=False)[0]

    def loglik_grad(self, params: ModelParams):
        return self._evaluate(params, want_grad=True)

    def _evaluate(self, params: ModelParams, want_grad: bool):
        self._check(params)
        kp, bgp = params.kernel, params.background
        C, s0, tau, mu0 = kp.C, kp.sigma0, kp.tau_z, bgp.mu0
        nets = kp.nets
        events = self.events
        n = len(events)
        T = events.horizon
        R = nets.R

        # Background at events and over the grid.
        exp_ev, over_ev = bg.clamped_exp(self.xbar_events @ bgp.gamma)
        mu_ev = bgp.mu0 + exp_ev
        bg_int, d_bg_mu0, d_bg_gamma = bg.background_integral_terms(
            self.xbar_grid, self.grid.area, T, bgp
        )

        trig, d_trig_C, d_trig_s0 = triggering_integral_gradients(events.times, T, C, s0)

        window = self.window_mult * s0
        pi, pj = self._pairs_for(window)
        P = len(pi)

        lam = mu_ev.copy()
        cache = net_forward_batch(nets, events.locs) if n else None
        if P:
            psi, wts = cache.psi, cache.weights
            Sig = covariance_from_focus(psi, kp.A, tau)  # (n,R,2,2)
            dt = events.times[pi] - events.times[pj]
            nu = C * np.exp(-(dt * dt) / (2.0 * s0 * s0))
            delta = events.locs[pi] - events.locs[pj]  # (P,2)
            ups = np.zeros(P)
            combo = []
            for r1 in range(R):
                for r2 in range(R):
                    a = Sig[pi, r1, 0, 0] + Sig[pj, r2, 0, 0]
                    b = Sig[pi, r1, 0, 1] + Sig[pj, r2, 0, 1]
                    d = Sig[pi, r1, 1, 1] + Sig[pj, r2, 1, 1]
                    det = a * d - b * b
                    quad = (
                        d * delta[:, 0] ** 2
                        - 2.0 * b * delta[:, 0] * delta[:, 1]
                        + a * delta[:, 1] ** 2
                    ) / det
                    G = np.exp(-0.5 * quad) / (2.0 * np.pi * np.sqrt(det))
                    ww = wts[pi, r1] * wts[pj, r2]
                    ups += ww * G
                    if want_grad:
                        combo.append((r1, r2, a, b, d, det, quad, G))
            lam += np.bincount(pi, weights=nu * ups, minlength=n)

        if np.any(lam <= 0) or not np.isfinite(lam).all():
            bad = int(np.flatnonzero(~np.isfinite(lam) | (lam <= 0))[0])
            raise LikelihoodError(f"non-finite or non-positive intensity at event {bad}")
        ll = float(np.sum(np.log(lam)) - trig - bg_int)
        if not np.isfinite(ll):
            raise LikelihoodError("non-finite log-likelihood")
        if not want_grad:
            return ll, None

        grad = np.zeros(params.n_free)
        inv_lam = 1.0 / lam
        L = len(bgp.gamma)

        # Background paths; clamped exponents are flat in the implemented
        # objective, so they contribute nothing to the gamma gradient.
        grad[3] = mu0 * float(inv_lam.sum()) - mu0 * d_bg_mu0
        if L:
            live_ev = np.where(over_ev, 0.0, exp_ev)
            grad[4:4 + L] = (inv_lam * live_ev) @ self.xbar_events - d_bg_gamma

        # Temporal-magnitude and temporal-scale paths.
        if P:
            e_pair = inv_lam[pi]  # d ll / d (nu*ups) per pair
            grad[0] = float(np.sum(e_pair * nu * ups)) - C * d_trig_C
            grad[1] = float(np.sum(e_pair * ups * nu * (dt * dt) / (s0 * s0))) - s0 * d_trig_s0
        else:
            grad[0] = -C * d_trig_C
            grad[1] = -s0 * d_trig_s0

        # Spatial paths: tau_z, focus points and weights at both pair ends.
        d_wts = np.zeros((n, R))
        d_Sig = np.zeros((n, R, 2, 2))
        g_logtau = 0.0
        if P:
            dl_dups = e_pair * nu
            for r1, r2, a, b, d, det, quad, G in combo:
                dl_dG = dl_dups * wts[pi, r1] * wts[pj, r2]
                d_wts[:, r1] += np.bincount(pi, weights=dl_dups * wts[pj, r2] * G, minlength=n)
                d_wts[:, r2] += np.bincount(pj, weights=dl_dups * wts[pi, r1] * G, minlength=n)

                # dG/dM = G (-1/2 M^-1 + 1/2 M^-1 dd^T M^-1); closed 2x2 inverse.
                ia = d / det
                ib = -b / det
                id_ = a / det
                mdx = ia * delta[:, 0] + ib * delta[:, 1]  # M^-1 delta
                mdy = ib * delta[:, 0] + id_ * delta[:, 1]
                coef = dl_dG * G
                dM00 = coef * 0.5 * (mdx * mdx - ia)
                dM01 = coef * 0.5 * (mdx * mdy - ib)
                dM11 = coef * 0.5 * (mdy * mdy - id_)
                g_logtau += 2.0 * float(
                    np.sum(dM00 * a + 2.0 * dM01 * b + dM11 * d)
                )
                for idx, r in ((pi, r1), (pj, r2)):
                    d_Sig[:, r, 0, 0] += np.bincount(idx, weights=dM00, minlength=n)
                    d_Sig[:, r, 0, 1] += np.bincount(idx, weights=dM01, minlength=n)
                    d_Sig[:, r, 1, 0] += np.bincount(idx, weights=dM01, minlength=n)
                    d_Sig[:, r, 1, 1] += np.bincount(idx, weights=dM11, minlength=n)
        grad[2] = g_logtau

        # Chain covariance sensitivities to the focus points.
        if n and nets.n_params:
            if P:
                psi = cache.psi
                px, py = psi[..., 0], psi[..., 1]
                p = px * px + py * py
                Q = np.sqrt(4.0 * kp.A**2 + p * p * np.pi**2) / (2.0 * np.pi)
                dQdp = p / (4.0 * Q)
                t2 = tau * tau
                strace = d_Sig[..., 0, 0] + d_Sig[..., 1, 1]
                sdiff = d_Sig[..., 0, 0] - d_Sig[..., 1, 1]
                soff = d_Sig[..., 0, 1] + d_Sig[..., 1, 0]
                d_psi = np.empty((n, R, 2))
                d_psi[..., 0] = t2 * (strace * dQdp * 2.0 * px + sdiff * px + soff * py)
                d_psi[..., 1] = t2 * (strace * dQdp * 2.0 * py - sdiff * py + soff * px)
            else:
                d_psi = np.zeros((n, R, 2))
            net_grads = net_gradient_batch(nets, cache, d_psi, d_wts)
            grad[4 + L:] = pack_net_grads(net_grads)

        return ll, grad


def conditional_intensity(t, s, history: EventSequence, params: ModelParams,
                          regions: RegionSet) -> float:
    """lambda(t, s) given the history of strictly earlier events."""
    if len(history) and history.times[-1] >= t:
        raise ValueError("history contains an event at or after the query time")
    model = NonstationaryHawkes(params, regions)
    return model.intensity(t, np.asarray(s, dtype=float), history.times, history.locs)


def log_likelihood(params: ModelParams, events: EventSequence, regions: RegionSet,
                   grid: IntensityGrid, window_mult: float = 5.0) -> float:
    ev = LikelihoodEvaluator(events, regions, grid, params.background.alpha_bw, window_mult)
    return ev.loglik(params)


def gradient(params: ModelParams, events: EventSequence, regions: RegionSet,
             grid: IntensityGrid, window_mult: float = 5.0) -> np.ndarray:
    ev = LikelihoodEvaluator(events, regions, grid, params.background.alpha_bw, window_mult)
    return ev.loglik_grad(params)[1]


@dataclass
class FitConfig:
    learning_rate: float = 0.1
    max_iters: int = 300
    tol: float = 1e-6
    patience: int = 10  # window, in iterations, for the relative-change test
    seed: int = 0
    grid_spacing: float = 0.05
    R: int = 3
    H: int = 32
    A: float = 0.35
    c: float = 0.1
    alpha_bw: float = 1.0
    window_mult: float = 5.0
    step_halving: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0 or self.tol <= 0:
            raise ValueError("learning rate and tolerance must be positive")


@dataclass
class FitResult:
    params: ModelParams
    trace: np.ndarray  # log-likelihood per iteration
    converged: bool
    grid: IntensityGrid


def fit(events: EventSequence, regions: RegionSet, config: FitConfig,
        grid: IntensityGrid = None, init: ModelParams = None) -> FitResult:
    """Full-batch gradient ascent with a constant learning rate.

    The step uses the per-event average gradient (grad / n), which keeps
    the paper-scale learning rate usable across dataset sizes without
    changing the maximizer.  Stops when the relative log-likelihood
    change over ``patience`` iterations drops below ``tol``.
    """
    if grid is None:
        grid = build_grid(regions, config.grid_spacing)
    if init is None:
        init = make_initial_params(
            events, regions, grid,
            R=config.R, H=config.H, A=config.A, c=config.c,
            alpha_bw=config.alpha_bw, seed=config.seed,
        )
    evaluator = LikelihoodEvaluator(
        events, regions, grid, config.alpha_bw, config.window_mult
    )
    n = max(len(events), 1)
    theta = params_to_vector(init)
    params = init
    trace = []
    converged = False
    for it in range(config.max_iters):
        try:
            ll, grad_vec = evaluator.loglik_grad(params)
        except FloatingPointError as exc:
            raise FitDivergence(
                f"likelihood became non-finite at iteration {it}; "
                "try a smaller learning rate"
            ) from exc
        trace.append(ll)
        if len(trace) > config.patience:
            ref = trace[-1 - config.patience]
            if abs(trace[-1] - ref) / max(1.0, abs(ref)) < config.tol:
                converged = True
                break
        step = (config.learning_rate / n) * grad_vec
        new_theta = theta + step
        if config.step_halving:
            scale = 1.0
            for _ in range(30):
                try:
                    candidate = params_from_vector(init, theta + scale * step)
                    evaluator.loglik(candidate)
                    break
                except (LikelihoodError, FloatingPointError):
                    scale *= 0.5
            new_theta = theta + scale * step
        theta = new_theta
        if not np.isfinite(theta).all():
            raise FitDivergence(
                f"parameters became non-finite at iteration {it}; "
                "try a smaller learning rate"
            )
        params = params_from_vector(init, theta)
    return FitResult(params=params, trace=np.array(trace), converged=converged, grid=grid)


class SeparableModelBase:
    """Shared evaluation core for models with k(t,t',s,s') = nu(dt)*ups(s,s').

    Subclasses provide ``background_at``, ``spatial_matrix``,
    ``temporal_decay``, ``trigger_window`` and ``trigger_peak``; this base
    supplies the pointwise conditional intensity used by the simulator
    and the intensity ops.
    """

    def intensity(self, t, s, times, locs, window: float = None) -> float:
        """lambda(t, s); full history sum unless a window is given."""
        s = np.asarray(s, dtype=float)
        times = np.asarray(times, dtype=float)
        mu = float(self.background_at(s.reshape(1, 2))[0])
        if len(times) == 0:
            return mu
        keep = times < t
        if window is not None:
            keep &= times > t - window
        if not keep.any():
            return mu
        nu = self.temporal_decay(t - times[keep])
        ups = self.spatial_matrix(s.reshape(1, 2), np.atleast_2d(locs)[keep])[0]
        return mu + float(nu @ ups)

    # Featurized spatial-kernel hooks: the default carries plain point
    # arrays; models with expensive per-location features override these
    # so the simulator can reuse source-side work across candidates.
    def source_features(self, locs):
        return np.atleast_2d(np.asarray(locs, dtype=float))

    def spatial_cross_features(self, feats_a, feats_b) -> np.ndarray:
        return self.spatial_matrix(feats_a, feats_b)

    def slice_features(self, feats, mask):
        return feats[mask]

    def concat_features(self, feats_a, feats_b):
        return np.vstack([feats_a, feats_b])

    def background_on_grid(self, grid) -> np.ndarray:
        """Background rate at every in-domain grid cell."""
        return self.background_at(grid.inside_centers)


class NonstationaryHawkes(SeparableModelBase):
    """Evaluation wrapper binding ModelParams to a region set.

    Implements the small protocol shared with the stationary baseline:
    background rates at points, the spatial kernel matrix, the temporal
    decay, the triggering window and the peak per-event contribution.
    """

    def __init__(self, params: ModelParams, regions: RegionSet, window_mult: float = 5.0):
        self.params = params
        self.regions = regions
        self.window_mult = window_mult

    def background_at(self, points) -> np.ndarray:
        blend = bg.covariate_blend(np.atleast_2d(points), self.regions, self.params.background.alpha_bw)
        return bg.background_on_blend(blend, self.params.background)

    def spatial_matrix(self, points, sources) -> np.ndarray:
        return spatial_kernel_matrix(points, sources, self.params.kernel)

    def temporal_decay(self, dt) -> np.ndarray:
        return temporal_kernel(dt, self.params.kernel.C, self.params.kernel.sigma0)

    def trigger_window(self) -> float:
        return self.window_mult * self.params.kernel.sigma0

    def trigger_peak(self) -> float:
        return self.params.kernel.C * spatial_kernel_upper_bound(self.params.kernel)

    def source_features(self, locs):
        return spatial_features(np.atleast_2d(locs), self.params.kernel)

    def spatial_cross_features(self, feats_a, feats_b) -> np.ndarray:
        return spatial_cross(feats_a, feats_b)

    def slice_features(self, feats, mask):
        from .kernel import SpatialFeatures

        return SpatialFeatures(feats.locs[mask], feats.weights[mask], feats.cov[mask])

    def concat_features(self, feats_a, feats_b):
        from .kernel import SpatialFeatures

        return SpatialFeatures(
            np.vstack([feats_a.locs, feats_b.locs]),
            np.vstack([feats_a.weights, feats_b.weights]),
            np.concatenate([feats_a.cov, feats_b.cov], axis=0),
        )

    def background_on_grid(self, grid) -> np.ndarray:
        blend = bg.grid_covariate_blend(grid, self.regions, self.params.background.alpha_bw)
        return bg.background_on_blend(blend, self.params.background)


def save_checkpoint(path, params: ModelParams, covariate_stats: CovariateStats = None,
                    meta: dict = None) -> None:
    nets = params.kernel.nets
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kernel": {
            "C": params.kernel.C,
            "sigma0": params.kernel.sigma0,
            "tau_z": params.kernel.tau_z,
            "A": params.kernel.A,
        },
        "background": {
            "mu0": params.background.mu0,
            "gamma": params.background.gamma.tolist(),
            "alpha_bw": params.background.alpha_bw,
        },
        "nets": {
            "R": nets.R,
            "H": nets.H,
            "c": nets.c,
            "bbox": [nets.lo.tolist(), nets.hi.tolist()],
            "blocks": [[a.tolist() for a in blk.arrays()] for blk in nets.blocks],
        },
    }
    if covariate_stats is not None:
        doc["covariates"] = {
            "names": list(covariate_stats.names),
            "means": covariate_stats.means.tolist(),
            "stds": covariate_stats.stds.tolist(),
        }
    if meta:
        doc["meta"] = meta
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)


def load_checkpoint(path):
    """Returns (ModelParams, full checkpoint dict)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    nd = doc["nets"]
    from .neural import NetBlock  # local to avoid a cycle at import time

    blocks = []
    for raw in nd["blocks"]:
        W1, b1, W2, b2, W3, b3 = (np.asarray(a, dtype=float) for a in raw)
        blocks.append(NetBlock(W1, b1, W2, b2, W3, b3))
    nets = FeatureNet(
        blocks=blocks, c=float(nd["c"]),
        lo=np.asarray(nd["bbox"][0], dtype=float),
        hi=np.asarray(nd["bbox"][1], dtype=float),
    )
    kd, bd = doc["kernel"], doc["background"]
    params = ModelParams(
        kernel=KernelParams(
            C=float(kd["C"]), sigma0=float(kd["sigma0"]), tau_z=float(kd["tau_z"]),
            nets=nets, A=float(kd["A"]),
        ),
        background=BackgroundParams(
            mu0=float(bd["mu0"]), gamma=np.asarray(bd["gamma"], dtype=float),
            alpha_bw=float(bd["alpha_bw"]),
        ),
    )
    return params, doc
