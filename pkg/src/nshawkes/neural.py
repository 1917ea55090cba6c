"""Location-to-focus-point feature networks with exact reverse-mode gradients.

Each of the R networks is a fully-connected 2 -> H -> H -> 3 map with
softplus hidden activations.  The three raw outputs are a 2-vector that a
radial squash maps into the disc of radius ``c`` (the focus point), and a
scalar that a softmax across the R networks turns into a weight.  All
gradients are hand-written; the finite-difference suite in the tests pins
them down.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

# Below this radius the squash factors switch to their series expansions.
_SQUASH_SERIES_RHO = 1e-3


@dataclass
class NetBlock:
    """Parameters of one 2 -> H -> H -> 3 network."""

    W1: np.ndarray  # (H, 2)
    b1: np.ndarray  # (H,)
    W2: np.ndarray  # (H, H)
    b2: np.ndarray  # (H,)
    W3: np.ndarray  # (3, H)
    b3: np.ndarray  # (3,)

    def arrays(self):
        return [self.W1, self.b1, self.W2, self.b2, self.W3, self.b3]

    def copy(self) -> "NetBlock":
        return NetBlock(*[a.copy() for a in self.arrays()])

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())


@dataclass
class FeatureNet:
    """R network copies plus the input rescaling and the focus bound c.

    Raw lon/lat locations are affinely mapped to [-1, 1]^2 (using the
    domain bounding box fixed at construction) before entering the
    networks, purely for conditioning.
    """

    blocks: list  # list[NetBlock], length R
    c: float
    lo: np.ndarray  # (2,) domain bbox corner
    hi: np.ndarray

    @property
    def R(self) -> int:
        return len(self.blocks)

    @property
    def H(self) -> int:
        return self.blocks[0].b1.size

    @property
    def n_params(self) -> int:
        return sum(b.size for b in self.blocks)

    def rescale(self, locs: np.ndarray) -> np.ndarray:
        locs = np.asarray(locs, dtype=float)
        mid = (self.lo + self.hi) / 2.0
        half = (self.hi - self.lo) / 2.0
        return (locs - mid) / half

    def copy(self) -> "FeatureNet":
        return FeatureNet(
            [b.copy() for b in self.blocks], self.c, self.lo.copy(), self.hi.copy()
        )


def init_feature_net(R: int, H: int, c: float, bbox, rng) -> FeatureNet:
    """Glorot-uniform weights, zero biases, R independent copies."""
    if R < 1:
        raise ValueError("need at least one feature network")
    lo, hi = (np.asarray(b, dtype=float) for b in bbox)

    def glorot(shape):
        a = np.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-a, a, size=shape)

    blocks = []
    for _ in range(R):
        blocks.append(
            NetBlock(
                W1=glorot((H, 2)),
                b1=np.zeros(H),
                W2=glorot((H, H)),
                b2=np.zeros(H),
                W3=glorot((3, H)),
                b3=np.zeros(3),
            )
        )
    return FeatureNet(blocks=blocks, c=c, lo=lo, hi=hi)


def zero_like_grads(net: FeatureNet):
    return [[np.zeros_like(a) for a in b.arrays()] for b in net.blocks]


def _softplus(x):
    return np.logaddexp(0.0, x)


def _squash_factors(rho):
    """tanh(rho)/rho and its derivative-over-rho, series-safe at 0."""
    small = rho < _SQUASH_SERIES_RHO
    rho_safe = np.where(small, 1.0, rho)
    th = np.tanh(rho_safe)
    f = np.where(small, 1.0 - rho**2 / 3.0 + 2.0 * rho**4 / 15.0, th / rho_safe)
    # q = f'(rho)/rho = (rho*(1-tanh^2) - tanh)/rho^3
    q_main = (rho_safe * (1.0 - th * th) - th) / rho_safe**3
    q = np.where(small, -2.0 / 3.0 + 8.0 * rho**2 / 15.0, q_main)
    return f, q


@dataclass
class ForwardCache:
    """Everything the backward pass needs, for a batch of locations."""

    Z: np.ndarray  # (n, 2) rescaled inputs
    per_net: list  # per r: dict of intermediates
    V: np.ndarray  # (n, R, 2) raw focus vectors
    psi: np.ndarray  # (n, R, 2) squashed focus points
    weights: np.ndarray  # (n, R) softmax weights
    f: np.ndarray  # (n, R) squash factor
    q: np.ndarray  # (n, R)


def net_forward_batch(net: FeatureNet, locs: np.ndarray) -> ForwardCache:
    """Evaluate all R networks at a batch of raw lon/lat locations."""
    Z = net.rescale(np.atleast_2d(locs))
    if not np.isfinite(Z).all():
        raise FloatingPointError("non-finite network input")
    n = len(Z)
    R = net.R
    V = np.empty((n, R, 2))
    wraw = np.empty((n, R))
    per_net = []
    for r, blk in enumerate(net.blocks):
        Z1 = Z @ blk.W1.T + blk.b1
        A1 = _softplus(Z1)
        Z2 = A1 @ blk.W2.T + blk.b2
        A2 = _softplus(Z2)
        out = A2 @ blk.W3.T + blk.b3
        V[:, r, :] = out[:, :2]
        wraw[:, r] = out[:, 2]
        per_net.append({"Z1": Z1, "A1": A1, "Z2": Z2, "A2": A2})
    if not np.isfinite(V).all() or not np.isfinite(wraw).all():
        raise FloatingPointError("non-finite network output")

    rho = np.linalg.norm(V, axis=2)
    f, q = _squash_factors(rho)
    psi = net.c * f[:, :, None] * V

    m = wraw.max(axis=1, keepdims=True)
    e = np.exp(wraw - m)
    weights = e / e.sum(axis=1, keepdims=True)
    return ForwardCache(Z=Z, per_net=per_net, V=V, psi=psi, weights=weights, f=f, q=q)


def net_forward(net: FeatureNet, s):
    """Single-location forward pass: (psi (R,2), weights (R,))."""
    cache = net_forward_batch(net, np.asarray(s, dtype=float).reshape(1, 2))
    return cache.psi[0], cache.weights[0]


def net_gradient_batch(net: FeatureNet, cache: ForwardCache, d_psi, d_weights):
    """Parameter gradients for upstream d(loss)/d(psi) and d(loss)/d(weights).

    d_psi is (n, R, 2), d_weights is (n, R); returns the same nested list
    structure as :func:`zero_like_grads`.
    """
    n, R = cache.weights.shape
    d_psi = np.asarray(d_psi, dtype=float).reshape(n, R, 2)
    d_weights = np.asarray(d_weights, dtype=float).reshape(n, R)

    # Softmax backward across the R weight heads.
    w = cache.weights
    inner = (w * d_weights).sum(axis=1, keepdims=True)
    d_wraw = w * (d_weights - inner)

    # Radial squash backward: psi = c * f(|V|) * V.
    V, f, q = cache.V, cache.f, cache.q
    vdot = (V * d_psi).sum(axis=2)
    d_V = net.c * (f[:, :, None] * d_psi + (q * vdot)[:, :, None] * V)

    grads = []
    for r, blk in enumerate(net.blocks):
        saved = cache.per_net[r]
        d_out = np.concatenate([d_V[:, r, :], d_wraw[:, r:r + 1]], axis=1)  # (n,3)
        A2, A1 = saved["A2"], saved["A1"]
        dW3 = d_out.T @ A2
        db3 = d_out.sum(axis=0)
        dA2 = d_out @ blk.W3
        dZ2 = dA2 * expit(saved["Z2"])
        dW2 = dZ2.T @ A1
        db2 = dZ2.sum(axis=0)
        dA1 = dZ2 @ blk.W2
        dZ1 = dA1 * expit(saved["Z1"])
        dW1 = dZ1.T @ cache.Z
        db1 = dZ1.sum(axis=0)
        grads.append([dW1, db1, dW2, db2, dW3, db3])
    return grads


def net_gradient(net: FeatureNet, s, d_psi, d_weights):
    """Single-location wrapper around :func:`net_gradient_batch`."""
    cache = net_forward_batch(net, np.asarray(s, dtype=float).reshape(1, 2))
    return net_gradient_batch(
        net, cache, np.asarray(d_psi).reshape(1, net.R, 2),
        np.asarray(d_weights).reshape(1, net.R),
    )


def pack_net_params(net: FeatureNet) -> np.ndarray:
    return np.concatenate([a.ravel() for b in net.blocks for a in b.arrays()])


def unpack_net_params(net: FeatureNet, vec: np.ndarray) -> FeatureNet:
    """New FeatureNet with parameters taken from a flat vector."""
    out = net.copy()
    pos = 0
    for blk in out.blocks:
        for a in blk.arrays():
            a[...] = vec[pos:pos + a.size].reshape(a.shape)
            pos += a.size
    if pos != len(vec):
        raise ValueError(f"parameter vector length {len(vec)}, expected {pos}")
    return out


def pack_net_grads(grads) -> np.ndarray:
    return np.concatenate([a.ravel() for blk in grads for a in blk])
