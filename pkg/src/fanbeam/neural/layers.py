"""Layer primitives with explicit backward passes.

Activations use NHWC layout. Each ``*_forward`` returns its output and a
cache; the matching ``*_backward`` maps the output gradient (and cache) to
input and parameter gradients.
"""

from __future__ import annotations

import numpy as np


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """'Same' 3x3 convolution (cross-correlation) with zero padding.

    ``x``: (N, H, W, Cin); ``w``: (3, 3, Cin, Cout); ``b``: (Cout,).
    Computed as nine shifted matrix products over a padded view.
    """
    n, h, wd, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.empty((n, h, wd, w.shape[3]), dtype=x.dtype)
    out[...] = b
    for dy in range(3):
        for dx in range(3):
            out += np.matmul(xp[:, dy : dy + h, dx : dx + wd, :], w[dy, dx])
    return out, xp


def conv3x3_backward(g: np.ndarray, xp: np.ndarray, w: np.ndarray):
    n, h, wd, cout = g.shape
    cin = xp.shape[3]
    gw = np.empty_like(w)
    gxp = np.zeros_like(xp)
    g2 = g.reshape(-1, cout)
    for dy in range(3):
        for dx in range(3):
            patch = xp[:, dy : dy + h, dx : dx + wd, :]
            gw[dy, dx] = np.ascontiguousarray(patch).reshape(-1, cin).T @ g2
            gxp[:, dy : dy + h, dx : dx + wd, :] += np.matmul(g, w[dy, dx].T)
    gb = g2.sum(axis=0)
    return gxp[:, 1:-1, 1:-1, :], gw, gb


def group_norm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, groups: int, eps: float = 1e-5):
    n, h, w, c = x.shape
    xg = x.reshape(n, h, w, groups, c // groups)
    mu = xg.mean(axis=(1, 2, 4), keepdims=True)
    var = xg.var(axis=(1, 2, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, h, w, c)
    return xhat * gamma + beta, (xhat, inv, groups)


def group_norm_backward(g: np.ndarray, gamma: np.ndarray, cache):
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    xhat, inv, groups = cache
    n, h, w, c = g.shape
    ggamma = (g * xhat).sum(axis=(0, 1, 2))
    gbeta = g.sum(axis=(0, 1, 2))
    gx = (g * gamma).reshape(n, h, w, groups, c // groups)
    xh = xhat.reshape(n, h, w, groups, c // groups)
    m1 = gx.mean(axis=(1, 2, 4), keepdims=True)
    m2 = (gx * xh).mean(axis=(1, 2, 4), keepdims=True)
    return (inv * (gx - m1 - xh * m2)).reshape(n, h, w, c), ggamma, gbeta


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), x > 0


def relu_backward(g: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return g * mask


def mean_pool2_forward(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def mean_pool2_backward(g: np.ndarray) -> np.ndarray:
    return 0.25 * upsample2_forward(g)


def upsample2_forward(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2_backward(g: np.ndarray) -> np.ndarray:
    n, h, w, c = g.shape
    return g.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))
