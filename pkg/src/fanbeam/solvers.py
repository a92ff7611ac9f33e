"""Model-based and unrolled reconstruction on top of a fitted operator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .fbp import FbpParams, fbp, fbp_adjoint
from .projector import OperatorParams, forward_project, unfiltered_backproject

Block = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass
class OperatorBundle:
    """The linear maps a reconstruction needs, plus an optional sinogram bias.

    ``forward`` is the bias-corrected ``A x - b``; ``linear_forward`` omits
    ``b`` and is the map whose transpose is ``adjoint``.
    """

    linear_forward: Callable[[np.ndarray], np.ndarray]
    adjoint: Callable[[np.ndarray], np.ndarray]
    fbp: Callable[[np.ndarray], np.ndarray]
    fbp_adjoint: Callable[[np.ndarray], np.ndarray]
    image_shape: tuple[int, int]
    sino_shape: tuple[int, int]
    bias: np.ndarray | None = None
    norm_est: dict[str, float] = field(default_factory=dict)

    def forward(self, x: np.ndarray) -> np.ndarray:
        ax = self.linear_forward(x)
        return ax if self.bias is None else ax - self.bias.astype(ax.dtype, copy=False)

    @classmethod
    def from_params(cls, p: OperatorParams, s_fbp: float = 1.0, bias: np.ndarray | None = None,
                    fbp_params: FbpParams | None = None) -> OperatorBundle:
        fp = fbp_params or FbpParams()
        fp = FbpParams(s_fbp=s_fbp, window=fp.window, pad=fp.pad)
        if bias is not None and np.shape(bias) != p.sino_shape:
            raise ValueError(f"bias shape {np.shape(bias)} does not match sinogram {p.sino_shape}")
        return cls(
            linear_forward=lambda x: forward_project(x, p),
            adjoint=lambda y: unfiltered_backproject(y, p),
            fbp=lambda y: fbp(y, p, fp),
            fbp_adjoint=lambda x: fbp_adjoint(x, p, fp),
            image_shape=p.image_shape,
            sino_shape=p.sino_shape,
            bias=None if bias is None else np.asarray(bias),
        )

    @classmethod
    def from_matrices(cls, a: np.ndarray, f: np.ndarray, image_shape: tuple[int, int],
                      sino_shape: tuple[int, int], bias: np.ndarray | None = None) -> OperatorBundle:
        """Dense toy bundle: ``a`` maps flattened images to flattened sinograms, ``f`` back."""
        a = np.asarray(a, dtype=np.float64)
        f = np.asarray(f, dtype=np.float64)
        n_img, n_sino = math.prod(image_shape), math.prod(sino_shape)
        if a.shape != (n_sino, n_img) or f.shape != (n_img, n_sino):
            raise ValueError("matrix shapes do not match the declared image/sinogram shapes")
        return cls(
            linear_forward=lambda x: (a @ np.ravel(x)).reshape(sino_shape),
            adjoint=lambda y: (a.T @ np.ravel(y)).reshape(image_shape),
            fbp=lambda y: (f @ np.ravel(y)).reshape(image_shape),
            fbp_adjoint=lambda x: (f.T @ np.ravel(x)).reshape(sino_shape),
            image_shape=tuple(image_shape),
            sino_shape=tuple(sino_shape),
            bias=None if bias is None else np.asarray(bias, dtype=np.float64).reshape(sino_shape),
        )


def dc_step(x: np.ndarray, y: np.ndarray, lam: float, ops: OperatorBundle) -> np.ndarray:
    """Data-consistency layer ``x - lam * FBP(A x - y)``."""
    if lam == 0:
        return x
    return x - lam * ops.fbp(ops.forward(x) - y)


@dataclass
class UnrolledModel:
    """``K`` enhancement blocks interleaved with data-consistency steps.

    Blocks map ``(image, memory)`` to ``(image, memory)``; ``memory`` has
    ``mem_channels`` image-shaped channels and starts at zero.
    """

    blocks: Sequence[Block]
    lambdas: Sequence[float]
    mem_channels: int = 0

    def __post_init__(self) -> None:
        if len(self.blocks) != len(self.lambdas):
            raise ValueError(f"{len(self.blocks)} blocks but {len(self.lambdas)} step sizes")
        if not all(math.isfinite(l) for l in self.lambdas):
            raise ValueError("step sizes must be finite")

    @property
    def K(self) -> int:
        return len(self.blocks)


def identity_block(x: np.ndarray, m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return x, m


def unrolled_reconstruct(y: np.ndarray, model: UnrolledModel, ops: OperatorBundle,
                         return_iterates: bool = False):
    x = ops.fbp(y)
    mem = np.zeros((model.mem_channels,) + x.shape, dtype=x.dtype)
    iterates = [x]
    for block, lam in zip(model.blocks, model.lambdas):
        x, mem = block(x, mem)
        x = dc_step(x, y, lam, ops)
        iterates.append(x)
    return (x, iterates) if return_iterates else x


def landweber_fbp(y: np.ndarray, lam: float, iters: int, ops: OperatorBundle,
                  return_iterates: bool = False):
    if iters < 0:
        raise ValueError("iters must be non-negative")
    x = ops.fbp(y)
    iterates = [x]
    for _ in range(iters):
        x = dc_step(x, y, lam, ops)
        iterates.append(x)
    return (x, iterates) if return_iterates else x


def operator_norm_estimate(ops: OperatorBundle, which: str = "A", iters: int = 200,
                           tol: float = 1e-12, seed: int = 0) -> float:
    """Largest singular value of ``A`` or ``FBP o A`` by power iteration."""
    if which == "A":
        normal = lambda v: ops.adjoint(ops.linear_forward(v))
    elif which in ("FBP∘A", "FBP*A", "FBPA"):
        normal = lambda v: ops.adjoint(ops.fbp_adjoint(ops.fbp(ops.linear_forward(v))))
        which = "FBP∘A"
    else:
        raise ValueError(f"unknown operator {which!r}")
    v = np.random.default_rng(seed).standard_normal(ops.image_shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = np.asarray(normal(v), dtype=np.float64)
        lam_new = float(np.vdot(v, w))
        nw = np.linalg.norm(w)
        if nw == 0:
            lam_new = 0.0
            break
        v = w / nw
        if abs(lam_new - lam) <= tol * abs(lam_new):
            lam = lam_new
            break
        lam = lam_new
    est = math.sqrt(max(lam, 0.0))
    ops.norm_est[which] = est
    return est


# --------------------------------------------------------------------------
# total-variation reconstruction
# --------------------------------------------------------------------------


def grad2d(x: np.ndarray) -> np.ndarray:
    """Forward differences with Neumann boundary, shape ``(2, ny, nx)``."""
    g = np.zeros((2,) + x.shape, dtype=x.dtype)
    g[0, :-1, :] = x[1:, :] - x[:-1, :]
    g[1, :, :-1] = x[:, 1:] - x[:, :-1]
    return g


def grad2d_adjoint(g: np.ndarray) -> np.ndarray:
    """Transpose of :func:`grad2d` (negative divergence)."""
    out = np.zeros(g.shape[1:], dtype=g.dtype)
    out[:-1, :] -= g[0, :-1, :]
    out[1:, :] += g[0, :-1, :]
    out[:, :-1] -= g[1, :, :-1]
    out[:, 1:] += g[1, :, :-1]
    return out


def tv_seminorm(x: np.ndarray) -> float:
    return float(np.abs(grad2d(x)).sum())


@dataclass
class TvResult:
    x: np.ndarray
    residual: list[float]  # ||A x_t - y|| per iteration
    objective: list[float]  # 0.5 ||A x_t - y||^2 + alpha TV(x_t)


def tv_reconstruct(y: np.ndarray, alpha: float, iters: int, ops: OperatorBundle,
                   x0: np.ndarray | None = None, ratio: float = 1.0,
                   norm_a: float | None = None,
                   callback: Callable[[int, np.ndarray], None] | None = None,
                   restart: int | None = None) -> TvResult:
    """Chambolle-Pock for ``min 0.5 ||A x - y||^2 + alpha * TV(x)``.

    ``A`` is rescaled to ``A / c`` with ``c = ||A|| / sqrt(8)`` so that it
    and the gradient have equal norm; the step sizes satisfy
    ``tau * sigma * (||A / c||^2 + 8) <= 1`` and ``ratio = tau / sigma``
    balances primal and dual progress. The iteration uses one forward and
    one adjoint projection.

    With ``restart`` the primal and dual iterates are reset to their
    running averages every ``restart`` iterations. The plain iteration
    circles the solution slowly on this problem; restarting from the
    average damps that and converges much faster.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    if restart is not None and restart < 1:
        raise ValueError(f"restart must be a positive iteration count, got {restart}")
    y = np.asarray(y, dtype=np.float64)
    if ops.bias is not None:
        y = y + ops.bias  # A x - b - y = A x - (y + b)
    if norm_a is None:
        norm_a = ops.norm_est.get("A") or operator_norm_estimate(ops, "A")
    if norm_a == 0:
        raise ValueError("operator norm is zero")
    c = norm_a / math.sqrt(8.0)
    big_l = math.sqrt((norm_a / c) ** 2 + 8.0)
    tau = math.sqrt(ratio) / big_l
    sigma = 1.0 / (math.sqrt(ratio) * big_l)
    yb = y / c

    x = np.zeros(ops.image_shape) if x0 is None else np.array(x0, dtype=np.float64)
    ax = np.asarray(ops.linear_forward(x), dtype=np.float64)
    ax_bar = ax
    x_bar = x
    p = np.zeros(ops.sino_shape)
    q = np.zeros((2,) + tuple(ops.image_shape))
    sums, count = [0.0, 0.0, 0.0, 0.0], 0
    residual, objective = [], []
    for it in range(iters):
        p = (p + sigma * (ax_bar / c - yb)) / (1.0 + sigma / c**2)
        q = np.clip(q + sigma * grad2d(x_bar), -alpha, alpha)
        x_new = x - tau * (np.asarray(ops.adjoint(p), dtype=np.float64) / c + grad2d_adjoint(q))
        ax_new = np.asarray(ops.linear_forward(x_new), dtype=np.float64)
        # A is linear, so the extrapolated point needs no extra projection
        x_bar = 2.0 * x_new - x
        ax_bar = 2.0 * ax_new - ax
        x, ax = x_new, ax_new
        if restart is not None:
            sums = [sums[0] + x, sums[1] + ax, sums[2] + p, sums[3] + q]
            count += 1
            if count == restart:
                # the averages are feasible (dual box constraints are convex)
                x, ax, p, q = (s / count for s in sums)
                x_bar, ax_bar = x, ax
                sums, count = [0.0, 0.0, 0.0, 0.0], 0
        r = float(np.linalg.norm(ax - y))
        residual.append(r)
        objective.append(0.5 * r * r + alpha * tv_seminorm(x))
        if callback is not None:
            callback(it, x)
    return TvResult(x, residual, objective)
