"""Small residual encoder-decoder (UNet-style) with memory channels.

Level ``l`` has ``base_channels * 2**l`` channels. Each encoder level is two
conv-GN-ReLU units followed (except at the bottom) by 2x2 mean pooling; each
decoder level upsamples by nearest-neighbour repetition, convolves,
concatenates the skip connection and applies two conv-GN-ReLU units. A final
3x3 convolution produces ``1 + c_mem`` channels: the image update and the
new memory.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import layers as L


@dataclass(frozen=True)
class NetConfig:
    scales: int = 2
    base_channels: int = 16
    c_mem: int = 5
    groups: int = 8
    kernel_size: int = 3
    residual: bool = True

    def __post_init__(self) -> None:
        if self.scales < 1:
            raise ValueError("scales must be at least 1")
        if self.base_channels % self.groups != 0:
            raise ValueError(f"base_channels {self.base_channels} not divisible by groups {self.groups}")
        if self.c_mem < 0:
            raise ValueError("c_mem must be non-negative")
        if self.kernel_size != 3:
            raise ValueError("only 3x3 kernels are implemented")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def to_dict(self) -> dict:
        return asdict(self)


def _unit(specs: list, name: str, cin: int, cout: int, norm: bool) -> None:
    specs.append((f"{name}.w", (3, 3, cin, cout)))
    specs.append((f"{name}.b", (cout,)))
    if norm:
        specs.append((f"{name}.gamma", (cout,)))
        specs.append((f"{name}.beta", (cout,)))


def layer_specs(cfg: NetConfig) -> list[tuple[str, tuple[int, ...]]]:
    specs: list = []
    cin = 1 + cfg.c_mem
    for l in range(cfg.scales):
        _unit(specs, f"enc{l}.a", cin, cfg.channels(l), True)
        _unit(specs, f"enc{l}.b", cfg.channels(l), cfg.channels(l), True)
        cin = cfg.channels(l)
    for l in reversed(range(cfg.scales - 1)):
        c = cfg.channels(l)
        _unit(specs, f"dec{l}.up", cfg.channels(l + 1), c, False)
        _unit(specs, f"dec{l}.a", 2 * c, c, True)
        _unit(specs, f"dec{l}.b", c, c, True)
    _unit(specs, "head", cfg.channels(0), 1 + cfg.c_mem, False)
    return specs


class NetParams:
    """Named parameter tensors backed by one flat vector."""

    def __init__(self, cfg: NetConfig, flat: np.ndarray | None = None, dtype=np.float64) -> None:
        self.cfg = cfg
        self.specs = layer_specs(cfg)
        self.offsets: dict[str, tuple[int, tuple[int, ...]]] = {}
        pos = 0
        for name, shape in self.specs:
            self.offsets[name] = (pos, shape)
            pos += math.prod(shape)
        self.size = pos
        if flat is None:
            flat = np.zeros(pos, dtype=dtype)
        flat = np.asarray(flat)
        if flat.shape != (pos,):
            raise ValueError(f"flat parameter vector has shape {flat.shape}, expected ({pos},)")
        self.flat = flat

    def __getitem__(self, name: str) -> np.ndarray:
        start, shape = self.offsets[name]
        return self.flat[start : start + math.prod(shape)].reshape(shape)

    def names(self) -> list[str]:
        return [n for n, _ in self.specs]

    def tensors(self) -> list[np.ndarray]:
        return [self[n] for n in self.names()]

    def copy(self) -> NetParams:
        return NetParams(self.cfg, self.flat.copy())

    def astype(self, dtype) -> NetParams:
        return NetParams(self.cfg, self.flat.astype(dtype))

    @classmethod
    def from_tensors(cls, cfg: NetConfig, tensors: list[np.ndarray]) -> NetParams:
        p = cls(cfg)
        if len(tensors) != len(p.specs):
            raise ValueError(f"expected {len(p.specs)} tensors, got {len(tensors)}")
        dtype = np.result_type(*tensors)
        p.flat = p.flat.astype(dtype)
        for (name, shape), t in zip(p.specs, tensors):
            if np.shape(t) != shape:
                raise ValueError(f"{name}: shape {np.shape(t)} != {shape}")
            p[name][...] = t
        return p


def init_params(cfg: NetConfig, rng: np.random.Generator, dtype=np.float64) -> NetParams:
    """He-normal convolutions, unit GN scale; the head starts at zero so the net is the identity."""
    p = NetParams(cfg, dtype=dtype)
    for name, shape in p.specs:
        if name.endswith(".w") and not name.startswith("head"):
            fan_in = 9 * shape[2]
            p[name][...] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith(".gamma"):
            p[name][...] = 1.0
    return p


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


def _to_nhwc(x: np.ndarray, mem: np.ndarray | None, cfg: NetConfig):
    single = x.ndim == 2
    xb = x[None] if single else x
    n, h, w = xb.shape
    if mem is None:
        mb = np.zeros((n, cfg.c_mem, h, w), dtype=xb.dtype)
    else:
        mb = mem[None] if single else mem
    if mb.shape != (n, cfg.c_mem, h, w):
        raise ValueError(f"memory shape {mb.shape} does not match ({n}, {cfg.c_mem}, {h}, {w})")
    step = 2 ** (cfg.scales - 1)
    if h % step or w % step:
        raise ValueError(f"image size {(h, w)} not divisible by {step}")
    inp = np.concatenate([xb[..., None], np.moveaxis(mb, 1, -1).astype(xb.dtype, copy=False)], axis=-1)
    return inp, single


def _cgr_forward(p, name, x, groups, dtype):
    z, xp = L.conv3x3_forward(x, p[f"{name}.w"].astype(dtype, copy=False), p[f"{name}.b"].astype(dtype, copy=False))
    zn, gcache = L.group_norm_forward(z, p[f"{name}.gamma"].astype(dtype, copy=False),
                                      p[f"{name}.beta"].astype(dtype, copy=False), groups)
    out, mask = L.relu_forward(zn)
    return out, (xp, gcache, mask)


def _cgr_backward(p, name, g, cache, grads, dtype):
    xp, gcache, mask = cache
    g = L.relu_backward(g, mask)
    g, grads[f"{name}.gamma"], grads[f"{name}.beta"] = L.group_norm_backward(
        g, p[f"{name}.gamma"].astype(dtype, copy=False), gcache)
    gx, grads[f"{name}.w"], grads[f"{name}.b"] = L.conv3x3_backward(g, xp, p[f"{name}.w"].astype(dtype, copy=False))
    return gx


def net_forward(p: NetParams, x: np.ndarray, mem: np.ndarray | None = None, keep_cache: bool = False):
    """Apply the network to ``x`` of shape (H, W) or (N, H, W).

    ``mem`` has shape (c_mem, H, W) or (N, c_mem, H, W) and defaults to
    zeros. Returns ``(image, memory)`` in the input layout, plus a cache for
    :func:`net_backward` when ``keep_cache`` is set.
    """
    cfg = p.cfg
    x = np.asarray(x)
    dtype = x.dtype
    inp, single = _to_nhwc(x, mem, cfg)
    caches: dict = {}
    skips = []
    h = inp
    for l in range(cfg.scales):
        h, caches[f"enc{l}.a"] = _cgr_forward(p, f"enc{l}.a", h, cfg.groups, dtype)
        h, caches[f"enc{l}.b"] = _cgr_forward(p, f"enc{l}.b", h, cfg.groups, dtype)
        skips.append(h)
        if l < cfg.scales - 1:
            h = L.mean_pool2_forward(h)
    for l in reversed(range(cfg.scales - 1)):
        u = L.upsample2_forward(h)
        u, caches[f"dec{l}.up"] = L.conv3x3_forward(u, p[f"dec{l}.up.w"].astype(dtype, copy=False),
                                                    p[f"dec{l}.up.b"].astype(dtype, copy=False))
        h = np.concatenate([skips[l], u], axis=-1)
        h, caches[f"dec{l}.a"] = _cgr_forward(p, f"dec{l}.a", h, cfg.groups, dtype)
        h, caches[f"dec{l}.b"] = _cgr_forward(p, f"dec{l}.b", h, cfg.groups, dtype)
    out, caches["head"] = L.conv3x3_forward(h, p["head.w"].astype(dtype, copy=False), p["head.b"].astype(dtype, copy=False))
    img = out[..., 0] + inp[..., 0] if cfg.residual else out[..., 0].copy()
    new_mem = np.moveaxis(out[..., 1:], -1, 1)
    if single:
        img, new_mem = img[0], new_mem[0]
    if keep_cache:
        return img, new_mem, (caches, single, dtype)
    return img, new_mem


def net_backward(p: NetParams, cache, g_img: np.ndarray, g_mem: np.ndarray | None = None):
    """Reverse pass: returns ``(param_grad_flat, grad_x, grad_mem_in)``."""
    cfg = p.cfg
    caches, single, dtype = cache
    g_img = np.asarray(g_img, dtype=dtype)
    if single:
        g_img = g_img[None]
        g_mem = None if g_mem is None else g_mem[None]
    n, hh, ww = g_img.shape
    g_out = np.zeros((n, hh, ww, 1 + cfg.c_mem), dtype=dtype)
    g_out[..., 0] = g_img
    if g_mem is not None:
        g_out[..., 1:] = np.moveaxis(g_mem, 1, -1)
    grads: dict = {}
    g, grads["head.w"], grads["head.b"] = L.conv3x3_backward(g_out, caches["head"], p["head.w"].astype(dtype, copy=False))
    g_skips: dict = {}
    for l in range(cfg.scales - 1):
        g = _cgr_backward(p, f"dec{l}.b", g, caches[f"dec{l}.b"], grads, dtype)
        g = _cgr_backward(p, f"dec{l}.a", g, caches[f"dec{l}.a"], grads, dtype)
        c = cfg.channels(l)
        g_skips[l], gu = g[..., :c], g[..., c:]
        gu, grads[f"dec{l}.up.w"], grads[f"dec{l}.up.b"] = L.conv3x3_backward(
            gu, caches[f"dec{l}.up"], p[f"dec{l}.up.w"].astype(dtype, copy=False))
        g = L.upsample2_backward(gu)
    for l in reversed(range(cfg.scales)):
        if l < cfg.scales - 1:
            g = L.mean_pool2_backward(g) + g_skips[l]
        g = _cgr_backward(p, f"enc{l}.b", g, caches[f"enc{l}.b"], grads, dtype)
        g = _cgr_backward(p, f"enc{l}.a", g, caches[f"enc{l}.a"], grads, dtype)
    g_x = g[..., 0]
    if cfg.residual:
        g_x = g_x + g_img
    g_mem_in = np.moveaxis(g[..., 1:], -1, 1)
    flat = np.concatenate([np.ravel(grads[name]) for name in p.names()]).astype(p.flat.dtype)
    if single:
        g_x, g_mem_in = g_x[0], g_mem_in[0]
    return flat, g_x, g_mem_in


def net_gradient(p: NetParams, batch: list[tuple[np.ndarray, np.ndarray]], mu: float = 0.0):
    """Loss ``(1/B) sum ||Net(u) - x||^2 + mu ||theta||^2`` and its gradient.

    ``batch`` holds ``(input image, target image)`` pairs; memory starts at zero.
    """
    if not batch:
        raise ValueError("empty batch")
    u = np.stack([b[0] for b in batch])
    t = np.stack([b[1] for b in batch]).astype(u.dtype, copy=False)
    out, _, cache = net_forward(p, u, keep_cache=True)
    r = out - t
    m = len(batch)
    loss = float(np.vdot(r, r)) / m + mu * float(np.vdot(p.flat, p.flat))
    grad, _, _ = net_backward(p, cache, (2.0 / m) * r)
    return loss, grad + 2.0 * mu * p.flat
