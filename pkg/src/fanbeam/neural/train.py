"""Training pipelines: post-processing net, unrolled network, extension and ensembles.

All optimisation runs on a flat parameter vector with :class:`~fanbeam.optim.Adam`.
A fixed seed drives initialisation and batch order, so runs are repeatable.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..optim import Adam
from ..solvers import OperatorBundle, UnrolledModel, operator_norm_estimate, unrolled_reconstruct
from ..tensor_io import DatasetManifest, read_tensor, write_tensor
from .net import NetConfig, NetParams, init_params, net_backward, net_forward, net_gradient

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS_K4 = (1.1, 1.3, 1.4, 0.08)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 2
    lr: float = 8e-5
    weight_decay: float = 1e-4
    restart_epochs: tuple[int, ...] = (50,)
    seed: int = 0
    weight_sharing: bool = False
    max_train: int | None = None
    max_val: int | None = None
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        self.restart_epochs = tuple(int(e) for e in self.restart_epochs)

    @classmethod
    def postprocessing(cls, **kw) -> TrainConfig:
        """Defaults of the post-processing stage (batch 4, lr 2e-4, decay 1e-3)."""
        base = dict(batch_size=4, lr=2e-4, weight_decay=1e-3, restart_epochs=())
        base.update(kw)
        return cls(**base)


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append(row)

    def to_csv(self, path: str | Path) -> None:
        if not self.rows:
            Path(path).write_text("")
            return
        keys = list(self.rows[0])
        lines = [",".join(keys)] + [",".join(repr(r[k]) for k in keys) for r in self.rows]
        Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# generic Adam loop with restarts, best-validation selection and checkpoints
# --------------------------------------------------------------------------


@dataclass
class LoopState:
    theta: np.ndarray
    opt: Adam
    epoch: int
    best_theta: np.ndarray
    best_val: float
    history: History
    rng: np.random.Generator

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_tensor(d / "theta.ctt", self.theta)
        write_tensor(d / "best_theta.ctt", self.best_theta)
        write_tensor(d / "adam_m.ctt", self.opt.m)
        write_tensor(d / "adam_v.ctt", self.opt.v)
        doc = {
            "epoch": self.epoch,
            "best_val": self.best_val,
            "adam": {"lr": self.opt.lr, "betas": [self.opt.beta1, self.opt.beta2], "eps": self.opt.eps, "t": self.opt.t},
            "rng": self.rng.bit_generator.state,
            "history": self.history.rows,
        }
        (d / "state.json").write_text(json.dumps(doc, indent=2))

    @classmethod
    def load(cls, directory: str | Path) -> LoopState:
        d = Path(directory)
        doc = json.loads((d / "state.json").read_text())
        theta = read_tensor(d / "theta.ctt")
        opt = Adam(theta.size, lr=doc["adam"]["lr"])
        opt.load_state_dict({**doc["adam"], "m": read_tensor(d / "adam_m.ctt"), "v": read_tensor(d / "adam_v.ctt")})
        rng = np.random.default_rng()
        rng.bit_generator.state = doc["rng"]
        return cls(theta, opt, int(doc["epoch"]), read_tensor(d / "best_theta.ctt"),
                   float(doc["best_val"]), History(doc["history"]), rng)


def _run_loop(
    theta0: np.ndarray,
    n_train: int,
    loss_grad: Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]],
    val_loss: Callable[[np.ndarray], float],
    cfg: TrainConfig,
    resume: LoopState | None = None,
    checkpoint: Callable[[LoopState], None] | None = None,
    select_best: bool = True,
) -> LoopState:
    if n_train < 1:
        raise ValueError("empty training split")
    if resume is None:
        theta = theta0.astype(np.float64).copy()
        state = LoopState(theta, Adam(theta.size, lr=cfg.lr), 0, theta.copy(), val_loss(theta), History(),
                          np.random.default_rng([cfg.seed, 2]))
        state.history.add(epoch=0, train_loss=float("nan"), val_loss=state.best_val)
    else:
        state = resume
    while state.epoch < cfg.epochs:
        if state.epoch in cfg.restart_epochs:
            state.opt = Adam(state.theta.size, lr=cfg.lr)
        order = state.rng.permutation(n_train)
        total = 0.0
        for start in range(0, n_train, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grad = loss_grad(state.theta, idx)
            state.opt.step(state.theta, grad)
            total += loss * len(idx)
        state.epoch += 1
        v = val_loss(state.theta)
        state.history.add(epoch=state.epoch, train_loss=total / n_train, val_loss=v)
        log.info("epoch %d: train %.6e  val %.6e", state.epoch, total / n_train, v)
        if v <= state.best_val or not select_best:
            state.best_val, state.best_theta = v, state.theta.copy()
        if checkpoint is not None:
            checkpoint(state)
    return state


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


def _records(manifest: DatasetManifest, split: str, limit: int | None):
    recs = manifest.split(split)
    if limit is not None:
        recs = recs[:limit]
    return recs


def load_split(manifest: DatasetManifest, split: str, ops: OperatorBundle | None = None,
               limit: int | None = None, dtype=np.float32):
    """Stacked ``(fbp_inputs, targets, sinograms)`` of a split.

    FBP inputs come from ``ops`` when given, otherwise from the stored files.
    """
    recs = _records(manifest, split, limit)
    if not recs:
        raise ValueError(f"split {split!r} is empty")
    xs, ys, us = [], [], []
    for r in recs:
        x, y = manifest.load_pair(r)
        if ops is not None:
            u = ops.fbp(y)
        elif r.fbp is not None:
            u = read_tensor(manifest.path(r.fbp))
        else:
            raise ValueError(f"record {r.id} has no stored FBP and no operator was given")
        xs.append(x)
        ys.append(y)
        us.append(u)
    cast = lambda a: np.stack(a).astype(dtype)
    return cast(us), cast(xs), cast(ys)


# --------------------------------------------------------------------------
# post-processing network
# --------------------------------------------------------------------------


def _sq_loss(p: NetParams, u: np.ndarray, t: np.ndarray, chunk: int = 4) -> float:
    total = 0.0
    for s in range(0, len(u), chunk):
        out, _ = net_forward(p, u[s : s + chunk])
        total += float(np.sum(np.square(out.astype(np.float64) - t[s : s + chunk])))
    return total / len(u)


def train_postprocessing(
    manifest: DatasetManifest | tuple,
    net_cfg: NetConfig,
    cfg: TrainConfig,
    ops: OperatorBundle | None = None,
    resume: LoopState | None = None,
    checkpoint: Callable[[LoopState], None] | None = None,
) -> tuple[NetParams, History]:
    """Fit ``Net(FBP(y)) ~ x``; returns the best-validation parameters.

    ``manifest`` may also be a pre-loaded ``((u_train, x_train), (u_val, x_val))``.
    """
    dtype = np.dtype(cfg.dtype)
    if isinstance(manifest, DatasetManifest):
        u_tr, x_tr, _ = load_split(manifest, "train", ops, cfg.max_train, dtype)
        u_va, x_va, _ = load_split(manifest, "val", ops, cfg.max_val, dtype)
    else:
        (u_tr, x_tr), (u_va, x_va) = manifest
    p0 = init_params(net_cfg, np.random.default_rng([cfg.seed, 1]))

    def loss_grad(theta, idx):
        p = NetParams(net_cfg, theta)
        return net_gradient(p, [(u_tr[i], x_tr[i]) for i in idx], cfg.weight_decay)

    def val_loss(theta):
        return _sq_loss(NetParams(net_cfg, theta), u_va, x_va)

    state = _run_loop(p0.flat, len(u_tr), loss_grad, val_loss, cfg, resume, checkpoint)
    return NetParams(net_cfg, state.best_theta.copy()), state.history


# --------------------------------------------------------------------------
# unrolled network
# --------------------------------------------------------------------------


@dataclass
class ItNet:
    """Unrolled network: ``K`` blocks drawing on shared or separate parameter sets.

    ``tie[k]`` is the index into ``sets`` used by block ``k``; frozen sets
    and step sizes are excluded from training.
    """

    cfg: NetConfig
    sets: list[NetParams]
    tie: list[int]
    lambdas: np.ndarray
    frozen_sets: frozenset = frozenset()
    frozen_lambdas: frozenset = frozenset()
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64).copy()
        if len(self.tie) != self.lambdas.size:
            raise ValueError(f"{len(self.tie)} blocks but {self.lambdas.size} step sizes")
        if self.K < 1:
            raise ValueError("an unrolled network needs K >= 1")
        if any(not 0 <= t < len(self.sets) for t in self.tie):
            raise ValueError("tie map refers to a missing parameter set")

    @property
    def K(self) -> int:
        return len(self.tie)

    @property
    def weight_sharing(self) -> bool:
        return len(set(self.tie)) == 1

    def block_params(self, k: int) -> NetParams:
        return self.sets[self.tie[k]]

    def as_model(self, dtype=np.float32) -> UnrolledModel:
        def make(p: NetParams):
            def block(x, m):
                return net_forward(p, np.asarray(x, dtype=dtype), np.asarray(m, dtype=dtype))
            return block
        return UnrolledModel([make(self.block_params(k)) for k in range(self.K)],
                             [float(l) for l in self.lambdas], self.cfg.c_mem)

    def reconstruct(self, y: np.ndarray, ops: OperatorBundle, return_iterates: bool = False):
        return unrolled_reconstruct(np.asarray(y, dtype=np.float32), self.as_model(), ops, return_iterates)

    # flat view of the trainable parameters ---------------------------------

    def _trainable(self) -> tuple[list[int], list[int]]:
        sets = [i for i in range(len(self.sets)) if i not in self.frozen_sets]
        lams = [k for k in range(self.K) if k not in self.frozen_lambdas]
        return sets, lams

    def pack(self) -> np.ndarray:
        sets, lams = self._trainable()
        return np.concatenate([self.sets[i].flat for i in sets] + [self.lambdas[lams]])

    def unpack(self, theta: np.ndarray) -> ItNet:
        sets, lams = self._trainable()
        out = self.copy()
        pos = 0
        for i in sets:
            n = out.sets[i].size
            out.sets[i] = NetParams(self.cfg, theta[pos : pos + n].copy())
            pos += n
        out.lambdas[lams] = theta[pos : pos + len(lams)]
        return out

    def copy(self) -> ItNet:
        return ItNet(self.cfg, [s.copy() for s in self.sets], list(self.tie), self.lambdas.copy(),
                     self.frozen_sets, self.frozen_lambdas, dict(self.provenance))

    # serialisation -----------------------------------------------------------

    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for i, s in enumerate(self.sets):
            name = f"params_{i}.ctt"
            write_tensor(d / name, s.flat)
            files.append(name)
        doc = {
            "kind": "itnet",
            "net_config": self.cfg.to_dict(),
            "param_files": files,
            "tie": self.tie,
            "lambdas": [float(l) for l in self.lambdas],
            "frozen_sets": sorted(self.frozen_sets),
            "frozen_lambdas": sorted(self.frozen_lambdas),
            "provenance": self.provenance,
        }
        path = d / "model.json"
        path.write_text(json.dumps(doc, indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> ItNet:
        path = Path(path)
        if path.is_dir():
            path = path / "model.json"
        doc = json.loads(path.read_text())
        if doc.get("kind") != "itnet":
            raise ValueError(f"{path} is not an unrolled-network checkpoint")
        cfg = NetConfig(**doc["net_config"])
        sets = [NetParams(cfg, read_tensor(path.parent / f)) for f in doc["param_files"]]
        return cls(cfg, sets, list(doc["tie"]), np.array(doc["lambdas"]), frozenset(doc["frozen_sets"]),
                   frozenset(doc["frozen_lambdas"]), doc.get("provenance", {}))


def save_net(directory: str | Path, p: NetParams, provenance: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "params.ctt", p.flat)
    doc = {"kind": "net", "net_config": p.cfg.to_dict(), "param_file": "params.ctt",
           "tensors": [[n, list(s)] for n, s in p.specs], "provenance": provenance or {}}
    path = d / "model.json"
    path.write_text(json.dumps(doc, indent=2))
    return path


def load_net(path: str | Path) -> NetParams:
    path = Path(path)
    if path.is_dir():
        path = path / "model.json"
    doc = json.loads(path.read_text())
    if doc.get("kind") != "net":
        raise ValueError(f"{path} is not a network checkpoint")
    return NetParams(NetConfig(**doc["net_config"]), read_tensor(path.parent / doc["param_file"]))


def _prefix_state(model: ItNet, u: np.ndarray, y: np.ndarray, ops: OperatorBundle, n_fixed: int):
    """Run the first ``n_fixed`` (frozen) blocks once; returns ``(x, mem)``."""
    x = u.copy()
    mem = np.zeros((len(u), model.cfg.c_mem) + u.shape[1:], dtype=u.dtype)
    for k in range(n_fixed):
        x, mem = net_forward(model.block_params(k), x, mem)
        for i in range(len(x)):
            x[i] = x[i] - model.lambdas[k] * ops.fbp(ops.forward(x[i]) - y[i])
    return x, mem


def _frozen_prefix(model: ItNet) -> int:
    n = 0
    while n < model.K and model.tie[n] in model.frozen_sets and n in model.frozen_lambdas:
        n += 1
    return n


def itnet_loss_grad(model: ItNet, x_in: np.ndarray, mem_in: np.ndarray, y: np.ndarray,
                    target: np.ndarray, ops: OperatorBundle, mu: float, start: int = 0):
    """Loss and gradient w.r.t. ``model.pack()`` for blocks ``start..K-1``."""
    b = len(x_in)
    x, mem = x_in, mem_in
    caches, dirs = [], []
    for k in range(start, model.K):
        x, mem, cache = net_forward(model.block_params(k), x, mem, keep_cache=True)
        d = np.stack([ops.fbp(ops.forward(x[i]) - y[i]) for i in range(b)])
        x = x - model.lambdas[k] * d
        caches.append(cache)
        dirs.append(d)
    r = x.astype(np.float64) - target
    sets, lams = model._trainable()
    loss = float(np.vdot(r, r)) / b + mu * sum(float(np.vdot(model.sets[i].flat, model.sets[i].flat)) for i in sets)
    g = ((2.0 / b) * r).astype(x.dtype)
    g_mem = np.zeros_like(mem)
    g_sets = {i: np.zeros(model.sets[i].size) for i in sets}
    g_lam = np.zeros(model.K)
    for k in reversed(range(start, model.K)):
        d = dirs[k - start]
        g_lam[k] = -float(np.vdot(g.astype(np.float64), d))
        lam = model.lambdas[k]
        if lam != 0:
            # transpose of x -> x - lam * FBP(A x - b - y) is g -> g - lam * A^T FBP^T g
            g = g - lam * np.stack([ops.adjoint(ops.fbp_adjoint(g[i])) for i in range(b)]).astype(g.dtype)
        gp, g, g_mem = net_backward(model.block_params(k), caches[k - start], g, g_mem)
        t = model.tie[k]
        if t in g_sets:
            g_sets[t] += gp
    grad = np.concatenate([g_sets[i] + 2.0 * mu * model.sets[i].flat for i in sets] + [g_lam[lams]])
    return loss, grad


def _itnet_val_loss(model: ItNet, x_in, mem_in, y, target, ops, start, chunk=4) -> float:
    total = 0.0
    for s in range(0, len(x_in), chunk):
        x, mem = x_in[s : s + chunk], mem_in[s : s + chunk]
        for k in range(start, model.K):
            x, mem = net_forward(model.block_params(k), x, mem)
            d = np.stack([ops.fbp(ops.forward(x[i]) - y[s + i]) for i in range(len(x))])
            x = x - model.lambdas[k] * d
        total += float(np.sum(np.square(x.astype(np.float64) - target[s : s + chunk])))
    return total / len(x_in)


def _fit_itnet(model: ItNet, train, val, ops: OperatorBundle, cfg: TrainConfig,
               resume: LoopState | None = None, checkpoint=None) -> tuple[ItNet, History]:
    (u_tr, x_tr, y_tr), (u_va, x_va, y_va) = train, val
    start = _frozen_prefix(model)
    xin_tr, min_tr = _prefix_state(model, u_tr, y_tr, ops, start)
    xin_va, min_va = _prefix_state(model, u_va, y_va, ops, start)

    def loss_grad(theta, idx):
        m = model.unpack(theta)
        return itnet_loss_grad(m, xin_tr[idx], min_tr[idx], y_tr[idx], x_tr[idx], ops, cfg.weight_decay, start)

    def val_loss(theta):
        return _itnet_val_loss(model.unpack(theta), xin_va, min_va, y_va, x_va, ops, start)

    state = _run_loop(model.pack(), len(u_tr), loss_grad, val_loss, cfg, resume, checkpoint)
    return model.unpack(state.best_theta), state.history


def default_lambdas(K: int) -> tuple[float, ...]:
    if K == 4:
        return DEFAULT_LAMBDAS_K4
    return tuple(1.0 for _ in range(K))


def normalized_lambdas(K: int, ops: OperatorBundle, iters: int = 30) -> tuple[float, ...]:
    """Default step sizes divided by ``||FBP o A||``.

    The defaults assume an FBP that nearly inverts ``A``; on a finely sampled
    detector ``||FBP o A||`` is well above 1 and the undivided steps make the
    data-consistency iteration expand the error.
    """
    norm = ops.norm_est.get("FBP∘A") or operator_norm_estimate(ops, "FBP∘A", iters=iters)
    return tuple(l / max(norm, 1.0) for l in default_lambdas(K))


def build_itnet(net_cfg: NetConfig, K: int, cfg: TrainConfig, pretrained: NetParams | None = None,
                lambdas_init: Sequence[float] | None = None) -> ItNet:
    if K < 1:
        raise ValueError("K must be at least 1")
    lambdas = np.array(lambdas_init if lambdas_init is not None else default_lambdas(K), dtype=np.float64)
    n_sets = 1 if cfg.weight_sharing else K
    rng = np.random.default_rng([cfg.seed, 1])
    if pretrained is not None:
        if pretrained.cfg != net_cfg:
            raise ValueError("pretrained network configuration differs from net_cfg")
        sets = [pretrained.copy() for _ in range(n_sets)]
    else:
        sets = [init_params(net_cfg, rng) for _ in range(n_sets)]
    tie = [0] * K if cfg.weight_sharing else list(range(K))
    return ItNet(net_cfg, sets, tie, lambdas,
                 provenance={"pretrained": pretrained is not None, "seed": cfg.seed})


def train_unrolled(
    manifest: DatasetManifest | tuple,
    ops: OperatorBundle,
    net_cfg: NetConfig,
    K: int,
    cfg: TrainConfig,
    pretrained: NetParams | None = None,
    lambdas_init: Sequence[float] | None = None,
    resume: LoopState | None = None,
    checkpoint=None,
) -> tuple[ItNet, History]:
    """Train blocks and step sizes jointly through the unrolled reconstruction.

    ``manifest`` may also be pre-loaded ``((u, x, y) train, (u, x, y) val)``
    stacks where ``u`` is the FBP of ``y`` under ``ops``.
    """
    model = build_itnet(net_cfg, K, cfg, pretrained, lambdas_init)
    if isinstance(manifest, DatasetManifest):
        dtype = np.dtype(cfg.dtype)
        train = load_split(manifest, "train", ops, cfg.max_train, dtype)
        val = load_split(manifest, "val", ops, cfg.max_val, dtype)
    else:
        train, val = manifest
    trained, hist = _fit_itnet(model, train, val, ops, cfg, resume, checkpoint)
    trained.frozen_sets, trained.frozen_lambdas = frozenset(), frozenset()
    return trained, hist


def extend_model(model: ItNet, allow_any_k: bool = False) -> ItNet:
    """K=4 -> K=5: block 5 copies block 4, steps become (.., 1.0, 0.1), blocks 1-3 frozen."""
    if model.K != 4 and not allow_any_k:
        raise ValueError(f"extension expects a K=4 model, got K={model.K}")
    K = model.K
    head_sets = sorted({model.tie[k] for k in range(K - 1)})
    remap = {old: new for new, old in enumerate(head_sets)}
    sets = [model.sets[i].copy() for i in head_sets]
    last = model.block_params(K - 1)
    sets += [last.copy(), last.copy()]
    tie = [remap[model.tie[k]] for k in range(K - 1)] + [len(head_sets), len(head_sets) + 1]
    lambdas = np.concatenate([model.lambdas[: K - 1], [1.0, 0.1]])
    return ItNet(model.cfg, sets, tie, lambdas, frozenset(range(len(head_sets))), frozenset(range(K - 1)),
                 {**model.provenance, "extended_from_K": K})


def extend_and_finetune(model: ItNet, manifest: DatasetManifest | tuple, ops: OperatorBundle,
                        cfg: TrainConfig, allow_any_k: bool = False, resume=None,
                        checkpoint=None) -> tuple[ItNet, History]:
    ext = extend_model(model, allow_any_k)
    if isinstance(manifest, DatasetManifest):
        dtype = np.dtype(cfg.dtype)
        train = load_split(manifest, "train", ops, cfg.max_train, dtype)
        val = load_split(manifest, "val", ops, cfg.max_val, dtype)
    else:
        train, val = manifest
    return _fit_itnet(ext, train, val, ops, cfg, resume, checkpoint)


def ensemble_predict(models: Sequence[ItNet], y: np.ndarray, ops: OperatorBundle) -> np.ndarray:
    if not models:
        raise ValueError("empty ensemble")
    acc = None
    for m in models:
        out = np.asarray(m.reconstruct(y, ops), dtype=np.float64)
        acc = out if acc is None else acc + out
    return acc / len(models)


def probe_levels(model: ItNet, ops: OperatorBundle, sinograms: np.ndarray, targets: np.ndarray) -> list[float]:
    """Mean RMSE after each of the ``K`` steps (the unrolled net truncated at ``k``)."""
    sums = np.zeros(model.K)
    for y, x in zip(sinograms, targets):
        _, its = model.reconstruct(y, ops, return_iterates=True)
        for k in range(1, model.K + 1):
            sums[k - 1] += math.sqrt(float(np.mean(np.square(its[k].astype(np.float64) - x))))
    return list(sums / len(sinograms))
