"""Data-driven identification of the operator parameters, FBP scale and model bias.

The three fits run in order:

1. ``fit_geometry`` minimises ``(1/M) sum ||A_theta x - y||^2`` over
   ``theta = (s_fwd, d_source, angles)`` by block coordinate descent with
   one Adam optimiser per block;
2. ``fit_fbp_scale`` solves the FBP scaling problem in closed form;
3. ``estimate_bias`` averages the remaining sinogram residual.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .fbp import FbpParams, fbp
from .geometry import FanbeamGeometry, equispaced_angles
from .optim import Adam
from .projector import OperatorParams, forward_project, loss_param_gradient
from .tensor_io import DatasetManifest, read_tensor, write_tensor

Pairs = Sequence[tuple[np.ndarray, np.ndarray]]
BLOCKS = ("s_fwd", "d_source", "angles")

log = logging.getLogger(__name__)


class CalibrationError(RuntimeError):
    pass


class CalibrationDiverged(CalibrationError):
    """Loss grew beyond the divergence threshold; ``history`` holds the losses so far."""

    def __init__(self, message: str, history: list[float]) -> None:
        super().__init__(message)
        self.history = history


@dataclass
class FitSchedule:
    """Block learning rates and iteration budget.

    ``lr["s_fwd"]`` acts on ``log(s_fwd)``, so it is a relative step.
    ``lr_decay`` multiplies every learning rate after each round and
    ``batch_size`` (if set) draws a random minibatch per inner step.
    """

    lr: dict[str, float] = field(default_factory=lambda: {"s_fwd": 1e-3, "d_source": 1e-1, "angles": 1e-4})
    rounds: int = 50
    inner: int = 20
    lr_decay: float = 1.0
    batch_size: int | None = None
    plateau_tol: float = 1e-10
    patience: int = 1
    divergence_factor: float = 10.0
    seed: int = 0

    def __post_init__(self) -> None:
        missing = set(BLOCKS) - set(self.lr)
        if missing:
            raise ValueError(f"missing learning rates for blocks {sorted(missing)}")
        if any(v <= 0 for v in self.lr.values()):
            raise ValueError("learning rates must be positive")
        if self.rounds < 0 or self.inner < 1:
            raise ValueError("rounds must be non-negative and inner at least 1")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def _as_f64(data: Pairs) -> list[tuple[np.ndarray, np.ndarray]]:
    if len(data) == 0:
        raise ValueError("calibration needs at least one (x, y) pair")
    return [(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)) for x, y in data]


def full_loss(data: Pairs, p: OperatorParams) -> float:
    total = 0.0
    for x, y in data:
        r = forward_project(x, p) - y
        total += float(np.vdot(r, r))
    return total / len(data)


def _log_scale_grad(batch: Pairs, p: OperatorParams) -> tuple[float, float]:
    # d loss / d log s = (2/M) sum <r, A x>; needs forward projections only
    total, g = 0.0, 0.0
    for x, y in batch:
        ax = forward_project(x, p)
        r = ax - y
        total += float(np.vdot(r, r))
        g += float(np.vdot(r, ax))
    m = len(batch)
    return total / m, 2.0 * g / m


def optimal_scale(data: Pairs, p: OperatorParams) -> float:
    """Least-squares ``s_fwd`` for fixed geometry."""
    unit = OperatorParams.from_geometry(p.geometry, 1.0, p.step)
    num, den = 0.0, 0.0
    for x, y in data:
        ax = forward_project(x, unit)
        num += float(np.vdot(ax, y))
        den += float(np.vdot(ax, ax))
    if den == 0 or num <= 0:
        return p.s_fwd
    return num / den


def fit_geometry(
    data: Pairs, init: OperatorParams, schedule: FitSchedule | None = None
) -> tuple[OperatorParams, list[float]]:
    """Block coordinate descent over ``(s_fwd, d_source, angles)``.

    Returns the parameters with the lowest full-data loss seen (the
    initial point included) and the full-data loss after every round,
    starting with the initial loss.
    """
    sched = schedule or FitSchedule()
    data = _as_f64(data)
    rng = np.random.default_rng(sched.seed)
    n_ang = init.n_angle
    theta = np.concatenate([[math.log(init.s_fwd), init.d_source], init.angles])
    slices = {"s_fwd": slice(0, 1), "d_source": slice(1, 2), "angles": slice(2, 2 + n_ang)}
    opts = {b: Adam(slices[b].stop - slices[b].start, lr=sched.lr[b]) for b in BLOCKS}

    def params(th: np.ndarray) -> OperatorParams:
        v = th.copy()
        v[0] = math.exp(th[0])
        return init.with_vector(v)

    # exp(log(s)) may be off by an ulp; keep the caller's object as the start point
    best_p, best_loss = init, full_loss(data, init)
    history = [best_loss]
    stall = 0
    # a zero loss is already optimal; Adam would turn rounding-level gradients into full steps
    for _ in range(sched.rounds if best_loss > 0 else 0):
        prev = history[-1]
        for block in BLOCKS:
            sl = slices[block]
            for _ in range(sched.inner):
                if sched.batch_size is None or sched.batch_size >= len(data):
                    batch = data
                else:
                    batch = [data[k] for k in rng.choice(len(data), sched.batch_size, replace=False)]
                p = params(theta)
                if block == "s_fwd":
                    _, g = _log_scale_grad(batch, p)
                    grad = np.array([g])
                else:
                    _, full = loss_param_gradient(batch, p)
                    grad = full[sl].copy()
                opts[block].step(theta[sl], grad)
        for o in opts.values():
            o.lr *= sched.lr_decay
        try:
            p = params(theta)
        except ValueError as exc:
            raise CalibrationDiverged(f"parameters left the valid domain: {exc}", history) from exc
        loss = full_loss(data, p)
        history.append(loss)
        log.info("round %d: loss %.6e  s_fwd %.9g  d_source %.9g", len(history) - 1, loss, p.s_fwd, p.d_source)
        if not math.isfinite(loss) or loss > sched.divergence_factor * history[0]:
            raise CalibrationDiverged(
                f"loss {loss:.3e} exceeds {sched.divergence_factor}x the initial {history[0]:.3e}", history
            )
        if loss < best_loss:
            best_p, best_loss = p, loss
        if best_loss == 0.0:
            break
        stall = stall + 1 if prev - loss < sched.plateau_tol * prev else 0
        if stall >= sched.patience:
            break
    return best_p, history


def fit_fbp_scale(data: Pairs, p: OperatorParams, fbp_params: FbpParams | None = None) -> float:
    """Closed-form least-squares scale ``sum <x, F> / sum ||F||^2``."""
    if len(data) == 0:
        raise ValueError("need at least one (x, y) pair")
    base = fbp_params or FbpParams()
    unit = FbpParams(s_fbp=1.0, window=base.window, pad=base.pad)
    num, den = 0.0, 0.0
    for x, y in data:
        f = fbp(np.asarray(y, dtype=np.float64), p, unit)
        num += float(np.vdot(np.asarray(x, dtype=np.float64), f))
        den += float(np.vdot(f, f))
    if den == 0:
        raise CalibrationError("all unscaled FBP reconstructions are zero; the scale is undetermined")
    return num / den


def estimate_bias(data: Pairs, p: OperatorParams, s_fbp: float | None = None) -> np.ndarray:
    """Mean sinogram residual ``(1/M) sum (A x - y)``.

    ``s_fbp`` is accepted for call-site symmetry and not used.
    """
    if len(data) == 0:
        raise ValueError("need at least one (x, y) pair")
    acc = np.zeros(p.sino_shape)
    for x, y in data:
        acc += forward_project(np.asarray(x, dtype=np.float64), p) - np.asarray(y, dtype=np.float64)
    return acc / len(data)


@dataclass
class CalibrationConfig:
    schedule: FitSchedule = field(default_factory=FitSchedule)
    d_source_init: float | None = None  # default 2.5 x inscribed radius
    angle_offset_init: float = 0.0
    step: float = 0.5
    split: str | None = "train"
    max_records: int | None = None
    init_scale_closed_form: bool = True

    @classmethod
    def from_dict(cls, doc: dict) -> CalibrationConfig:
        doc = dict(doc)
        sched = FitSchedule(**doc.pop("schedule", {}))
        return cls(schedule=sched, **doc)


@dataclass
class CalibrationResult:
    params: OperatorParams
    s_fbp: float
    bias: np.ndarray
    history: list[float]
    block_lrs: dict[str, float]

    def corrected_forward(self, x: np.ndarray) -> np.ndarray:
        return forward_project(x, self.params) - self.bias.astype(np.asarray(x).dtype)

    def save(self, directory: str | Path) -> Path:
        """Write ``calibration.json`` plus the bias map ``bias.ctt``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_tensor(directory / "bias.ctt", np.asarray(self.bias, dtype=np.float64))
        doc = {
            "params": self.params.to_dict(),
            "s_fbp": self.s_fbp,
            "bias": "bias.ctt",
            "history": self.history,
            "block_lrs": self.block_lrs,
        }
        path = directory / "calibration.json"
        path.write_text(json.dumps(doc, indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> CalibrationResult:
        path = Path(path)
        if path.is_dir():
            path = path / "calibration.json"
        doc = json.loads(path.read_text())
        bias = read_tensor(path.parent / doc["bias"])
        params = OperatorParams.from_dict(doc["params"])
        if bias.shape != params.sino_shape:
            raise CalibrationError(f"bias shape {bias.shape} does not match sinogram {params.sino_shape}")
        return cls(params, float(doc["s_fbp"]), bias, list(doc["history"]), dict(doc["block_lrs"]))


def initial_params(data: Pairs, cfg: CalibrationConfig) -> OperatorParams:
    """Nominal starting point read off the data shapes."""
    x0, y0 = data[0]
    n_y, n_x = np.shape(x0)
    n_angle, n_det = np.shape(y0)
    r = min(n_x, n_y) / 2.0
    d_s = cfg.d_source_init if cfg.d_source_init is not None else 2.5 * r
    g = FanbeamGeometry(d_s, n_det, equispaced_angles(n_angle, cfg.angle_offset_init), n_x, n_y)
    p = OperatorParams.from_geometry(g, 1.0, cfg.step)
    if cfg.init_scale_closed_form:
        p = OperatorParams.from_geometry(g, optimal_scale(data, p), cfg.step)
    return p


def calibrate_pairs(data: Pairs, cfg: CalibrationConfig | None = None,
                    init: OperatorParams | None = None) -> CalibrationResult:
    cfg = cfg or CalibrationConfig()
    data = _as_f64(data)
    init = init or initial_params(data, cfg)
    p, history = fit_geometry(data, init, cfg.schedule)
    s_fbp = fit_fbp_scale(data, p)
    bias = estimate_bias(data, p, s_fbp)
    return CalibrationResult(p, s_fbp, bias, history, dict(cfg.schedule.lr))


def calibrate(manifest: DatasetManifest, cfg: CalibrationConfig | None = None) -> CalibrationResult:
    cfg = cfg or CalibrationConfig()
    records = manifest.records if cfg.split is None else manifest.split(cfg.split)
    if cfg.max_records is not None:
        records = records[: cfg.max_records]
    if not records:
        raise CalibrationError("no records available for calibration")
    data = [manifest.load_pair(r) for r in records]
    return calibrate_pairs(data, cfg)


def config_to_dict(cfg: CalibrationConfig) -> dict:
    return asdict(cfg)
