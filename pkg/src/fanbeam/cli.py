"""Command-line front end: ``fanbeam {generate,calibrate,reconstruct,train,evaluate}``.

Configuration is layered: built-in defaults < ``--config`` JSON file < flags.
Unknown configuration keys are rejected and the effective configuration is
written to ``<out>/config.json``. Exit codes: 0 success, 1 usage error,
2 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .calibrate import CalibrationConfig, CalibrationResult, FitSchedule, calibrate
from .fbp import nominal_fbp_scale
from .metrics import EvalReport
from .neural.net import NetConfig
from .neural.train import (
    ItNet,
    LoopState,
    TrainConfig,
    ensemble_predict,
    extend_and_finetune,
    load_net,
    normalized_lambdas,
    save_net,
    train_postprocessing,
    train_unrolled,
)
from .phantom import PhantomConfig, SimConfig, simulate_dataset
from .projector import OperatorParams
from .solvers import OperatorBundle, landweber_fbp, tv_reconstruct
from .tensor_io import DatasetManifest, load_manifest, read_tensor, write_tensor

METHODS = ("fbp", "landweber", "tv", "unrolled", "ensemble")
STAGES = ("postproc", "unrolled", "extend")


class UsageError(Exception):
    pass


def default_config() -> dict:
    sim = asdict(SimConfig())
    sim.pop("extra")
    return {
        "phantom": asdict(PhantomConfig()),
        "sim": sim,
        "calibration": asdict(CalibrationConfig()),
        "net": asdict(NetConfig()),
        "train": asdict(TrainConfig()),
        "train_postproc": asdict(TrainConfig.postprocessing()),
        "unrolled": {"lambdas_init": None, "normalize_lambdas": False},
        "reconstruct": {
            "split": "test",
            "landweber_lambda": 0.2,
            "landweber_iters": 10,
            "tv_alpha": 1e-2,
            "tv_iters": 500,
            "tv_ratio": 0.1,
            "tv_restart": 250,
            "use_bias": True,
        },
        "evaluate": {"split": "test", "data_range": 1.0, "patch": 25},
    }


def merge(base: dict, override: dict, path: str = "") -> dict:
    """Recursive update that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise UsageError(f"unknown configuration key {where!r}")
        if isinstance(base[key], dict) and base[key] and isinstance(value, dict):
            out[key] = merge(base[key], value, where)
        else:
            out[key] = value
    return out


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fanbeam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, manifest=True):
        if manifest:
            p.add_argument("--manifest", required=True, help="dataset manifest JSON")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int)
        return p

    g = common(sub.add_parser("generate", help="simulate a phantom/sinogram dataset"), manifest=False)
    g.add_argument("--views", type=int)
    g.add_argument("--size", type=int)

    c = common(sub.add_parser("calibrate", help="fit operator parameters, FBP scale and bias"))
    c.add_argument("--rounds", type=int)
    c.add_argument("--limit", type=int, help="use at most this many training records")

    r = common(sub.add_parser("reconstruct", help="reconstruct a split and report metrics"))
    r.add_argument("--method", required=True, choices=METHODS)
    r.add_argument("--calibration", help="calibration directory (default: hidden true geometry)")
    r.add_argument("--checkpoint", help="model directory (ensemble: directory of member_* models)")
    r.add_argument("--ensemble-size", type=int)
    r.add_argument("--limit", type=int)

    t = common(sub.add_parser("train", help="train networks"))
    t.add_argument("--stage", required=True, choices=STAGES)
    t.add_argument("--calibration")
    t.add_argument("--checkpoint", help="pretrained net (unrolled) or K=4 model (extend)")
    t.add_argument("--resume", help="training-state directory to resume from")
    t.add_argument("--k", type=int, default=4)
    t.add_argument("--epochs", type=int)
    t.add_argument("--weight-sharing", choices=("on", "off"))
    t.add_argument("--ensemble-size", type=int, default=1)
    t.add_argument("--limit", type=int, help="use at most this many training records")
    t.add_argument("--allow-any-k", action="store_true", help="permit extending models with K != 4")

    e = common(sub.add_parser("evaluate", help="score reconstructions against ground truth"))
    e.add_argument("--recon", help="directory of <id>.ctt reconstructions (default: ground truth)")
    e.add_argument("--limit", type=int)
    return parser


def effective_config(args: argparse.Namespace) -> dict:
    cfg = default_config()
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        cfg = merge(cfg, doc)
    flags: dict = {}
    if args.seed is not None:
        s = args.seed
        flags = {"phantom": {"seed": s}, "sim": {"seed": s}, "train": {"seed": s},
                 "train_postproc": {"seed": s}, "calibration": {"schedule": {"seed": s}}}
    if getattr(args, "views", None) is not None:
        flags.setdefault("sim", {})["n_angle"] = args.views
    if getattr(args, "size", None) is not None:
        flags.setdefault("phantom", {})["size"] = args.size
    if getattr(args, "rounds", None) is not None:
        flags.setdefault("calibration", {}).setdefault("schedule", {})["rounds"] = args.rounds
    if getattr(args, "epochs", None) is not None:
        flags.setdefault("train", {})["epochs"] = args.epochs
        flags.setdefault("train_postproc", {})["epochs"] = args.epochs
    if getattr(args, "weight_sharing", None) is not None:
        flags.setdefault("train", {})["weight_sharing"] = args.weight_sharing == "on"
    return merge(cfg, flags)


def _tuples(d: dict, *keys: str) -> dict:
    d = dict(d)
    for k in keys:
        if k in d and isinstance(d[k], list):
            d[k] = tuple(d[k])
    return d


def _phantom_cfg(cfg) -> PhantomConfig:
    return PhantomConfig(**_tuples(cfg["phantom"], "outline_axes", "outline_tilt", "skin_width", "n_blobs",
                                   "blob_radius", "n_specks", "speck_size"))


def _train_cfg(d: dict) -> TrainConfig:
    return TrainConfig(**_tuples(d, "restart_epochs"))


def _write_png(path: Path, img: np.ndarray) -> None:
    from PIL import Image

    u8 = np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path)


def _prepare_out(args, cfg) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    return out


def _operators(manifest: DatasetManifest, calibration: str | None, use_bias: bool = True) -> OperatorBundle:
    if calibration:
        res = CalibrationResult.load(calibration)
        return OperatorBundle.from_params(res.params, res.s_fbp, res.bias if use_bias else None)
    if not manifest.sim_geometry:
        raise ValueError("manifest carries no geometry; pass --calibration")
    p = OperatorParams.from_dict(manifest.sim_geometry)
    print("note: using the hidden true geometry from the manifest (no --calibration given)")
    return OperatorBundle.from_params(p, nominal_fbp_scale(p))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_generate(args, cfg) -> int:
    out = _prepare_out(args, cfg)
    pcfg = _phantom_cfg(cfg)
    scfg = SimConfig(**_tuples(cfg["sim"], "splits"))
    m = simulate_dataset(pcfg, scfg, out)
    counts = {s: len(m.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(m.records)} records to {out / 'manifest.json'} {counts}")
    return 0


def cmd_calibrate(args, cfg) -> int:
    manifest = load_manifest(args.manifest)
    out = _prepare_out(args, cfg)
    c = dict(cfg["calibration"])
    c["schedule"] = FitSchedule(**c["schedule"])
    if args.limit is not None:
        c["max_records"] = args.limit
    ccfg = CalibrationConfig(**c)
    res = calibrate(manifest, ccfg)
    res.save(out)
    n_pix = math.prod(res.params.sino_shape)
    print(f"final residual RMSE {math.sqrt(res.history[-1] / n_pix):.6e} (initial {math.sqrt(res.history[0] / n_pix):.6e})")
    print(f"s_fwd {res.params.s_fwd:.9g}  d_source {res.params.d_source:.9g}  s_fbp {res.s_fbp:.9g}")
    if manifest.sim_geometry:
        true = OperatorParams.from_dict(manifest.sim_geometry)
        print(f"d_source error {100 * abs(res.params.d_source - true.d_source) / true.d_source:.6f}%  "
              f"max angle error {np.abs(res.params.angles - true.angles).max():.3e} rad  "
              f"s_fwd error {abs(res.params.s_fwd - true.s_fwd):.3e}")
    return 0


def _model_dir(path: str | Path) -> Path:
    # accept either a model directory or the training output that contains one
    path = Path(path)
    return path / "model" if (path / "model").is_dir() else path


def _load_members(path: str, size: int | None) -> list[ItNet]:
    root = Path(path)
    dirs = sorted(d for d in root.glob("member_*") if d.is_dir()) or [root]
    if size is not None:
        if size > len(dirs):
            raise ValueError(f"--ensemble-size {size} exceeds the {len(dirs)} available members")
        dirs = dirs[:size]
    return [ItNet.load(_model_dir(d)) for d in dirs]


def cmd_reconstruct(args, cfg) -> int:
    manifest = load_manifest(args.manifest)
    rc = cfg["reconstruct"]
    ops = _operators(manifest, args.calibration, rc["use_bias"])
    out = _prepare_out(args, cfg)
    recs = manifest.split(rc["split"])
    if args.limit is not None:
        recs = recs[: args.limit]
    if args.method in ("unrolled", "ensemble") and not args.checkpoint:
        raise UsageError(f"--method {args.method} needs --checkpoint")
    members = _load_members(args.checkpoint, args.ensemble_size) if args.method in ("unrolled", "ensemble") else []
    (out / "recon").mkdir(exist_ok=True)
    items = []
    for r in recs:
        x, y = manifest.load_pair(r)
        if args.method == "fbp":
            xh = ops.fbp(y)
        elif args.method == "landweber":
            xh = landweber_fbp(y, rc["landweber_lambda"], rc["landweber_iters"], ops)
        elif args.method == "tv":
            xh = tv_reconstruct(y, rc["tv_alpha"], rc["tv_iters"], ops, ratio=rc["tv_ratio"],
                                restart=rc["tv_restart"]).x
        elif args.method == "unrolled":
            xh = members[0].reconstruct(y, ops)
        else:
            xh = ensemble_predict(members, y, ops)
        xh = np.asarray(xh, dtype=x.dtype)
        write_tensor(out / "recon" / f"{r.id}.ctt", xh)
        _write_png(out / "recon" / f"{r.id}.png", xh)
        items.append((r.id, x, xh))
    report = EvalReport.evaluate(items, cfg["evaluate"]["data_range"], cfg["evaluate"]["patch"])
    report.to_csv(out / "report.csv")
    report.to_json(out / "report.json")
    agg = report.aggregate()
    print(f"{args.method}: {len(items)} images, mean RMSE {agg.get('mean_rmse', float('nan')):.6e}")
    return 0


def cmd_train(args, cfg) -> int:
    manifest = load_manifest(args.manifest)
    out = _prepare_out(args, cfg)
    net_cfg = NetConfig(**cfg["net"])
    state_dir = out / "state"

    def checkpoint(state: LoopState) -> None:
        state.save(state_dir)

    resume = LoopState.load(args.resume) if args.resume else None
    if args.stage == "postproc":
        tcfg = _train_cfg(cfg["train_postproc"])
        if args.limit is not None:
            tcfg.max_train = args.limit
        ops = _operators(manifest, args.calibration) if args.calibration else None
        params, hist = train_postprocessing(manifest, net_cfg, tcfg, ops, resume, checkpoint)
        save_net(out / "model", params, {"stage": "postproc", "seed": tcfg.seed})
        hist.to_csv(out / "curve.csv")
        print(f"postproc: best validation loss {min(r['val_loss'] for r in hist.rows):.6e}")
        return 0
    tcfg = _train_cfg(cfg["train"])
    if args.limit is not None:
        tcfg.max_train = args.limit
    ops = _operators(manifest, args.calibration)
    if args.stage == "unrolled":
        pretrained = load_net(_model_dir(args.checkpoint)) if args.checkpoint else None
        if pretrained is not None and pretrained.cfg != net_cfg:
            net_cfg = pretrained.cfg
        n = args.ensemble_size
        if n < 1:
            raise UsageError("--ensemble-size must be positive")
        uc = cfg["unrolled"]
        if uc["lambdas_init"] is not None:
            lambdas = tuple(uc["lambdas_init"])
        elif uc["normalize_lambdas"]:
            lambdas = normalized_lambdas(args.k, ops)
        else:
            lambdas = None
        for i in range(n):
            member_cfg = _train_cfg({**asdict(tcfg), "seed": tcfg.seed + i})
            target = out if n == 1 else out / f"member_{i:02d}"
            model, hist = train_unrolled(manifest, ops, net_cfg, args.k, member_cfg, pretrained, lambdas,
                                         resume=resume if i == 0 else None, checkpoint=checkpoint)
            model.save(target / "model")
            hist.to_csv(target / "curve.csv")
            print(f"unrolled K={args.k} member {i}: best validation loss {min(r['val_loss'] for r in hist.rows):.6e}")
        return 0
    if not args.checkpoint:
        raise UsageError("--stage extend needs --checkpoint pointing at a K=4 model")
    model = ItNet.load(_model_dir(args.checkpoint))
    ext, hist = extend_and_finetune(model, manifest, ops, tcfg, args.allow_any_k, resume, checkpoint)
    ext.save(out / "model")
    hist.to_csv(out / "curve.csv")
    print(f"extended to K={ext.K}: best validation loss {min(r['val_loss'] for r in hist.rows):.6e}")
    return 0


def cmd_evaluate(args, cfg) -> int:
    manifest = load_manifest(args.manifest)
    ec = cfg["evaluate"]
    out = _prepare_out(args, cfg)
    recs = manifest.split(ec["split"])
    if args.limit is not None:
        recs = recs[: args.limit]
    items = []
    for r in recs:
        x = read_tensor(manifest.path(r.phantom))
        xh = read_tensor(Path(args.recon) / f"{r.id}.ctt") if args.recon else x
        items.append((r.id, x, xh))
    report = EvalReport.evaluate(items, ec["data_range"], ec["patch"])
    report.to_csv(out / "report.csv")
    report.to_json(out / "report.json")
    agg = report.aggregate()
    print(json.dumps({k: v for k, v in agg.items()}, indent=2, default=str))
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "calibrate": cmd_calibrate,
    "reconstruct": cmd_reconstruct,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        cfg = effective_config(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
