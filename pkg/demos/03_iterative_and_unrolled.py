"""Iterative and learned reconstruction from 32 views at 64 x 64.

Compares FBP, Landweber-type FBP iterations, TV minimisation and a small
unrolled network trained for a few epochs. The unrolled network
alternates a convolutional block with a data-consistency step
``x - lambda * FBP(A x - y)``; its blocks start from a post-processing net
trained on FBP inputs.

    python demos/03_iterative_and_unrolled.py
"""

import tempfile
from pathlib import Path

import numpy as np

from fanbeam.calibrate import fit_fbp_scale
from fanbeam.metrics import rmse
from fanbeam.neural import NetConfig, TrainConfig, train_postprocessing, train_unrolled
from fanbeam.neural.net import net_forward
from fanbeam.neural.train import load_split
from fanbeam.phantom import PhantomConfig, SimConfig, simulate_dataset
from fanbeam.solvers import OperatorBundle, landweber_fbp, operator_norm_estimate, tv_reconstruct


def mean_rmse(recons, targets) -> float:
    return float(np.mean([rmse(x, xh) for x, xh in zip(targets, recons)]))


def main() -> None:
    n = 64
    scfg = SimConfig(n_angle=32, n_detector=2 * n, count=48, with_fbp=False)
    with tempfile.TemporaryDirectory() as tmp:
        manifest = simulate_dataset(PhantomConfig(size=n), scfg, Path(tmp))
        p = scfg.true_params(n)
        s = fit_fbp_scale([manifest.load_pair(r) for r in manifest.split("train")], p)
        ops = OperatorBundle.from_params(p, s_fbp=s)
        train = load_split(manifest, "train", ops)
        val = load_split(manifest, "val", ops)
        u_te, x_te, y_te = load_split(manifest, "test", ops)

    # sparse-view FBP over-amplifies some patterns, so FBP o A has norm above 1;
    # plain Landweber needs a step below 2 / norm
    norm = operator_norm_estimate(ops, "FBP∘A", iters=30)
    print(f"{len(train[0])} training pairs, FBP scale {s:.4f}, ||FBP o A|| {norm:.2f}")
    print(f"FBP                 RMSE {mean_rmse(u_te, x_te):.4f}")
    lw = [landweber_fbp(y, 1.0 / norm, 10, ops) for y in y_te]
    print(f"Landweber-FBP (10)  RMSE {mean_rmse(lw, x_te):.4f}")
    tv = [tv_reconstruct(y, 1e-3, 500, ops, ratio=0.1, restart=100).x for y in y_te]
    print(f"TV (500 iterations) RMSE {mean_rmse(tv, x_te):.4f}")

    net = NetConfig(base_channels=8, groups=4, c_mem=2)
    pp, _ = train_postprocessing(((train[0], train[1]), (val[0], val[1])), net,
                                 TrainConfig.postprocessing(epochs=40, lr=1e-3))
    print(f"post-processing net RMSE {mean_rmse(net_forward(pp, u_te)[0], x_te):.4f}")
    # the default steps (1.1, 1.3, 1.4, 0.08) suit pretrained blocks: each DC step
    # brings back FBP-like streaks, which is what the blocks learned to remove
    model, hist = train_unrolled((train, val), ops, net, 4, TrainConfig(epochs=10, lr=3e-4, restart_epochs=()),
                                 pretrained=pp)
    un = [model.reconstruct(y, ops) for y in y_te]
    print(f"unrolled K=4        RMSE {mean_rmse(un, x_te):.4f}  (learned steps {np.round(model.lambdas, 3)})")


if __name__ == "__main__":
    main()
