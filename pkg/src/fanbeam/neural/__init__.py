"""Trainable enhancement network and the training pipelines built on it."""

from .net import NetConfig, NetParams, init_params, layer_specs, net_backward, net_forward, net_gradient
from .train import (
    ItNet,
    LoopState,
    TrainConfig,
    build_itnet,
    ensemble_predict,
    extend_and_finetune,
    extend_model,
    load_net,
    normalized_lambdas,
    probe_levels,
    save_net,
    train_postprocessing,
    train_unrolled,
)

__all__ = [
    "ItNet", "LoopState", "NetConfig", "NetParams", "TrainConfig", "build_itnet", "ensemble_predict",
    "extend_and_finetune", "extend_model", "init_params", "layer_specs", "load_net", "net_backward",
    "net_forward", "net_gradient", "normalized_lambdas", "probe_levels", "save_net", "train_postprocessing", "train_unrolled",
]
