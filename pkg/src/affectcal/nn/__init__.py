from .gradcheck import grad_check, relative_error
from .losses import (
    LOSS_KINDS,
    LossSpec,
    ccc_with_grad,
    class_weights,
    loss_focal,
    loss_mse_ccc,
    loss_weighted_binary,
    loss_weighted_ce,
    loss_weighted_softmax,
    pos_weights,
)
from .network import (
    PRESETS,
    Forward,
    NetworkSpec,
    NetworkState,
    TcnSpec,
    backward,
    dilated_conv,
    forward,
    init_state,
    load_network,
    preset,
    save_network,
    softmax,
)
from .train import TrainConfig, adam_step, loss_and_grads, loss_value, predict, save_loss_log, train

__all__ = [
    "Forward", "LOSS_KINDS", "LossSpec", "NetworkSpec", "NetworkState", "PRESETS", "TcnSpec",
    "TrainConfig", "adam_step", "backward", "ccc_with_grad", "class_weights", "dilated_conv",
    "forward", "grad_check", "init_state", "load_network", "loss_and_grads", "loss_value", "loss_focal",
    "loss_mse_ccc", "loss_weighted_binary", "loss_weighted_ce", "loss_weighted_softmax",
    "pos_weights", "predict", "preset", "relative_error", "save_loss_log", "save_network",
    "softmax", "train",
]
