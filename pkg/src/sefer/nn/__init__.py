from .layers import (
    BatchNorm2d,
    Bottleneck,
    Conv2d,
    GlobalAvgPool,
    Layer,
    Linear,
    MaxPool2d,
    ReLU,
    SEBlock,
    log_softmax,
    sigmoid,
    softmax,
)
from .network import NetworkConfig, ParameterGroups, SEResNet, split_parameter_groups
from .checkpoint import (
    LoadReport,
    load_checkpoint,
    load_state_dict,
    build_from_checkpoint,
    reshape_head,
    save_checkpoint,
    state_dict,
)

__all__ = [
    "BatchNorm2d", "Bottleneck", "Conv2d", "GlobalAvgPool", "Layer", "Linear",
    "MaxPool2d", "ReLU", "SEBlock", "log_softmax", "sigmoid", "softmax",
    "NetworkConfig", "ParameterGroups", "SEResNet", "split_parameter_groups",
    "LoadReport", "load_checkpoint", "load_state_dict", "build_from_checkpoint",
    "reshape_head", "save_checkpoint", "state_dict",
]
