"""Learnable point-cloud descriptors and their training loop."""

from .kpconv import (
    KernelParams,
    conv_geometry,
    fibonacci_kernel_points,
    kernel_influence,
    kpconv,
    kpconv_backward,
    kpconv_forward,
)
from .network import ExtractorConfig, ExtractorNet, input_features
from .training import (
    Adam,
    TrainConfig,
    TrainPair,
    TrainShape,
    TrainState,
    augment_rotation,
    learning_rate,
    load_checkpoint,
    pair_loss_and_grads,
    save_checkpoint,
    train,
    train_step,
)
