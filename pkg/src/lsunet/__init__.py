"""Lightweight shift U-Net on a self-contained NCHW autodiff core."""

from . import blocks, dataio, gradcheck, losses, metrics, network, nn, tensor, training
from .losses import AutoWeightedLoss, level_loss, mask_pyramid
from .metrics import binarize_logits, dsc, miou
from .network import LSUNet, NetworkConfig, build_network, count_params_flops
from .tensor import Graph, Parameter, Tensor

__all__ = [
    "AutoWeightedLoss", "Graph", "LSUNet", "NetworkConfig", "Parameter", "Tensor",
    "binarize_logits", "blocks", "build_network", "count_params_flops", "dataio",
    "dsc", "gradcheck", "level_loss", "losses", "mask_pyramid", "metrics", "miou",
    "network", "nn", "tensor", "training",
]
