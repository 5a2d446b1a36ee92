"""Factorized spatio-temporal 3-D convolution blocks with a numpy reference engine."""

from fastconv.blocks import BlockKind, block_backward, block_forward, make_block
from fastconv.conv import ConvSpec, ConvWeights, Padding, conv3d_backward, conv3d_forward, conv3d_naive
from fastconv.network import NetConfig, accounting, build_network, net_backward, net_forward
from fastconv.training import LrSchedule, gradcheck, lr_at, train

__version__ = "0.1.0"

__all__ = [
    "BlockKind",
    "ConvSpec",
    "ConvWeights",
    "LrSchedule",
    "NetConfig",
    "Padding",
    "accounting",
    "block_backward",
    "block_forward",
    "build_network",
    "conv3d_backward",
    "conv3d_forward",
    "conv3d_naive",
    "gradcheck",
    "lr_at",
    "make_block",
    "net_backward",
    "net_forward",
    "train",
]
