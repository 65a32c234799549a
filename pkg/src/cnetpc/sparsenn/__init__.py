"""Sparse-tensor neural network substrate (numpy, float64)."""

from .gradcheck import grad_check, relative_error
from .kernelmap import (
    TYPE_A,
    TYPE_B,
    KernelMap,
    brute_force_kernel_map,
    build_kernel_map,
    grid_coords,
    grid_kernel_map,
    kernel_offsets,
    kept_offsets,
    mask_offsets,
    sparse_into_grid_map,
)
from .layers import (
    Linear,
    Param,
    ResidualBlock,
    SparseConv,
    elu,
    elu_backward,
    softmax,
    softmax_ce,
    softmax_ce_backward,
    sparse_to_dense,
    sparse_to_dense_backward,
)
from .optim import Adam, lr_schedule
from .serialize import ParamFileError, digest, dump_params, load_params


def sparse_conv(x, coords_in, conv: SparseConv, coords_out=None):
    """One-shot sparse convolution of features ``x`` living on ``coords_in``."""
    kmap = build_kernel_map(coords_in, coords_in if coords_out is None else coords_out, conv.k)
    y, _ = conv.forward(x, kmap)
    return y


__all__ = [name for name in dir() if not name.startswith("_")]
