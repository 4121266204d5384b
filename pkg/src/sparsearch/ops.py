"""The searchable operation set and its parameters.

Convolutional operations follow the Conv-BN-ReLU order, with a single BN/ReLU
closing each separable convolution. All convs are bias-free (BN supplies the
shift). Parameter kinds drive optimizer policy: only "weight" entries receive
weight decay, and "bn_scale" entries are skipped entirely while frozen.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import functional as F
from .tensor import Tensor


class OperationKind(Enum):
    SEP_CONV_3X3 = "sep_conv_3x3"
    SEP_CONV_5X5 = "sep_conv_5x5"
    AVG_POOL_3X3 = "avg_pool_3x3"
    MAX_POOL_3X3 = "max_pool_3x3"
    REDUCTION_CONV = "reduction_conv"
    IDENTITY = "identity"


# the only kinds allowed inside a block level
BLOCK_OPERATIONS = (
    OperationKind.SEP_CONV_3X3,
    OperationKind.SEP_CONV_5X5,
    OperationKind.AVG_POOL_3X3,
    OperationKind.MAX_POOL_3X3,
)


def level_op_kinds(n):
    """Operation kinds for one level of n slots, cycling through the four."""
    return [BLOCK_OPERATIONS[j % len(BLOCK_OPERATIONS)] for j in range(n)]


class BatchNormParams:
    def __init__(self, channels, dtype=np.float64, eps=1e-5, momentum=0.9):
        self.scale = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    def named_parameters(self, prefix):
        yield prefix + ".scale", self.scale, "bn_scale"
        yield prefix + ".bias", self.bias, "bn_bias"

    def named_buffers(self, prefix):
        yield prefix + ".running_mean", self.running_mean
        yield prefix + ".running_var", self.running_var

    def load_buffer(self, name, value):
        setattr(self, name, value.copy())


def batch_norm(x, bn, training):
    """BN with running-stat update in training mode; see BatchNormParams."""
    if training:
        out, mean, var = F.batch_norm_train(x, bn.scale, bn.bias, bn.eps)
        bn.running_mean = bn.momentum * bn.running_mean + (1 - bn.momentum) * mean
        bn.running_var = bn.momentum * bn.running_var + (1 - bn.momentum) * var
        return out
    return F.batch_norm_eval(x, bn.scale, bn.bias, bn.running_mean, bn.running_var, bn.eps)


class SepConvParams:
    """Depthwise kernel (channel multiplier 1) + 1x1 pointwise + BN."""

    def __init__(self, rng, c_in, c_out, kernel, dtype=np.float64):
        if kernel not in (3, 5):
            raise ValueError(f"separable conv kernel must be 3 or 5, got {kernel}")
        self.kernel = kernel
        self.c_in, self.c_out = c_in, c_out
        dw_std = np.sqrt(2.0 / (kernel * kernel))
        pw_std = np.sqrt(2.0 / c_in)
        self.dw = Tensor(rng.normal(0, dw_std, (c_in, kernel, kernel)).astype(dtype), requires_grad=True)
        self.pw = Tensor(rng.normal(0, pw_std, (c_out, c_in, 1, 1)).astype(dtype), requires_grad=True)
        self.bn = BatchNormParams(c_out, dtype=dtype)

    def named_parameters(self, prefix):
        yield prefix + ".dw", self.dw, "weight"
        yield prefix + ".pw", self.pw, "weight"
        yield from self.bn.named_parameters(prefix + ".bn")

    def named_buffers(self, prefix):
        yield from self.bn.named_buffers(prefix + ".bn")


def sep_conv(x, params, training):
    if x.shape[1] != params.c_in:
        raise ValueError(f"sep_conv expects {params.c_in} channels, got {x.shape[1]}")
    y = F.depthwise_conv2d(x, params.dw)
    y = F.conv2d(y, params.pw)
    return F.relu(batch_norm(y, params.bn, training))


class ConvBnParams:
    """Plain conv + BN (stem, reduction paths, the block-output 1x1)."""

    def __init__(self, rng, c_in, c_out, kernel, stride=1, dtype=np.float64):
        self.c_in, self.c_out = c_in, c_out
        self.stride = stride
        self.padding = kernel // 2
        std = np.sqrt(2.0 / (c_in * kernel * kernel))
        self.kernel = Tensor(
            rng.normal(0, std, (c_out, c_in, kernel, kernel)).astype(dtype), requires_grad=True
        )
        self.bn = BatchNormParams(c_out, dtype=dtype)

    def named_parameters(self, prefix):
        yield prefix + ".kernel", self.kernel, "weight"
        yield from self.bn.named_parameters(prefix + ".bn")

    def named_buffers(self, prefix):
        yield from self.bn.named_buffers(prefix + ".bn")


def conv_bn_relu(x, params, training, kernel=None):
    k = params.kernel if kernel is None else kernel
    y = F.conv2d(x, k, stride=params.stride, padding=params.padding)
    return F.relu(batch_norm(y, params.bn, training))


class ReductionParams:
    """Paired stride-2 1x1 and 3x3 convolutions, outputs summed.

    Doubles the channel count by default; width-multiplied networks may round
    stage widths off the exact 2x ladder, so c_out is overridable.
    """

    def __init__(self, rng, c_in, c_out=None, dtype=np.float64):
        self.c_in = c_in
        self.c_out = 2 * c_in if c_out is None else c_out
        self.path1 = ConvBnParams(rng, c_in, self.c_out, 1, stride=2, dtype=dtype)
        self.path3 = ConvBnParams(rng, c_in, self.c_out, 3, stride=2, dtype=dtype)

    def named_parameters(self, prefix):
        yield from self.path1.named_parameters(prefix + ".path1")
        yield from self.path3.named_parameters(prefix + ".path3")

    def named_buffers(self, prefix):
        yield from self.path1.named_buffers(prefix + ".path1")
        yield from self.path3.named_buffers(prefix + ".path3")


def reduction_block(x, params, training):
    if x.shape[1] != params.c_in:
        raise ValueError(f"reduction expects {params.c_in} channels, got {x.shape[1]}")
    return F.add(
        conv_bn_relu(x, params.path1, training),
        conv_bn_relu(x, params.path3, training),
    )


class HeadParams:
    def __init__(self, rng, c_in, num_classes, dtype=np.float64):
        self.c_in, self.num_classes = c_in, num_classes
        std = np.sqrt(1.0 / c_in)
        self.weight = Tensor(rng.normal(0, std, (num_classes, c_in)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True)

    def named_parameters(self, prefix):
        yield prefix + ".weight", self.weight, "weight"
        yield prefix + ".bias", self.bias, "bias"

    def named_buffers(self, prefix):
        return iter(())


def classifier_head(x, head):
    """Global average pool then affine map to class logits."""
    return F.linear(F.global_avg_pool(x), head.weight, head.bias)


def make_op_params(rng, kind, channels, dtype=np.float64):
    """Learnable state for one block-level operation slot (None for pooling)."""
    if kind is OperationKind.SEP_CONV_3X3:
        return SepConvParams(rng, channels, channels, 3, dtype=dtype)
    if kind is OperationKind.SEP_CONV_5X5:
        return SepConvParams(rng, channels, channels, 5, dtype=dtype)
    if kind in (OperationKind.AVG_POOL_3X3, OperationKind.MAX_POOL_3X3):
        return None
    raise ValueError(f"{kind} is not a block operation")


def apply_op(kind, x, params, training):
    if kind is OperationKind.SEP_CONV_3X3 or kind is OperationKind.SEP_CONV_5X5:
        return sep_conv(x, params, training)
    if kind is OperationKind.AVG_POOL_3X3:
        return F.avg_pool3x3(x)
    if kind is OperationKind.MAX_POOL_3X3:
        return F.max_pool3x3(x)
    raise ValueError(f"{kind} is not a block operation")


softmax_cross_entropy = F.softmax_cross_entropy
