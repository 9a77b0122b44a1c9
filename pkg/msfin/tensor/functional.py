"""Differentiable operators over Tensor.

Each operator validates its preconditions, runs a numpy forward and records a backward rule
on the active tape when any input requires gradient.
"""
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from msfin.core.exceptions import ShapeError
from msfin.tensor import kernels
from msfin.tensor.tensor import Context, Function, Tensor


# ----------------------------------------------------------------------------------------
# Convolutions
# ----------------------------------------------------------------------------------------

class Conv2d(Function):
    @staticmethod
    def forward(ctx: Context, x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                stride: int = 1, padding: int = 0, groups: int = 1) -> np.ndarray:
        ctx.save_for_backward(x, weight)
        ctx.stride, ctx.padding, ctx.groups = stride, padding, groups
        out = kernels.conv2d_forward(x, weight, stride, padding, groups)
        out += bias.reshape(1, -1, 1, 1)
        return out

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray, ...]:
        x, weight = ctx.saved
        gx = kernels.conv2d_input_grad(grad, weight, x.shape[2:], ctx.stride, ctx.padding, ctx.groups)
        gw = kernels.conv2d_weight_grad(x, grad, weight.shape, ctx.stride, ctx.padding, ctx.groups)
        gb = grad.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
        return gx, gw, gb


def _bias_as_tensor(bias: Optional[Tensor], channels: int, like: Tensor) -> Tensor:
    if bias is None:
        return Tensor(np.zeros((1, channels, 1, 1), dtype=like.data.dtype))
    if bias.numel() != channels:
        raise ShapeError(f"bias has {bias.numel()} elements, expected {channels}")
    return bias


def conv2d(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    weight is laid out (C_out, C_in / groups, k, k); bias, when given, holds C_out values
    stored as (1, C_out, 1, 1).
    """
    n, c_in, h, w = input.shape
    c_out, c_group, kh, kw = weight.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise ShapeError(f"channels in={c_in} out={c_out} not divisible by groups={groups}")
    if c_group != c_in // groups:
        raise ShapeError(f"weight expects {c_group * groups} input channels, input has {c_in}")
    if kh != kw:
        raise ShapeError(f"only square kernels are supported, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} padding={padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    bias = _bias_as_tensor(bias, c_out, input)
    return Conv2d.apply(input, weight, bias, stride=stride, padding=padding, groups=groups)


class ConvTranspose2d(Function):
    @staticmethod
    def forward(ctx: Context, x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                stride: int = 2, padding: int = 1) -> np.ndarray:
        ctx.save_for_backward(x, weight)
        ctx.stride, ctx.padding = stride, padding
        out = kernels.conv_transpose2d_forward(x, weight, stride, padding)
        out += bias.reshape(1, -1, 1, 1)
        return out

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray, ...]:
        x, weight = ctx.saved
        gx = kernels.conv2d_forward(grad, weight, ctx.stride, ctx.padding, 1)
        gw = kernels.conv2d_weight_grad(grad, x, weight.shape, ctx.stride, ctx.padding, 1)
        gb = grad.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
        return gx, gw, gb


def conv_transpose2d(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 2, padding: int = 1) -> Tensor:
    """Transposed convolution; weight laid out (C_in, C_out, k, k)."""
    n, c_in, h, w = input.shape
    w_in, c_out, kh, kw = weight.shape
    if w_in != c_in:
        raise ShapeError(f"weight expects {w_in} input channels, input has {c_in}")
    if kh != kw:
        raise ShapeError(f"only square kernels are supported, got {kh}x{kw}")
    out_h = kernels.conv_transpose_output_size(h, kh, stride, padding)
    out_w = kernels.conv_transpose_output_size(w, kw, stride, padding)
    if stride < 1 or padding < 0 or out_h < 1 or out_w < 1 or padding >= kh:
        raise ShapeError(f"transposed conv k={kh} stride={stride} padding={padding} "
                         f"yields non-positive output {out_h}x{out_w}")
    bias = _bias_as_tensor(bias, c_out, input)
    return ConvTranspose2d.apply(input, weight, bias, stride=stride, padding=padding)


# ----------------------------------------------------------------------------------------
# Rearrangements
# ----------------------------------------------------------------------------------------

class PixelShuffle(Function):
    @staticmethod
    def forward(ctx: Context, x: np.ndarray, r: int = 2) -> np.ndarray:
        ctx.r = r
        return kernels.pixel_shuffle(x, r)

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (kernels.pixel_unshuffle(grad, ctx.r),)


def pixel_shuffle(input: Tensor, r: int) -> Tensor:
    """(N, C*r^2, H, W) -> (N, C, rH, rW)."""
    if r < 1 or input.shape[1] % (r * r):
        raise ShapeError(f"channels {input.shape[1]} not divisible by r^2={r * r}")
    return PixelShuffle.apply(input, r=r)


class ChannelShuffle(Function):
    @staticmethod
    def forward(ctx: Context, x: np.ndarray, groups: int = 1) -> np.ndarray:
        ctx.groups = groups
        return kernels.channel_shuffle(x, groups)

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (kernels.channel_shuffle(grad, grad.shape[1] // ctx.groups),)


def channel_shuffle(input: Tensor, groups: int) -> Tensor:
    """Reorder channels by transposing the (groups, C/groups) index pair."""
    if groups < 1 or input.shape[1] % groups:
        raise ShapeError(f"channels {input.shape[1]} not divisible by groups={groups}")
    return ChannelShuffle.apply(input, groups=groups)


class ConcatChannels(Function):
    @staticmethod
    def forward(ctx: Context, *xs: np.ndarray) -> np.ndarray:
        ctx.splits = np.cumsum([x.shape[1] for x in xs])[:-1]
        return np.concatenate(xs, axis=1)

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray, ...]:
        return tuple(np.split(grad, ctx.splits, axis=1))


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    if not inputs:
        raise ShapeError("concat_channels needs at least one tensor")
    n, _, h, w = inputs[0].shape
    for t in inputs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: {t.shape} does not match N,H,W of {inputs[0].shape}")
    return ConcatChannels.apply(*inputs)


class GatherHW(Function):
    @staticmethod
    def forward(ctx: Context, x: np.ndarray, rows: np.ndarray = None, cols: np.ndarray = None) -> np.ndarray:
        ctx.in_shape, ctx.rows, ctx.cols = x.shape, rows, cols
        return x[:, :, rows][:, :, :, cols]

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray]:
        n, c, h, w = ctx.in_shape
        by_col = np.zeros((n, c, grad.shape[2], w), dtype=grad.dtype)
        np.add.at(by_col, (slice(None), slice(None), slice(None), ctx.cols), grad)
        gx = np.zeros(ctx.in_shape, dtype=grad.dtype)
        np.add.at(gx, (slice(None), slice(None), ctx.rows), by_col)
        return (gx,)


def reflect_pad(input: Tensor, bottom: int, right: int) -> Tensor:
    """Mirror-pad the bottom and right borders (edge sample not repeated)."""
    _, _, h, w = input.shape
    if bottom >= h or right >= w:
        raise ShapeError(f"reflect padding ({bottom}, {right}) too large for {h}x{w}")
    if bottom == 0 and right == 0:
        return input
    rows = np.pad(np.arange(h), (0, bottom), mode="reflect")
    cols = np.pad(np.arange(w), (0, right), mode="reflect")
    return GatherHW.apply(input, rows=rows, cols=cols)


def _extension(extent: int, amount: int) -> np.ndarray:
    mode = "reflect" if amount < extent else "edge"
    return np.pad(np.arange(extent), (0, amount), mode=mode)


def pad_to_multiple(input: Tensor, multiple: int) -> Tensor:
    """Extend the bottom and right borders up to the next multiple of `multiple`.

    Each axis is mirrored like reflect_pad when it is long enough, and edge-replicated otherwise.
    """
    _, _, h, w = input.shape
    if h == 0 or w == 0:
        raise ShapeError(f"cannot pad an empty {h}x{w} input")
    bottom, right = -h % multiple, -w % multiple
    if bottom == 0 and right == 0:
        return input
    return GatherHW.apply(input, rows=_extension(h, bottom), cols=_extension(w, right))


def crop(input: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left height x width window."""
    _, _, h, w = input.shape
    if height > h or width > w:
        raise ShapeError(f"cannot crop {h}x{w} to {height}x{width}")
    if height == h and width == w:
        return input
    return GatherHW.apply(input, rows=np.arange(height), cols=np.arange(width))


# ----------------------------------------------------------------------------------------
# Reductions and pooling
# ----------------------------------------------------------------------------------------

class GlobalAvgPool(Function):
    @staticmethod
    def forward(ctx: Context, x: np.ndarray) -> np.ndarray:
        ctx.in_shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray]:
        h, w = ctx.in_shape[2:]
        return (np.broadcast_to(grad / (h * w), ctx.in_shape).copy(),)


def global_avg_pool(input: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C, 1, 1) spatial means."""
    return GlobalAvgPool.apply(input)


class SumAll(Function):
    @staticmethod
    def forward(ctx: Context, x: np.ndarray) -> np.ndarray:
        ctx.in_shape = x.shape
        return np.asarray(x.sum(), dtype=x.dtype).reshape(1, 1, 1, 1)

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (np.full(ctx.in_shape, grad.reshape(-1)[0], dtype=grad.dtype),)


def sum_all(input: Tensor) -> Tensor:
    return SumAll.apply(input)


def mean_all(input: Tensor) -> Tensor:
    return scale(sum_all(input), 1.0 / input.numel())


class L1Loss(Function):
    @staticmethod
    def forward(ctx: Context, pred: np.ndarray, target: np.ndarray) -> np.ndarray:
        diff = pred - target
        ctx.save_for_backward(np.sign(diff))
        return np.asarray(np.abs(diff).mean(), dtype=pred.dtype).reshape(1, 1, 1, 1)

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        (sign,) = ctx.saved
        g = sign * (grad.reshape(-1)[0] / sign.size)
        return g, -g


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over all elements; subgradient 0 at exact ties."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss shape mismatch {pred.shape} vs {target.shape}")
    return L1Loss.apply(pred, target)


# ----------------------------------------------------------------------------------------
# Elementwise
# ----------------------------------------------------------------------------------------

class ReLU(Function):
    @staticmethod
    def forward(ctx: Context, x: np.ndarray) -> np.ndarray:
        mask = x > 0
        ctx.save_for_backward(mask)
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray]:
        (mask,) = ctx.saved
        return (grad * mask,)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


class LeakyReLU(Function):
    @staticmethod
    def forward(ctx: Context, x: np.ndarray, slope: float = 0.2) -> np.ndarray:
        factor = np.where(x > 0, 1.0, slope).astype(x.dtype)
        ctx.save_for_backward(factor)
        return x * factor

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray]:
        (factor,) = ctx.saved
        return (grad * factor,)


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    return LeakyReLU.apply(x, slope=slope)


class Sigmoid(Function):
    @staticmethod
    def forward(ctx: Context, x: np.ndarray) -> np.ndarray:
        out = expit(x)
        ctx.save_for_backward(out)
        return out

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray]:
        (out,) = ctx.saved
        return (grad * out * (1 - out),)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


class Add(Function):
    @staticmethod
    def forward(ctx: Context, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a + b

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return grad, grad


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch {a.shape} vs {b.shape}")
    return Add.apply(a, b)


def add_all(tensors: Sequence[Tensor]) -> Tensor:
    """Left fold of add over a non-empty sequence."""
    total = tensors[0]
    for t in tensors[1:]:
        total = add(total, t)
    return total


class Mul(Function):
    @staticmethod
    def forward(ctx: Context, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        ctx.save_for_backward(a, b)
        return a * b

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        a, b = ctx.saved
        ga = grad * b
        gb = grad * a
        # reduce over the broadcast spatial axes of a (N, C, 1, 1) factor
        if ga.shape != a.shape:
            ga = ga.sum(axis=(2, 3), keepdims=True)
        if gb.shape != b.shape:
            gb = gb.sum(axis=(2, 3), keepdims=True)
        return ga, gb


def _broadcast_ok(a: Tuple[int, ...], b: Tuple[int, ...]) -> bool:
    return a[:2] == b[:2] and a[2:] == (1, 1)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; a (N, C, 1, 1) operand broadcasts over (N, C, H, W)."""
    if a.shape != b.shape and not (_broadcast_ok(a.shape, b.shape) or _broadcast_ok(b.shape, a.shape)):
        raise ShapeError(f"mul shape mismatch {a.shape} vs {b.shape}")
    return Mul.apply(a, b)


class Scale(Function):
    @staticmethod
    def forward(ctx: Context, x: np.ndarray, factor: float = 1.0) -> np.ndarray:
        ctx.factor = factor
        return x * x.dtype.type(factor)

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad * grad.dtype.type(ctx.factor),)


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale.apply(x, factor=factor)


__all__: List[str] = [
    "conv2d", "conv_transpose2d", "pixel_shuffle", "channel_shuffle", "concat_channels",
    "reflect_pad", "pad_to_multiple", "crop", "global_avg_pool", "sum_all", "mean_all", "l1_loss",
    "relu", "leaky_relu", "sigmoid", "add", "add_all", "mul", "scale",
]
