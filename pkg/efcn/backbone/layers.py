"""Convolution, max-pooling and transposed convolution on NHWC arrays.

Arrays have layout ``(batch, height, width, channels)``. Convolution kernels have
layout ``(a, b, in_channels, out_channels)``; a transposed convolution uses the
kernel of the convolution it transposes, ``(a, b, out_channels, in_channels)``.
Reductions accumulate in float64 and results are cast back to the input dtype.
"""

import typing as T

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError

ACTIVATIONS = ("relu", "none")


class ConvSpec:
    __slots__ = ("kernel", "bias", "stride", "activation")

    def __init__(self, kernel, bias, stride: int = 1, activation: str = "relu"):
        self.kernel = np.asarray(kernel)
        self.bias = np.asarray(bias)
        self.stride = int(stride)
        self.activation = activation
        if self.kernel.ndim != 4:
            raise ShapeError(f"Kernel must be (a, b, D, e), got {self.kernel.shape}")
        if self.bias.ndim != 1:
            raise ShapeError(f"Bias must be a vector, got {self.bias.shape}")
        if self.stride < 1:
            raise ShapeError(f"Stride must be positive, got {self.stride}")
        if activation not in ACTIVATIONS:
            raise ShapeError(f"Unknown activation `{activation}`")

    @property
    def window(self) -> T.Tuple[int, int]:
        return self.kernel.shape[0], self.kernel.shape[1]


class PoolSpec:
    __slots__ = ("window", "kind")

    def __init__(self, window: int, kind: str = "max"):
        self.window = int(window)
        self.kind = kind
        if self.window < 1:
            raise ShapeError(f"Pooling window must be positive, got {self.window}")
        if kind != "max":
            raise ShapeError(f"Unsupported pooling `{kind}`")


class LayerTrace(T.NamedTuple):
    inputs: np.ndarray
    pre_activation: np.ndarray
    activation: str


class PoolTrace(T.NamedTuple):
    input_shape: T.Tuple[int, ...]
    argmax: np.ndarray


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    """Valid convolution size; the windows must cover the input exactly.

    For stride 1 this is ``size - kernel + 1``. Larger strides require
    ``(size - kernel) % stride == 0`` so that a strided convolution and the
    transposed convolution with the same factor are exact adjoints.
    """
    span = size - kernel
    if span < 0:
        raise ShapeError(f"Kernel {kernel} larger than input {size}")
    if span % stride:
        raise ShapeError(
            f"Input {size} with kernel {kernel} does not tile with stride {stride}"
        )
    return span // stride + 1


def deconv_output_size(size: int, kernel: int, factor: int) -> int:
    return (size - 1) * factor + kernel


def pool_output_size(size: int, window: int) -> int:
    if size % window:
        raise ShapeError(f"Input {size} is not divisible by pooling window {window}")
    return size // window


def _correlate(z: np.ndarray, kernel: np.ndarray, stride: int) -> np.ndarray:
    a, b = kernel.shape[:2]
    conv_output_size(z.shape[1], a, stride)
    conv_output_size(z.shape[2], b, stride)
    windows = sliding_window_view(z, (a, b), axis=(1, 2))[:, ::stride, ::stride]
    return np.tensordot(
        windows.astype(np.float64, copy=False),
        kernel.astype(np.float64, copy=False),
        axes=([3, 4, 5], [2, 0, 1]),
    )


def _correlate_adjoint(
    y: np.ndarray, kernel: np.ndarray, stride: int, output_hw: T.Tuple[int, int]
) -> np.ndarray:
    """Adjoint of ``_correlate`` w.r.t. its input (scatter-add of every tap)."""
    a, b, D, _ = kernel.shape
    B, oh, ow, _ = y.shape
    out = np.zeros((B,) + tuple(output_hw) + (D,), dtype=np.float64)
    y = y.astype(np.float64, copy=False)
    kernel = kernel.astype(np.float64, copy=False)
    for i in range(a):
        for j in range(b):
            out[
                :,
                i : i + stride * (oh - 1) + 1 : stride,
                j : j + stride * (ow - 1) + 1 : stride,
                :,
            ] += y @ kernel[i, j].T
    return out


def _kernel_gradient(
    z: np.ndarray, grad: np.ndarray, window: T.Tuple[int, int], stride: int
) -> np.ndarray:
    windows = sliding_window_view(z, window, axis=(1, 2))[:, ::stride, ::stride]
    # (B, oh, ow, D, a, b) x (B, oh, ow, e) -> (D, a, b, e)
    grad_kernel = np.tensordot(
        windows.astype(np.float64, copy=False),
        grad.astype(np.float64, copy=False),
        axes=([0, 1, 2], [0, 1, 2]),
    )
    return grad_kernel.transpose(1, 2, 0, 3)


def _activate(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(pre, 0)
    return pre


def _activation_backward(grad: np.ndarray, trace: LayerTrace) -> np.ndarray:
    if trace.activation == "relu":
        return np.where(trace.pre_activation > 0, grad, 0)
    return grad


def _check_batch(z: np.ndarray, channels: int, name: str):
    if z.ndim != 4:
        raise ShapeError(f"{name} expects (B, H, W, C) arrays, got {z.shape}")
    if z.shape[3] != channels:
        raise ShapeError(f"{name} expects {channels} channels, got {z.shape[3]}")


def conv_forward(z: np.ndarray, spec: ConvSpec) -> T.Tuple[np.ndarray, LayerTrace]:
    """Valid convolution with stride, bias and activation."""
    _check_batch(z, spec.kernel.shape[2], "Convolution")
    pre = (_correlate(z, spec.kernel, spec.stride) + spec.bias).astype(z.dtype)
    return _activate(pre, spec.activation), LayerTrace(z, pre, spec.activation)


def conv_backward(
    grad: np.ndarray, trace: LayerTrace, spec: ConvSpec
) -> T.Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(grad_kernel, grad_bias, grad_input)``."""
    grad_pre = _activation_backward(grad, trace)
    grad_kernel = _kernel_gradient(trace.inputs, grad_pre, spec.window, spec.stride)
    grad_bias = grad_pre.sum(axis=(0, 1, 2), dtype=np.float64)
    grad_input = _correlate_adjoint(
        grad_pre, spec.kernel, spec.stride, trace.inputs.shape[1:3]
    )
    dtype = trace.inputs.dtype
    return grad_kernel.astype(dtype), grad_bias.astype(dtype), grad_input.astype(dtype)


def deconv_forward(
    z: np.ndarray, spec: ConvSpec, upsample_factor: int
) -> T.Tuple[np.ndarray, LayerTrace]:
    """Transposed convolution: each input tap spreads the kernel over the output.

    Output size is ``(size - 1) * upsample_factor + kernel``.
    """
    _check_batch(z, spec.kernel.shape[3], "Transposed convolution")
    if upsample_factor < 1:
        raise ShapeError(f"Upsampling factor must be positive, got {upsample_factor}")
    a, b = spec.window
    output_hw = (
        deconv_output_size(z.shape[1], a, upsample_factor),
        deconv_output_size(z.shape[2], b, upsample_factor),
    )
    spread = _correlate_adjoint(z, spec.kernel, upsample_factor, output_hw)
    pre = (spread + spec.bias).astype(z.dtype)
    return _activate(pre, spec.activation), LayerTrace(z, pre, spec.activation)


def deconv_backward(
    grad: np.ndarray, trace: LayerTrace, spec: ConvSpec, upsample_factor: int
) -> T.Tuple[np.ndarray, np.ndarray, np.ndarray]:
    grad_pre = _activation_backward(grad, trace)
    # the adjoint of a transposed convolution is the strided convolution
    grad_input = _correlate(grad_pre, spec.kernel, upsample_factor)
    grad_kernel = _kernel_gradient(
        grad_pre, trace.inputs, spec.window, upsample_factor
    )
    grad_bias = grad_pre.sum(axis=(0, 1, 2), dtype=np.float64)
    dtype = trace.inputs.dtype
    return grad_kernel.astype(dtype), grad_bias.astype(dtype), grad_input.astype(dtype)


def maxpool_forward(z: np.ndarray, spec: PoolSpec) -> T.Tuple[np.ndarray, PoolTrace]:
    """Non-overlapping max-pooling; ties go to the first element in row-major order."""
    if z.ndim != 4:
        raise ShapeError(f"Max-pooling expects (B, H, W, C) arrays, got {z.shape}")
    s = spec.window
    B, H, W, C = z.shape
    oh, ow = pool_output_size(H, s), pool_output_size(W, s)
    windows = z.reshape(B, oh, s, ow, s, C).transpose(0, 1, 3, 5, 2, 4)
    windows = windows.reshape(B, oh, ow, C, s * s)
    argmax = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, argmax[..., np.newaxis], axis=-1)[..., 0]
    return out, PoolTrace(z.shape, argmax)


def maxpool_backward(grad: np.ndarray, trace: PoolTrace, spec: PoolSpec) -> np.ndarray:
    s = spec.window
    B, H, W, C = trace.input_shape
    oh, ow = H // s, W // s
    windows = np.zeros((B, oh, ow, C, s * s), dtype=grad.dtype)
    np.put_along_axis(windows, trace.argmax[..., np.newaxis], grad[..., np.newaxis], -1)
    windows = windows.reshape(B, oh, ow, C, s, s).transpose(0, 1, 4, 2, 5, 3)
    return windows.reshape(B, H, W, C)
