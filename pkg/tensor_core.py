"""Dense NCHW tensor kernels: convolution, transpose convolution, pooling,
activations and batch normalization.

A tensor is a C-contiguous 4-D ``numpy.ndarray`` of float32 laid out as
(batch, channels, rows, cols). Kernels accumulate in float64 and store the
result back as float32. Inputs that are already float64 stay float64; the
gradient checker relies on that to re-run everything in double precision.
"""

from dataclasses import dataclass

import numpy as np

from errors import DimensionError

SIGMOID_CLAMP = 1e-7
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1

AXES = ("batch", "channels", "height", "width")


@dataclass(frozen=True)
class Conv2dSpec:
    kernel_h: int = 3
    kernel_w: int = 3
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise DimensionError("kernel dimensions must be positive", axis="kernel")
        if self.stride < 1:
            raise DimensionError("stride must be positive", axis="stride")
        if self.padding < 0:
            raise DimensionError("padding must be non-negative", axis="padding")

    def output_size(self, height, width):
        out_h = (height + 2 * self.padding - self.kernel_h) // self.stride + 1
        out_w = (width + 2 * self.padding - self.kernel_w) // self.stride + 1
        if height + 2 * self.padding < self.kernel_h or out_h < 1:
            raise DimensionError(f"input height {height} too small for kernel", axis="height")
        if width + 2 * self.padding < self.kernel_w or out_w < 1:
            raise DimensionError(f"input width {width} too small for kernel", axis="width")
        return out_h, out_w


@dataclass(frozen=True)
class TransposeConv2dSpec:
    """2x2 kernel, stride 2, no padding: every output pixel has one source."""

    kernel_h: int = 2
    kernel_w: int = 2
    stride: int = 2

    def __post_init__(self):
        if (self.kernel_h, self.kernel_w, self.stride) != (2, 2, 2):
            raise DimensionError("transpose convolution supports only 2x2 kernels with stride 2", axis="kernel")

    def output_size(self, height, width):
        return height * 2, width * 2


@dataclass(frozen=True)
class Pool2dSpec:
    kind: str = "average"
    window: int = 2
    stride: int = 2

    def __post_init__(self):
        if self.kind not in ("average", "max"):
            raise DimensionError(f"unknown pooling kind {self.kind!r}", axis="kind")
        if (self.window, self.stride) != (2, 2):
            raise DimensionError("pooling supports only 2x2 windows with stride 2", axis="window")


def as_tensor(data, dtype=np.float32):
    """Coerce array-like data to a contiguous 4-D tensor."""
    array = np.ascontiguousarray(data, dtype=dtype)
    if array.ndim != 4:
        raise DimensionError(f"expected a 4-D tensor, got {array.ndim}-D", axis="rank")
    for axis, size in zip(AXES, array.shape):
        if size < 1:
            raise DimensionError("all dimensions must be >= 1", axis=axis)
    return array


def result_dtype(*arrays):
    if any(a.dtype == np.float64 for a in arrays):
        return np.float64
    return np.float32


def _check_rank(x, name):
    if x.ndim != 4:
        raise DimensionError(f"{name} must be 4-D, got shape {x.shape}", axis="rank")


def _check_bias(bias, channels):
    if bias.shape != (channels,):
        raise DimensionError(f"bias shape {bias.shape} does not match {channels} output channels", axis="channels")


def pad_zero(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv_windows(x_padded, spec):
    """Sliding (kh, kw) views of a padded input, strided: (N, C, H', W', kh, kw)."""
    windows = np.lib.stride_tricks.sliding_window_view(x_padded, (spec.kernel_h, spec.kernel_w), axis=(2, 3))
    return windows[:, :, :: spec.stride, :: spec.stride]


def conv2d(x, kernel, bias, spec=Conv2dSpec()):
    _check_rank(x, "input")
    _check_rank(kernel, "kernel")
    if kernel.shape[1] != x.shape[1]:
        raise DimensionError(
            f"kernel expects {kernel.shape[1]} input channels, input has {x.shape[1]}", axis="channels"
        )
    if kernel.shape[2:] != (spec.kernel_h, spec.kernel_w):
        raise DimensionError(f"kernel spatial shape {kernel.shape[2:]} does not match spec", axis="kernel")
    _check_bias(bias, kernel.shape[0])
    out_h, out_w = spec.output_size(x.shape[2], x.shape[3])

    dtype = result_dtype(x, kernel, bias)
    windows = conv_windows(pad_zero(x.astype(np.float64), spec.padding), spec)[:, :, :out_h, :out_w]
    # (N, H', W', Cout) -> (N, Cout, H', W')
    out = np.tensordot(windows, kernel.astype(np.float64), axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + bias.astype(np.float64)[None, :, None, None]
    return np.ascontiguousarray(out, dtype=dtype)


def transpose_conv2d(x, kernel, bias, spec=TransposeConv2dSpec()):
    _check_rank(x, "input")
    _check_rank(kernel, "kernel")
    if kernel.shape[0] != x.shape[1]:
        raise DimensionError(
            f"kernel expects {kernel.shape[0]} input channels, input has {x.shape[1]}", axis="channels"
        )
    if kernel.shape[2:] != (spec.kernel_h, spec.kernel_w):
        raise DimensionError(f"kernel spatial shape {kernel.shape[2:]} must be 2x2", axis="kernel")
    _check_bias(bias, kernel.shape[1])

    n, _, h, w = x.shape
    c_out = kernel.shape[1]
    dtype = result_dtype(x, kernel, bias)
    # out[n, o, 2y+dy, 2x+dx] = sum_c x[n, c, y, x] * k[c, o, dy, dx]
    scattered = np.einsum("nchw,cokl->nohkwl", x.astype(np.float64), kernel.astype(np.float64), optimize=True)
    out = scattered.reshape(n, c_out, 2 * h, 2 * w) + bias.astype(np.float64)[None, :, None, None]
    return np.ascontiguousarray(out, dtype=dtype)


def _pool_blocks(x):
    _check_rank(x, "input")
    n, c, h, w = x.shape
    if h % 2:
        raise DimensionError(f"pooling needs an even height, got {h}", axis="height")
    if w % 2:
        raise DimensionError(f"pooling needs an even width, got {w}", axis="width")
    # (N, C, H/2, W/2, 4) with the window flattened row-major
    return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


def avg_pool2d(x, spec=Pool2dSpec("average")):
    blocks = _pool_blocks(x)
    return np.ascontiguousarray(blocks.astype(np.float64).mean(axis=-1), dtype=result_dtype(x))


def max_pool2d(x, spec=Pool2dSpec("max")):
    return np.ascontiguousarray(_pool_blocks(x).max(axis=-1))


def max_pool2d_argmax(x):
    """Window-local argmax, first occurrence in row-major window order."""
    return _pool_blocks(x).argmax(axis=-1)


def pool2d(x, spec):
    if spec.kind == "max":
        return max_pool2d(x, spec)
    return avg_pool2d(x, spec)


def sigmoid(x):
    wide = x.astype(np.float64)
    e = np.exp(-np.abs(wide))
    out = np.where(wide >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return np.clip(out, SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP).astype(result_dtype(x))


def relu(x):
    return np.maximum(x, 0).astype(x.dtype)


def batch_norm(
    x, gamma, beta, running_mean, running_var, mode="train", momentum=BN_MOMENTUM, epsilon=BN_EPSILON
):
    """Per-channel normalization over (N, H, W).

    Returns ``(out, new_running_mean, new_running_var)``. In train mode the batch
    statistics normalize the input and the running stats move toward them by
    ``momentum`` (the running variance uses the unbiased batch variance). In
    infer mode the running stats normalize and are returned unchanged.
    """
    _check_rank(x, "input")
    c = x.shape[1]
    for name, vec in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if vec.shape != (c,):
            raise DimensionError(f"{name} shape {vec.shape} does not match {c} channels", axis="channels")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown batch-norm mode {mode!r}")

    dtype = result_dtype(x, gamma, beta)
    wide = x.astype(np.float64)
    if mode == "train":
        mean = wide.mean(axis=(0, 2, 3))
        var = wide.var(axis=(0, 2, 3))
        count = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * count / (count - 1) if count > 1 else var
        new_mean = (1.0 - momentum) * running_mean + momentum * mean
        new_var = (1.0 - momentum) * running_var + momentum * unbiased
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
        new_mean, new_var = running_mean, running_var

    x_hat = (wide - mean[None, :, None, None]) / np.sqrt(var + epsilon)[None, :, None, None]
    out = gamma.astype(np.float64)[None, :, None, None] * x_hat + beta.astype(np.float64)[None, :, None, None]
    return (
        np.ascontiguousarray(out, dtype=dtype),
        np.asarray(new_mean, dtype=running_mean.dtype),
        np.asarray(new_var, dtype=running_var.dtype),
    )


def mean_abs_error(prediction, target):
    """Per-image mean |p - t|, averaged over the batch, in float64."""
    if prediction.shape != target.shape:
        raise DimensionError(f"shapes differ: {prediction.shape} vs {target.shape}", axis="shape")
    diff = np.abs(prediction.astype(np.float64) - target.astype(np.float64))
    return float(diff.reshape(diff.shape[0], -1).mean(axis=1).mean())


def mean_squared_error(prediction, target):
    if prediction.shape != target.shape:
        raise DimensionError(f"shapes differ: {prediction.shape} vs {target.shape}", axis="shape")
    diff = prediction.astype(np.float64) - target.astype(np.float64)
    return float((diff * diff).reshape(diff.shape[0], -1).mean(axis=1).mean())


def pad_edge(x, multiple):
    """Replicate edges so H and W become multiples of ``multiple``."""
    h, w = x.shape[2], x.shape[3]
    pad_h = -h % multiple
    pad_w = -w % multiple
    if pad_h == 0 and pad_w == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="edge")


def crop(x, height, width):
    return np.ascontiguousarray(x[:, :, :height, :width])
