"""Dense tensor kernel: matmul, strided 2-D convolution, its exact adjoint,
and the softmax cross-entropy loss.

All functions operate on plain numpy arrays (float64 unless the caller says
otherwise) and are pure: inputs are never mutated and outputs are freshly
allocated.  Convolution follows the deep-learning convention (cross
correlation, no kernel flip) and never pads.  The spatial ops accept either a
single sample (C, H, W) or a batch (B, C, H, W).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not compose."""


class GeometryError(ValueError):
    """Convolution geometry is inconsistent with the operand shapes."""


@dataclass(frozen=True)
class ConvGeometry:
    """Geometry of one convolution layer.  Padding is always zero."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise GeometryError(f"{name} must be a positive integer, got {v!r}")

    def out_extent(self, in_h: int, in_w: int) -> tuple[int, int]:
        """Output spatial extent for an input of ``in_h x in_w``."""
        out_h = (in_h - self.kernel_h) // self.stride + 1
        out_w = (in_w - self.kernel_w) // self.stride + 1
        if in_h < self.kernel_h or in_w < self.kernel_w or out_h < 1 or out_w < 1:
            raise GeometryError(
                f"input {in_h}x{in_w} too small for kernel "
                f"{self.kernel_h}x{self.kernel_w} stride {self.stride}"
            )
        return out_h, out_w

    @property
    def kernel_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a (m, k) by b (k, n)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents do not match: {a.shape} x {b.shape}")
    return a @ b


def _check_conv_operands(x: np.ndarray, kernels: np.ndarray, geom: ConvGeometry,
                         channels: int) -> tuple[np.ndarray, bool]:
    """Normalize x to batched form and validate against the geometry."""
    x = np.asarray(x)
    if kernels.shape != geom.kernel_shape:
        raise GeometryError(
            f"kernel tensor {kernels.shape} does not match geometry {geom.kernel_shape}"
        )
    if x.ndim == 3:
        x, batched = x[None], False
    elif x.ndim == 4:
        batched = True
    else:
        raise ShapeError(f"expected (C, H, W) or (B, C, H, W), got {x.shape}")
    if x.shape[1] != channels:
        raise ShapeError(f"input has {x.shape[1]} channels, geometry expects {channels}")
    return x, batched


def conv2d(x: np.ndarray, kernels: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Strided cross-correlation of x with kernels (no padding, no flip).

    x: (C_in, H, W) or (B, C_in, H, W); kernels: (C_out, C_in, kh, kw).
    Returns (C_out, H', W') or (B, C_out, H', W') with
    H' = (H - kh)//stride + 1 and likewise for W'.
    """
    kernels = np.asarray(kernels)
    x, batched = _check_conv_operands(x, kernels, geom, geom.in_channels)
    b, c, h, w = x.shape
    out_h, out_w = geom.out_extent(h, w)
    s = geom.stride
    # (B, C, H', W', kh, kw) view, then one GEMM over C*kh*kw.
    win = np.lib.stride_tricks.sliding_window_view(x, (geom.kernel_h, geom.kernel_w), axis=(2, 3))
    win = win[:, :, ::s, ::s]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b * out_h * out_w, c * geom.kernel_h * geom.kernel_w)
    kmat = kernels.reshape(geom.out_channels, -1)
    out = (cols @ kmat.T).reshape(b, out_h, out_w, geom.out_channels).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    return out if batched else out[0]


def conv2d_transpose(y: np.ndarray, kernels: np.ndarray, geom: ConvGeometry,
                     target_shape: tuple[int, int, int]) -> np.ndarray:
    """Exact adjoint of :func:`conv2d` onto an explicit input shape.

    For every x, y: vdot(conv2d(x, k, g), y) == vdot(x, conv2d_transpose(y, k, g, x.shape)).
    The target shape must be a valid forward input producing y's spatial extent;
    forward shapes are ambiguous under stride > 1, so the caller supplies the one
    recorded from the forward pass.
    """
    kernels = np.asarray(kernels)
    y, batched = _check_conv_operands(y, kernels, geom, geom.out_channels)
    c_in, h, w = target_shape
    if c_in != geom.in_channels:
        raise GeometryError(f"target shape {target_shape} has {c_in} channels, "
                            f"geometry expects {geom.in_channels}")
    out_h, out_w = geom.out_extent(h, w)
    if y.shape[2:] != (out_h, out_w):
        raise GeometryError(
            f"target shape {target_shape} yields {out_h}x{out_w} under {geom}, "
            f"but y is {y.shape[2]}x{y.shape[3]}")
    b = y.shape[0]
    s = geom.stride
    x_bar = np.zeros((b, c_in, h, w), dtype=y.dtype)
    # one GEMM produces every (channel, offset) contribution; the loop only
    # scatter-adds window views back onto the input grid
    ymat = np.ascontiguousarray(y.transpose(0, 2, 3, 1)).reshape(
        b * out_h * out_w, geom.out_channels)
    cols = (ymat @ kernels.reshape(geom.out_channels, -1)).reshape(
        b, out_h, out_w, c_in, geom.kernel_h, geom.kernel_w)
    for u in range(geom.kernel_h):
        for v in range(geom.kernel_w):
            x_bar[:, :, u:u + s * out_h:s, v:v + s * out_w:s] += \
                cols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    return x_bar if batched else x_bar[0]


def conv2d_weight_corr(x: np.ndarray, y: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Correlation of input x with output-shaped y over spatial positions.

    This is the pairing adjoint to conv2d in the kernel argument:
    out[o, c, u, v] = sum_{(b,)i,j} y[.., o, i, j] * x[.., c, i*s+u, j*s+v],
    summed over the batch when present.  Shapes follow conv2d's conventions.
    """
    kernels_shape = geom.kernel_shape
    x = np.asarray(x)
    y = np.asarray(y)
    if x.ndim == 3:
        x = x[None]
    if y.ndim == 3:
        y = y[None]
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"batch sizes differ: {x.shape} vs {y.shape}")
    out_h, out_w = geom.out_extent(x.shape[2], x.shape[3])
    if y.shape[1:] != (geom.out_channels, out_h, out_w):
        raise ShapeError(f"y has shape {y.shape[1:]}, expected "
                         f"{(geom.out_channels, out_h, out_w)}")
    s = geom.stride
    win = np.lib.stride_tricks.sliding_window_view(x, (geom.kernel_h, geom.kernel_w),
                                                   axis=(2, 3))[:, :, ::s, ::s]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        x.shape[0] * out_h * out_w, -1)
    ymat = np.ascontiguousarray(y.transpose(0, 2, 3, 1)).reshape(-1, geom.out_channels)
    return (ymat.T @ cols).reshape(kernels_shape)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stabilized softmax over the last axis."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy loss of a single logit vector against a class index.

    Returns (loss, grad) with loss = -log softmax(logits)[label] and
    grad = softmax(logits) - onehot(label).
    """
    logits = np.asarray(logits)
    if logits.ndim != 1:
        raise ShapeError(f"expected a logit vector, got shape {logits.shape}")
    n = logits.shape[0]
    if not 0 <= label < n:
        raise IndexError(f"label {label} out of range for {n} classes")
    z = logits - logits.max()
    logsumexp = np.log(np.sum(np.exp(z)))
    loss = float(logsumexp - z[label])
    grad = np.exp(z - logsumexp)
    grad[label] -= 1.0
    return loss, grad


def softmax_xent_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch of logit rows.

    Returns (mean loss, grad) where grad[b] = softmax(logits[b]) - onehot(labels[b]).
    The per-sample grads are NOT divided by the batch size; batch averaging is
    the caller's reduction.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"expected (B, n) logits and (B,) labels, got "
                         f"{logits.shape} and {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise IndexError(f"labels out of range for {logits.shape[1]} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    rows = np.arange(logits.shape[0])
    loss = float(np.mean(logsumexp[rows, 0] - z[rows, labels]))
    grad = np.exp(z - logsumexp)
    grad[rows, labels] -= 1.0
    return loss, grad


def flatten(x: np.ndarray) -> np.ndarray:
    """Channel-major row-major flatten of (.., C, H, W) to (.., C*H*W)."""
    if x.ndim == 3:
        return x.reshape(-1)
    return x.reshape(x.shape[0], -1)


def unflatten(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Inverse of :func:`flatten` onto a recorded per-sample shape."""
    if x.ndim == 1:
        return x.reshape(shape)
    return x.reshape((x.shape[0],) + tuple(shape))
