"""Low-level tensor operations for the detector network.

Everything works on float64 numpy arrays shaped ``(channels, height, width)``.
The forward operations are written so that the composed network is piecewise
linear in its image input: convolutions and nearest-neighbour upsampling are
linear, relu and max pooling are piecewise linear with explicit kink
structure.  Each forward op has a matching backward companion used by the
hand-rolled training loop.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Zero-padded "same" 2-D convolution (cross-correlation).

    ``x`` is (C_in, H, W), ``kernel`` is (C_out, C_in, k, k) with odd k,
    ``bias`` is (C_out,).  Output is (C_out, H, W).  Linear in ``x`` for
    fixed weights when ``bias`` is zero.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) input and (O,C,k,k) kernel, "
                         f"got {x.shape} and {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square with odd side, got {kh}x{kw}")
    if x.shape[0] != c_in:
        raise ShapeError(f"input has {x.shape[0]} channels, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match {c_out} output channels")

    _, h, w = x.shape
    pad = kh // 2
    xp = np.zeros((c_in, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    xp[:, pad:pad + h, pad:pad + w] = x
    out = np.empty((c_out, h, w), dtype=np.float64)
    out[:] = bias[:, None, None]
    for di in range(kh):
        for dj in range(kw):
            # (O, C) . (C, H, W) accumulated over the shifted window
            out += np.tensordot(kernel[:, :, di, dj], xp[:, di:di + h, dj:dj + w], axes=(1, 0))
    return out


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, kernel: np.ndarray):
    """Gradients of conv2d: returns (grad_x, grad_kernel, grad_bias)."""
    c_out, c_in, kh, kw = kernel.shape
    _, h, w = x.shape
    pad = kh // 2
    xp = np.zeros((c_in, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    xp[:, pad:pad + h, pad:pad + w] = x

    grad_bias = grad_out.sum(axis=(1, 2))
    grad_kernel = np.empty_like(kernel)
    grad_xp = np.zeros_like(xp)
    for di in range(kh):
        for dj in range(kw):
            window = xp[:, di:di + h, dj:dj + w]
            grad_kernel[:, :, di, dj] = np.tensordot(grad_out, window, axes=([1, 2], [1, 2]))
            grad_xp[:, di:di + h, dj:dj + w] += np.tensordot(
                kernel[:, :, di, dj], grad_out, axes=(0, 0))
    grad_x = grad_xp[:, pad:pad + h, pad:pad + w]
    return grad_x, grad_kernel, grad_bias


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(v, 0)."""
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Subgradient: passes where the pre-activation is strictly positive."""
    return grad_out * (x > 0.0)


def maxpool2(x: np.ndarray):
    """2x2 non-overlapping max pooling.

    Returns ``(pooled, argmax)`` where ``argmax`` holds, per output pixel,
    the row-major index 0..3 of the winner inside its 2x2 window.  Ties go
    to the smallest index, so a constant image reports 0 (top-left)
    everywhere.  Spatial extents must be even.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"maxpool2 expects (C,H,W), got {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even extents, got {h}x{w}")
    windows = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(
        c, h // 2, w // 2, 4)
    argmax = windows.argmax(axis=-1)
    pooled = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return pooled, argmax


def maxpool2_backward(grad_out: np.ndarray, argmax: np.ndarray, in_shape) -> np.ndarray:
    """Routes each pooled gradient to the recorded argmax position."""
    c, h, w = in_shape
    grad_windows = np.zeros((c, h // 2, w // 2, 4), dtype=np.float64)
    np.put_along_axis(grad_windows, argmax[..., None], grad_out[..., None], axis=-1)
    return grad_windows.reshape(c, h // 2, w // 2, 2, 2).transpose(
        0, 1, 3, 2, 4).reshape(c, h, w)


def upsample_nearest(x: np.ndarray) -> np.ndarray:
    """Replicates every pixel into a 2x2 block; linear in the input."""
    x = np.asarray(x, dtype=np.float64)
    return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1)


def upsample_nearest_backward(grad_out: np.ndarray) -> np.ndarray:
    """Adjoint of upsample_nearest: sums each 2x2 block."""
    c, h2, w2 = grad_out.shape
    return grad_out.reshape(c, h2 // 2, 2, w2 // 2, 2).sum(axis=(2, 4))
