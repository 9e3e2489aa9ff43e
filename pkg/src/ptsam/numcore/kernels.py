"""Patch-gather kernels used by conv2d (im2col / col2im)."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """[c, H, W] padded input -> [oh*ow, c*kh*kw] patch matrix."""
    c = xp.shape[0]
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    return np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(oh * ow, c * kh * kw)


def col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto [c, H, W]."""
    c = shape[0]
    out = np.zeros(shape, dtype=cols.dtype)
    blocks = cols.reshape(oh, ow, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += blocks[:, :, :, i, j].transpose(2, 0, 1)
    return out
