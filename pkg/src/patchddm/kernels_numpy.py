"""Vectorized numpy kernels for 3D convolution.

These are the fallback implementations used when the compiled extension is
unavailable, and the default ones where numpy carries a tuned BLAS (see
:mod:`patchddm.backend`). Forward and weight-gradient go through an im2col
buffer and a single BLAS matmul; the input gradient scatters tap-by-tap
into the padded gradient buffer, which avoids an explicit col2im.

The column buffer is laid out tap-major, (k, k, k, C_in, n_out), so every
tap copy writes one contiguous block; the kernel tensor is transposed to
match once per call.

Layout conventions (no batch axis):
    input   (C_in, D, H, W)
    kernel  (C_out, C_in, k, k, k)
    output  (C_out, D', H', W') with D' = (D + 2*pad - k) // stride + 1
"""

from __future__ import annotations

import numpy as np


def _out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _pad_input(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    c, d, h, w = x.shape
    xp = np.zeros((c, d + 2 * pad, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, pad : pad + d, pad : pad + h, pad : pad + w] = x
    return xp


def _im2col(xp: np.ndarray, k: int, stride: int, out_shape: tuple) -> np.ndarray:
    """Gather conv taps into a (k^3 * C_in, n_out_voxels) matrix."""
    cin = xp.shape[0]
    do, ho, wo = out_shape
    cols = np.empty((k, k, k, cin, do, ho, wo), dtype=xp.dtype)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                cols[kd, kh, kw] = xp[
                    :,
                    kd : kd + do * stride : stride,
                    kh : kh + ho * stride : stride,
                    kw : kw + wo * stride : stride,
                ]
    return cols.reshape(k**3 * cin, do * ho * wo)


def _taps_major_kernel(w: np.ndarray) -> np.ndarray:
    """(C_out, C_in, k, k, k) -> (C_out, k^3 * C_in) matching _im2col rows."""
    cout = w.shape[0]
    return np.ascontiguousarray(w.transpose(0, 2, 3, 4, 1)).reshape(cout, -1)


def conv3d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    cout, k = w.shape[0], w.shape[2]
    out_shape = tuple(_out_extent(s, k, stride, pad) for s in x.shape[1:])
    xp = _pad_input(x, pad)
    cols = _im2col(xp, k, stride, out_shape)
    out = _taps_major_kernel(w) @ cols
    return np.ascontiguousarray(out.reshape(cout, *out_shape))


def conv3d_grad_input(
    gy: np.ndarray, w: np.ndarray, x_shape: tuple, stride: int, pad: int
) -> np.ndarray:
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    if stride == 1 and pad < k:
        # the input gradient of a stride-1 conv is a conv of the output
        # gradient with the spatially flipped, channel-swapped kernel
        w_flip = np.ascontiguousarray(
            w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
        )
        return conv3d_forward(gy, w_flip, 1, k - 1 - pad)
    do, ho, wo = gy.shape[1:]
    padded_shape = (cin,) + tuple(s + 2 * pad for s in x_shape[1:])
    gxp = np.zeros(padded_shape, dtype=gy.dtype)
    gy_flat = gy.reshape(cout, -1)
    gcols = (_taps_major_kernel(w).T @ gy_flat).reshape(k, k, k, cin, do, ho, wo)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                gxp[
                    :,
                    kd : kd + do * stride : stride,
                    kh : kh + ho * stride : stride,
                    kw : kw + wo * stride : stride,
                ] += gcols[kd, kh, kw]
    if pad == 0:
        return gxp
    d, h, wdt = x_shape[1:]
    return np.ascontiguousarray(gxp[:, pad : pad + d, pad : pad + h, pad : pad + wdt])


def conv3d_grad_kernel(
    gy: np.ndarray, x: np.ndarray, w_shape: tuple, stride: int, pad: int
) -> np.ndarray:
    cout, cin, k = w_shape[0], w_shape[1], w_shape[2]
    out_shape = gy.shape[1:]
    xp = _pad_input(x, pad)
    cols = _im2col(xp, k, stride, out_shape)
    gw = gy.reshape(cout, -1) @ cols.T
    gw = gw.reshape(cout, k, k, k, cin).transpose(0, 4, 1, 2, 3)
    return np.ascontiguousarray(gw)
