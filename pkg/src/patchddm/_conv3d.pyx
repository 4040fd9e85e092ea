# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled single-threaded float32 kernels for 3D convolution.

Direct (no im2col buffer) row-centric loops: each output row is produced in
one pass while the contributing input rows sit in cache, so the kernels use
no large temporaries. Single-threaded, hence bit-reproducible run to run.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv3d_forward(cnp.ndarray[cnp.float32_t, ndim=4] x,
                   cnp.ndarray[cnp.float32_t, ndim=5] w,
                   int stride, int pad):
    cdef int cout = w.shape[0]
    cdef int cin = w.shape[1]
    cdef int k = w.shape[2]
    cdef cnp.ndarray[cnp.float32_t, ndim=4] xp
    if pad > 0:
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    else:
        xp = np.ascontiguousarray(x)
    cdef int dp = xp.shape[1], hp = xp.shape[2], wp = xp.shape[3]
    cdef int do = (dp - k) // stride + 1
    cdef int ho = (hp - k) // stride + 1
    cdef int wo = (wp - k) // stride + 1
    cdef cnp.ndarray[cnp.float32_t, ndim=4] out = np.zeros(
        (cout, do, ho, wo), dtype=np.float32)

    cdef float[:, :, :, ::1] xv = xp
    cdef float[:, :, :, :, ::1] wv = w if w.flags['C_CONTIGUOUS'] else np.ascontiguousarray(w)
    cdef float[:, :, :, ::1] ov = out
    cdef int co, ci, kd, kh, kw, od, oh, ow
    cdef float wval
    cdef const float* xrow
    cdef float* orow

    with nogil:
        # taps outermost: the weight and zero-check hoist out of the spatial
        # loops and the inner accumulation vectorizes over full rows
        for co in range(cout):
            for ci in range(cin):
                for kd in range(k):
                    for kh in range(k):
                        for kw in range(k):
                            wval = wv[co, ci, kd, kh, kw]
                            if wval == 0.0:
                                continue
                            for od in range(do):
                                for oh in range(ho):
                                    orow = &ov[co, od, oh, 0]
                                    xrow = &xv[ci, od * stride + kd, oh * stride + kh, kw]
                                    if stride == 1:
                                        for ow in range(wo):
                                            orow[ow] += wval * xrow[ow]
                                    else:
                                        for ow in range(wo):
                                            orow[ow] += wval * xrow[ow * stride]
    return out


def conv3d_grad_input(cnp.ndarray[cnp.float32_t, ndim=4] gy,
                      cnp.ndarray[cnp.float32_t, ndim=5] w,
                      tuple x_shape, int stride, int pad):
    cdef int cout = w.shape[0]
    cdef int cin = w.shape[1]
    cdef int k = w.shape[2]
    cdef int d = x_shape[1], h = x_shape[2], wd = x_shape[3]
    cdef int dp = d + 2 * pad, hp = h + 2 * pad, wp = wd + 2 * pad
    cdef int do = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef cnp.ndarray[cnp.float32_t, ndim=4] gxp = np.zeros(
        (cin, dp, hp, wp), dtype=np.float32)

    cdef float[:, :, :, ::1] gv = gy if gy.flags['C_CONTIGUOUS'] else np.ascontiguousarray(gy)
    cdef float[:, :, :, :, ::1] wv = w if w.flags['C_CONTIGUOUS'] else np.ascontiguousarray(w)
    cdef float[:, :, :, ::1] xv = gxp
    cdef int co, ci, kd, kh, kw, od, oh, ow, idp, ihp
    cdef float wval
    cdef float* gxrow
    cdef const float* gyrow

    with nogil:
        for co in range(cout):
            for ci in range(cin):
                for kd in range(k):
                    for kh in range(k):
                        for kw in range(k):
                            wval = wv[co, ci, kd, kh, kw]
                            if wval == 0.0:
                                continue
                            for od in range(do):
                                idp = od * stride + kd
                                for oh in range(ho):
                                    ihp = oh * stride + kh
                                    gxrow = &xv[ci, idp, ihp, kw]
                                    gyrow = &gv[co, od, oh, 0]
                                    if stride == 1:
                                        for ow in range(wo):
                                            gxrow[ow] += wval * gyrow[ow]
                                    else:
                                        for ow in range(wo):
                                            gxrow[ow * stride] += wval * gyrow[ow]
    if pad == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, pad:pad + d, pad:pad + h, pad:pad + wd])


def conv3d_grad_kernel(cnp.ndarray[cnp.float32_t, ndim=4] gy,
                       cnp.ndarray[cnp.float32_t, ndim=4] x,
                       tuple w_shape, int stride, int pad):
    cdef int cout = w_shape[0]
    cdef int cin = w_shape[1]
    cdef int k = w_shape[2]
    cdef cnp.ndarray[cnp.float32_t, ndim=4] xp
    if pad > 0:
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    else:
        xp = np.ascontiguousarray(x)
    cdef int do = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef cnp.ndarray[cnp.float32_t, ndim=5] gw = np.zeros(
        (cout, cin, k, k, k), dtype=np.float32)
    # per-(co, ci) tap accumulators; double so row partials add up exactly
    cdef cnp.ndarray[cnp.float64_t, ndim=1] acc = np.zeros(k * k * k, dtype=np.float64)

    cdef float[:, :, :, ::1] xv = xp
    cdef float[:, :, :, ::1] gv = gy if gy.flags['C_CONTIGUOUS'] else np.ascontiguousarray(gy)
    cdef float[:, :, :, :, ::1] wv = gw
    cdef double[::1] av = acc
    cdef int co, ci, kd, kh, kw, od, oh, ow, t
    cdef float rowsum
    cdef const float* xrow
    cdef const float* gyrow

    with nogil:
        for co in range(cout):
            for ci in range(cin):
                for t in range(k * k * k):
                    av[t] = 0.0
                for od in range(do):
                    for oh in range(ho):
                        gyrow = &gv[co, od, oh, 0]
                        for kd in range(k):
                            for kh in range(k):
                                xrow = &xv[ci, od * stride + kd, oh * stride + kh, 0]
                                for kw in range(k):
                                    rowsum = 0.0
                                    if stride == 1:
                                        for ow in range(wo):
                                            rowsum += gyrow[ow] * xrow[ow + kw]
                                    else:
                                        for ow in range(wo):
                                            rowsum += gyrow[ow] * xrow[ow * stride + kw]
                                    av[(kd * k + kh) * k + kw] += rowsum
                for kd in range(k):
                    for kh in range(k):
                        for kw in range(k):
                            wv[co, ci, kd, kh, kw] = <float>av[(kd * k + kh) * k + kw]
    return gw
