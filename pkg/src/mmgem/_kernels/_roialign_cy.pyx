# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled bilinear region pooling (hot-path backend).

Must match the numpy fallback bit-for-bit in convention: x*W / y*H grid
mapping, 2x2 interior samples per bin, half-pixel centers with border
clamping, average pooling.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double

cdef int N_SAMPLES = 2


cdef inline void _corner(double pos, Py_ssize_t extent,
                         Py_ssize_t* lo, double* frac) nogil:
    cdef double u = pos - 0.5
    if u < 0.0:
        u = 0.0
    if u > extent - 1.0:
        u = extent - 1.0
    if extent == 1:
        lo[0] = 0
        frac[0] = 0.0
        return
    cdef Py_ssize_t l = <Py_ssize_t>u
    if l > extent - 2:
        l = extent - 2
    lo[0] = l
    frac[0] = u - l


def roi_align_forward(real[:, :, :, ::1] v, double[:, ::1] boxes,
                      Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t b = v.shape[0], c = v.shape[1]
    cdef Py_ssize_t h = v.shape[2], w = v.shape[3]
    out_arr = np.zeros((b, c, out_h, out_w),
                       dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t i, ch, by, bx, sy, sx, ylo, xlo
    cdef double gy0, gy1, gx0, gx1, bh, bw, py, px, yf, xf
    cdef double w00, w01, w10, w11, inv_n
    inv_n = 1.0 / (N_SAMPLES * N_SAMPLES)
    with nogil:
        for i in range(b):
            gx0 = boxes[i, 0] * w
            gy0 = boxes[i, 1] * h
            gx1 = boxes[i, 2] * w
            gy1 = boxes[i, 3] * h
            bh = (gy1 - gy0) / out_h
            bw = (gx1 - gx0) / out_w
            for by in range(out_h):
                for bx in range(out_w):
                    for sy in range(N_SAMPLES):
                        py = gy0 + (by + (sy + 0.5) / N_SAMPLES) * bh
                        _corner(py, h, &ylo, &yf)
                        for sx in range(N_SAMPLES):
                            px = gx0 + (bx + (sx + 0.5) / N_SAMPLES) * bw
                            _corner(px, w, &xlo, &xf)
                            w00 = (1.0 - yf) * (1.0 - xf) * inv_n
                            w01 = (1.0 - yf) * xf * inv_n
                            w10 = yf * (1.0 - xf) * inv_n
                            w11 = yf * xf * inv_n
                            for ch in range(c):
                                out[i, ch, by, bx] += <real>(
                                    w00 * v[i, ch, ylo, xlo]
                                    + w01 * v[i, ch, ylo, xlo + 1 if xlo + 1 < w else xlo]
                                    + w10 * v[i, ch, ylo + 1 if ylo + 1 < h else ylo, xlo]
                                    + w11 * v[i, ch, ylo + 1 if ylo + 1 < h else ylo,
                                              xlo + 1 if xlo + 1 < w else xlo])
    return out_arr


def roi_align_backward(real[:, :, :, ::1] grad_out, double[:, ::1] boxes,
                       Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t b = grad_out.shape[0], c = grad_out.shape[1]
    cdef Py_ssize_t out_h = grad_out.shape[2], out_w = grad_out.shape[3]
    gv_arr = np.zeros((b, c, h, w),
                      dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] gv = gv_arr
    cdef Py_ssize_t i, ch, by, bx, sy, sx, ylo, xlo, yhi, xhi
    cdef double gy0, gy1, gx0, gx1, bh, bw, py, px, yf, xf, g
    cdef double w00, w01, w10, w11, inv_n
    inv_n = 1.0 / (N_SAMPLES * N_SAMPLES)
    with nogil:
        for i in range(b):
            gx0 = boxes[i, 0] * w
            gy0 = boxes[i, 1] * h
            gx1 = boxes[i, 2] * w
            gy1 = boxes[i, 3] * h
            bh = (gy1 - gy0) / out_h
            bw = (gx1 - gx0) / out_w
            for by in range(out_h):
                for bx in range(out_w):
                    for sy in range(N_SAMPLES):
                        py = gy0 + (by + (sy + 0.5) / N_SAMPLES) * bh
                        _corner(py, h, &ylo, &yf)
                        yhi = ylo + 1 if ylo + 1 < h else ylo
                        for sx in range(N_SAMPLES):
                            px = gx0 + (bx + (sx + 0.5) / N_SAMPLES) * bw
                            _corner(px, w, &xlo, &xf)
                            xhi = xlo + 1 if xlo + 1 < w else xlo
                            w00 = (1.0 - yf) * (1.0 - xf) * inv_n
                            w01 = (1.0 - yf) * xf * inv_n
                            w10 = yf * (1.0 - xf) * inv_n
                            w11 = yf * xf * inv_n
                            for ch in range(c):
                                g = grad_out[i, ch, by, bx]
                                gv[i, ch, ylo, xlo] += <real>(w00 * g)
                                gv[i, ch, ylo, xhi] += <real>(w01 * g)
                                gv[i, ch, yhi, xlo] += <real>(w10 * g)
                                gv[i, ch, yhi, xhi] += <real>(w11 * g)
    return gv_arr
