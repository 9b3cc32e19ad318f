# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: instance heat diffusion and flow integration.

Arithmetic is kept bit-identical to `_numpy.py` (same operation order,
f64 everywhere, compiled with -ffp-contract=off), so either backend can
serve the rest of the package interchangeably.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport floor, sqrt

cnp.import_array()

ctypedef fused floating:
    cnp.float32_t
    cnp.float64_t


@cython.boundscheck(False)
@cython.wraparound(False)
def im2col3(floating[:, :, :, ::1] x, floating[:, ::1] out):
    """Fill `out` (B*H*W, 9*C) with zero-padded 3x3 windows of x
    (B, H, W, C), window-major (dy, dx, c) row order."""
    cdef Py_ssize_t b = x.shape[0]
    cdef Py_ssize_t h = x.shape[1]
    cdef Py_ssize_t w = x.shape[2]
    cdef Py_ssize_t c = x.shape[3]
    cdef Py_ssize_t bi, y, xi, dy, dx, sy, sx, k, ci, row
    if out.shape[0] != b * h * w or out.shape[1] != 9 * c:
        raise ValueError("bad im2col output shape")
    for bi in range(b):
        for y in range(h):
            for xi in range(w):
                row = (bi * h + y) * w + xi
                k = 0
                for dy in range(3):
                    sy = y + dy - 1
                    for dx in range(3):
                        sx = xi + dx - 1
                        if 0 <= sy < h and 0 <= sx < w:
                            for ci in range(c):
                                out[row, k + ci] = x[bi, sy, sx, ci]
                        else:
                            for ci in range(c):
                                out[row, k + ci] = 0.0
                        k += c
    return np.asarray(out)


def heat_diffusion(inside, center_r, center_c, niter):
    """See `_numpy.heat_diffusion`; same contract, scalar loops."""
    cdef cnp.uint8_t[:, ::1] ins = np.ascontiguousarray(inside, dtype=np.uint8)
    cdef Py_ssize_t h = ins.shape[0]
    cdef Py_ssize_t w = ins.shape[1]
    rs_np, cs_np = np.nonzero(np.asarray(ins))
    cdef cnp.int64_t[::1] rs = np.ascontiguousarray(rs_np, dtype=np.int64)
    cdef cnp.int64_t[::1] cs = np.ascontiguousarray(cs_np, dtype=np.int64)
    cdef Py_ssize_t n = rs.shape[0]
    t_np = np.zeros((h, w), np.float64)
    tn_np = np.zeros((h, w), np.float64)
    cdef cnp.float64_t[:, ::1] t = t_np
    cdef cnp.float64_t[:, ::1] tn = tn_np
    cdef cnp.float64_t[:, ::1] tmp
    cdef Py_ssize_t it, k, i, j
    cdef Py_ssize_t cr = center_r
    cdef Py_ssize_t cc = center_c
    cdef Py_ssize_t iters = niter
    cdef double m
    if n == 0:
        return t_np
    for it in range(iters):
        m = t[rs[0], cs[0]]
        for k in range(1, n):
            if t[rs[k], cs[k]] > m:
                m = t[rs[k], cs[k]]
        t[cr, cc] = m + 1.0
        for k in range(n):
            i = rs[k]
            j = cs[k]
            tn[i, j] = (((t[i - 1, j] + t[i + 1, j]) + t[i, j - 1])
                        + t[i, j + 1]) * 0.25
        tmp = t
        t = tn
        tn = tmp
    if iters % 2 == 1:
        return tn_np
    return t_np


def follow_field(flow_x, flow_y, rows, cols, steps, step_size):
    """See `_numpy.follow_field`; same contract, per-pixel loops."""
    cdef cnp.float32_t[:, ::1] fx = np.ascontiguousarray(flow_x, dtype=np.float32)
    cdef cnp.float32_t[:, ::1] fy = np.ascontiguousarray(flow_y, dtype=np.float32)
    cdef Py_ssize_t h = fx.shape[0]
    cdef Py_ssize_t w = fx.shape[1]
    r_np = np.array(rows, np.float64, copy=True)
    c_np = np.array(cols, np.float64, copy=True)
    cdef cnp.float64_t[::1] r = r_np
    cdef cnp.float64_t[::1] c = c_np
    cdef Py_ssize_t n = r.shape[0]
    cdef Py_ssize_t nsteps = steps
    cdef double step = step_size
    cdef Py_ssize_t k, it, r0, c0, r1, c1
    cdef double ra, ca, fr, fc, wa, wb, wc, wd, vx, vy, nn, rn, cn
    cdef double hmax = h - 1.0
    cdef double wmax = w - 1.0
    for k in range(n):
        ra = r[k]
        ca = c[k]
        for it in range(nsteps):
            r0 = <Py_ssize_t>floor(ra)
            c0 = <Py_ssize_t>floor(ca)
            fr = ra - <double>r0
            fc = ca - <double>c0
            r1 = r0 + 1
            if r1 > h - 1:
                r1 = h - 1
            c1 = c0 + 1
            if c1 > w - 1:
                c1 = w - 1
            wa = (1.0 - fr) * (1.0 - fc)
            wb = fr * (1.0 - fc)
            wc = (1.0 - fr) * fc
            wd = fr * fc
            vx = ((fx[r0, c0] * wa + fx[r1, c0] * wb)
                  + fx[r0, c1] * wc) + fx[r1, c1] * wd
            vy = ((fy[r0, c0] * wa + fy[r1, c0] * wb)
                  + fy[r0, c1] * wc) + fy[r1, c1] * wd
            nn = sqrt(vx * vx + vy * vy)
            if nn < 1e-6:
                break
            rn = ra + step * (vy / nn)
            cn = ca + step * (vx / nn)
            if rn < 0.0:
                rn = 0.0
            if rn > hmax:
                rn = hmax
            if cn < 0.0:
                cn = 0.0
            if cn > wmax:
                cn = wmax
            ra = rn
            ca = cn
        r[k] = ra
        c[k] = ca
    return r_np, c_np
