# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused bilinear sampling kernels (forward and backward) on channels-last maps.

Conventions shared with the torch fallback in ``anypoint.tensorcore``:
coordinates are clamped to ``[0, W-1] x [0, H-1]``; the lower corner index is
``min(floor(x), W-2)`` so the upper border uses the left-sided slope; the
coordinate gradient is zero outside the closed valid range.
"""
from libc.math cimport floor

DEF LANES = 8

ctypedef fused real:
    float
    double


cdef inline void _corner(real v, Py_ssize_t n, Py_ssize_t* i0, Py_ssize_t* i1,
                         real* frac, bint* inside) noexcept nogil:
    cdef real c = v
    inside[0] = (v >= 0) and (v <= n - 1)
    if c < 0:
        c = 0
    elif c > n - 1:
        c = n - 1
    cdef Py_ssize_t lo = <Py_ssize_t>floor(c)
    if n >= 2:
        if lo > n - 2:
            lo = n - 2
        i1[0] = lo + 1
    else:
        lo = 0
        i1[0] = 0
    i0[0] = lo
    frac[0] = c - lo


def bilinear_forward(real[:, :, :, ::1] fmap, real[:, :, ::1] pts, real[:, :, ::1] out):
    """Sample ``fmap`` (B, H, W, D) at ``pts`` (B, K, 2) into ``out`` (B, K, D)."""
    cdef Py_ssize_t B = fmap.shape[0], H = fmap.shape[1], W = fmap.shape[2], D = fmap.shape[3]
    cdef Py_ssize_t K = pts.shape[1]
    cdef Py_ssize_t b, k, d, x0, x1, y0, y1
    cdef real fx, fy, w00, w01, w10, w11
    cdef real *p00
    cdef real *p01
    cdef real *p10
    cdef real *p11
    cdef real *o
    cdef bint inx, iny
    if B == 0 or K == 0 or D == 0:
        return
    with nogil:
        for b in range(B):
            for k in range(K):
                _corner(pts[b, k, 0], W, &x0, &x1, &fx, &inx)
                _corner(pts[b, k, 1], H, &y0, &y1, &fy, &iny)
                w00 = (1 - fx) * (1 - fy)
                w01 = fx * (1 - fy)
                w10 = (1 - fx) * fy
                w11 = fx * fy
                p00 = &fmap[b, y0, x0, 0]
                p01 = &fmap[b, y0, x1, 0]
                p10 = &fmap[b, y1, x0, 0]
                p11 = &fmap[b, y1, x1, 0]
                o = &out[b, k, 0]
                for d in range(D):
                    o[d] = w00 * p00[d] + w01 * p01[d] + w10 * p10[d] + w11 * p11[d]


def bilinear_backward(real[:, :, :, ::1] fmap, real[:, :, ::1] pts, real[:, :, ::1] grad_out,
                      real[:, :, :, ::1] grad_map, real[:, :, ::1] grad_pts):
    """Accumulate gradients into ``grad_map`` (zeroed by caller) and write ``grad_pts``."""
    cdef Py_ssize_t B = fmap.shape[0], H = fmap.shape[1], W = fmap.shape[2], D = fmap.shape[3]
    cdef Py_ssize_t K = pts.shape[1]
    cdef Py_ssize_t b, k, d, x0, x1, y0, y1
    cdef real fx, fy, g, gx, gy, w00, w01, w10, w11, wx0, wy0
    cdef real ax[LANES]
    cdef real ay[LANES]
    cdef Py_ssize_t j
    cdef real *p00
    cdef real *p01
    cdef real *p10
    cdef real *p11
    cdef real *q00
    cdef real *q01
    cdef real *q10
    cdef real *q11
    cdef real *go
    cdef bint inx, iny
    if B == 0 or K == 0 or D == 0:
        return
    with nogil:
        for b in range(B):
            for k in range(K):
                _corner(pts[b, k, 0], W, &x0, &x1, &fx, &inx)
                _corner(pts[b, k, 1], H, &y0, &y1, &fy, &iny)
                wx0 = 1 - fx
                wy0 = 1 - fy
                w00 = wx0 * wy0
                w01 = fx * wy0
                w10 = wx0 * fy
                w11 = fx * fy
                p00 = &fmap[b, y0, x0, 0]
                p01 = &fmap[b, y0, x1, 0]
                p10 = &fmap[b, y1, x0, 0]
                p11 = &fmap[b, y1, x1, 0]
                q00 = &grad_map[b, y0, x0, 0]
                q01 = &grad_map[b, y0, x1, 0]
                q10 = &grad_map[b, y1, x0, 0]
                q11 = &grad_map[b, y1, x1, 0]
                go = &grad_out[b, k, 0]
                # eight independent partial sums so the channel loop vectorizes
                for j in range(LANES):
                    ax[j] = 0
                    ay[j] = 0
                d = 0
                while d + LANES <= D:
                    for j in range(LANES):
                        g = go[d + j]
                        ax[j] += g * (wy0 * (p01[d + j] - p00[d + j]) + fy * (p11[d + j] - p10[d + j]))
                        ay[j] += g * (wx0 * (p10[d + j] - p00[d + j]) + fx * (p11[d + j] - p01[d + j]))
                    d += LANES
                gx = 0
                gy = 0
                while d < D:
                    g = go[d]
                    gx = gx + g * (wy0 * (p01[d] - p00[d]) + fy * (p11[d] - p10[d]))
                    gy = gy + g * (wx0 * (p10[d] - p00[d]) + fx * (p11[d] - p01[d]))
                    d += 1
                for j in range(LANES):
                    gx = gx + ax[j]
                    gy = gy + ay[j]
                for d in range(D):
                    g = go[d]
                    q00[d] += g * w00
                    q01[d] += g * w01
                    q10[d] += g * w10
                    q11[d] += g * w11
                grad_pts[b, k, 0] = gx if inx else 0
                grad_pts[b, k, 1] = gy if iny else 0
