# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: strip-integral weights and 2D multi-channel convolution.

Convolutions are im2col followed by a BLAS dgemm from scipy's Cython bindings.

Signatures match ``dulda._pykernels``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, floor, fabs
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef int _clip(double* t, double* w, int n, double bound, int keep_above,
               double* to, double* wo) noexcept nogil:
    """Sutherland-Hodgman clip of polygon (t, w) against t >= bound or t <= bound."""
    cdef int i, m = 0
    cdef double ta, tb, da, db, f
    cdef bint ina, inb
    for i in range(n):
        ta = t[i]
        tb = t[(i + 1) % n]
        if keep_above:
            da = ta - bound
            db = tb - bound
        else:
            da = bound - ta
            db = bound - tb
        ina = da >= 0.0
        inb = db >= 0.0
        if ina:
            to[m] = ta
            wo[m] = w[i]
            m += 1
        if ina != inb:
            f = da / (da - db)
            to[m] = ta + f * (tb - ta)
            wo[m] = w[i] + f * (w[(i + 1) % n] - w[i])
            m += 1
    return m


cdef double _shoelace(double* t, double* w, int n) noexcept nogil:
    cdef int i
    cdef double acc = 0.0
    for i in range(n):
        acc += t[i] * w[(i + 1) % n] - t[(i + 1) % n] * w[i]
    return fabs(0.5 * acc)


def clipped_square_area(double t_centre, double theta, double pixel_size,
                        double lo, double hi):
    """Area of a pixel (centre projecting to ``t_centre``) inside lo <= t <= hi."""
    cdef double t0[4]
    cdef double w0[4]
    cdef double t1[8]
    cdef double w1[8]
    cdef double t2[12]
    cdef double w2[12]
    cdef double c = cos(theta), s = sin(theta), hp = 0.5 * pixel_size
    cdef double dxs[4]
    cdef double dys[4]
    cdef int v, m
    dxs[0] = -hp; dxs[1] = hp; dxs[2] = hp; dxs[3] = -hp
    dys[0] = -hp; dys[1] = -hp; dys[2] = hp; dys[3] = hp
    for v in range(4):
        t0[v] = t_centre + dxs[v] * c + dys[v] * s
        w0[v] = -dxs[v] * s + dys[v] * c
    m = _clip(t0, w0, 4, lo, 1, t1, w1)
    if m < 3:
        return 0.0
    m = _clip(t1, w1, m, hi, 0, t2, w2)
    if m < 3:
        return 0.0
    return _shoelace(t2, w2, m)


def strip_triplets(int n, double pixel_size, thetas, int n_bins,
                   double bin_width, fov_mask):
    """COO triplets of the strip-integral system matrix by polygon clipping."""
    cdef double[::1] th = np.ascontiguousarray(thetas, dtype=np.float64)
    cdef cnp.uint8_t[::1] mask = np.ascontiguousarray(
        np.asarray(fov_mask, dtype=bool).ravel(), dtype=np.uint8)
    cdef int n_angles = th.shape[0]
    cdef int per_pixel = <int>(pixel_size * 1.4142135623730951 / bin_width) + 3
    cdef Py_ssize_t cap = <Py_ssize_t>n_angles * n * n * per_pixel
    rows_np = np.empty(cap, dtype=np.int64)
    cols_np = np.empty(cap, dtype=np.int64)
    vals_np = np.empty(cap, dtype=np.float64)
    cdef cnp.int64_t[::1] rows = rows_np
    cdef cnp.int64_t[::1] cols = cols_np
    cdef double[::1] vals = vals_np
    cdef Py_ssize_t nnz = 0
    cdef int a, r, col, k, kmin, kmax, v, m
    cdef double c, s, h, cx, cy, p0, lo, hi, area, half_bins = 0.5 * n_bins
    cdef double hp = 0.5 * pixel_size, centre = 0.5 * (n - 1)
    cdef double t0[4]
    cdef double w0[4]
    cdef double t1[8]
    cdef double w1[8]
    cdef double t2[12]
    cdef double w2[12]
    cdef double dxs[4]
    cdef double dys[4]
    dxs[0] = -hp; dxs[1] = hp; dxs[2] = hp; dxs[3] = -hp
    dys[0] = -hp; dys[1] = -hp; dys[2] = hp; dys[3] = hp
    with nogil:
        for a in range(n_angles):
            c = cos(th[a])
            s = sin(th[a])
            h = hp * (fabs(c) + fabs(s))
            for r in range(n):
                cy = (centre - r) * pixel_size
                for col in range(n):
                    if not mask[r * n + col]:
                        continue
                    cx = (col - centre) * pixel_size
                    p0 = cx * c + cy * s
                    kmin = <int>floor((p0 - h) / bin_width + half_bins)
                    kmax = <int>floor((p0 + h) / bin_width + half_bins)
                    if kmin < 0:
                        kmin = 0
                    if kmax > n_bins - 1:
                        kmax = n_bins - 1
                    for v in range(4):
                        t0[v] = p0 + dxs[v] * c + dys[v] * s
                        w0[v] = -dxs[v] * s + dys[v] * c
                    for k in range(kmin, kmax + 1):
                        lo = (k - half_bins) * bin_width
                        hi = lo + bin_width
                        m = _clip(t0, w0, 4, lo, 1, t1, w1)
                        if m < 3:
                            continue
                        m = _clip(t1, w1, m, hi, 0, t2, w2)
                        if m < 3:
                            continue
                        area = _shoelace(t2, w2, m)
                        if area <= 0.0:
                            continue
                        rows[nnz] = <cnp.int64_t>a * n_bins + k
                        cols[nnz] = r * n + col
                        vals[nnz] = area / bin_width
                        nnz += 1
    return rows_np[:nnz].copy(), cols_np[:nnz].copy(), vals_np[:nnz].copy()


cdef void _im2col(const double* x, double* cols, int cin, int hgt, int wid,
                  int kh, int kw) noexcept nogil:
    """cols[(ci*kh + a)*kw + b, i*wid + j] = x[ci, i+a-ph, j+b-pw], zero outside."""
    cdef int ph = kh // 2, pw = kw // 2
    cdef int ci, a, b, i, j, si, j0, j1
    cdef double* row
    for ci in range(cin):
        for a in range(kh):
            for b in range(kw):
                row = cols + ((ci * kh + a) * kw + b) * hgt * wid
                j0 = pw - b if pw - b > 0 else 0
                j1 = wid + pw - b if wid + pw - b < wid else wid
                for i in range(hgt):
                    si = i + a - ph
                    if si < 0 or si >= hgt:
                        for j in range(wid):
                            row[i * wid + j] = 0.0
                        continue
                    for j in range(j0):
                        row[i * wid + j] = 0.0
                    for j in range(j0, j1):
                        row[i * wid + j] = x[(ci * hgt + si) * wid + j + b - pw]
                    for j in range(j1, wid):
                        row[i * wid + j] = 0.0


cdef void _col2im(const double* cols, double* x, int cin, int hgt, int wid,
                  int kh, int kw) noexcept nogil:
    """Adjoint of :func:`_im2col`: scatter-add columns back onto the image."""
    cdef int ph = kh // 2, pw = kw // 2
    cdef int ci, a, b, i, j, si, j0, j1
    cdef const double* row
    for ci in range(cin):
        for a in range(kh):
            for b in range(kw):
                row = cols + ((ci * kh + a) * kw + b) * hgt * wid
                j0 = pw - b if pw - b > 0 else 0
                j1 = wid + pw - b if wid + pw - b < wid else wid
                for i in range(hgt):
                    si = i + a - ph
                    if si < 0 or si >= hgt:
                        continue
                    for j in range(j0, j1):
                        x[(ci * hgt + si) * wid + j + b - pw] += row[i * wid + j]


cdef void _gemm(bint ta, bint tb, int m, int n, int k, const double* a, int lda,
                const double* b, int ldb, double* c, int ldc) noexcept nogil:
    """Row-major ``C = op(A) @ op(B)`` through column-major dgemm (C^T = B^T A^T)."""
    cdef char ca = b'T' if ta else b'N'
    cdef char cb = b'T' if tb else b'N'
    cdef double one = 1.0, zero = 0.0
    dgemm(&cb, &ca, &n, &m, &k, &one, <double*>b, &ldb, <double*>a, &lda, &zero, c, &ldc)


def conv2d(x, w):
    """Multi-channel 'same' cross-correlation: (Cin,H,W) * (Cout,Cin,kh,kw)."""
    cdef double[:, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef int cout = wv.shape[0], cin = wv.shape[1], kh = wv.shape[2], kw = wv.shape[3]
    cdef int hgt = xv.shape[1], wid = xv.shape[2]
    cdef int kk = cin * kh * kw, hw = hgt * wid
    out_np = np.empty((cout, hgt, wid))
    if hw == 0 or cout == 0:
        return out_np
    if kk == 0:
        out_np[...] = 0.0
        return out_np
    cols_np = np.empty((kk, hw))
    cdef double[:, ::1] cols = cols_np
    cdef double[:, :, ::1] out = out_np
    with nogil:
        _im2col(&xv[0, 0, 0], &cols[0, 0], cin, hgt, wid, kh, kw)
        _gemm(False, False, cout, hw, kk, &wv[0, 0, 0, 0], kk, &cols[0, 0], hw,
              &out[0, 0, 0], hw)
    return out_np


def conv2d_transpose(y, w):
    """Adjoint of :func:`conv2d` with respect to its input."""
    cdef double[:, :, ::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef double[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef int cout = wv.shape[0], cin = wv.shape[1], kh = wv.shape[2], kw = wv.shape[3]
    cdef int hgt = yv.shape[1], wid = yv.shape[2]
    cdef int kk = cin * kh * kw, hw = hgt * wid
    out_np = np.zeros((cin, hgt, wid))
    if hw == 0 or kk == 0 or cout == 0:
        return out_np
    cols_np = np.empty((kk, hw))
    cdef double[:, ::1] cols = cols_np
    cdef double[:, :, ::1] out = out_np
    with nogil:
        _gemm(True, False, kk, hw, cout, &wv[0, 0, 0, 0], kk, &yv[0, 0, 0], hw,
              &cols[0, 0], hw)
        _col2im(&cols[0, 0], &out[0, 0, 0], cin, hgt, wid, kh, kw)
    return out_np


def conv2d_weight_grad(x, gy, int kh, int kw):
    """Gradient of <conv2d(x, w), gy> with respect to ``w``."""
    cdef double[:, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, ::1] gv = np.ascontiguousarray(gy, dtype=np.float64)
    cdef int cin = xv.shape[0], cout = gv.shape[0]
    cdef int hgt = xv.shape[1], wid = xv.shape[2]
    cdef int kk = cin * kh * kw, hw = hgt * wid
    out_np = np.zeros((cout, cin, kh, kw))
    if hw == 0 or kk == 0 or cout == 0:
        return out_np
    cols_np = np.empty((kk, hw))
    cdef double[:, ::1] cols = cols_np
    cdef double[:, :, :, ::1] out = out_np
    with nogil:
        _im2col(&xv[0, 0, 0], &cols[0, 0], cin, hgt, wid, kh, kw)
        _gemm(False, True, cout, kk, hw, &gv[0, 0, 0], hw, &cols[0, 0], hw,
              &out[0, 0, 0, 0], kk)
    return out_np
