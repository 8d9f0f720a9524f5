# Compiled counterparts of emra._pykernels. Same signatures, same layouts:
# contiguous arrays with one explicit leading batch axis.
import numpy as np

from cython cimport floating
from libc.stdint cimport uint64_t

cdef uint64_t _POLY = 0xC96C5795D7870F42ULL
cdef uint64_t _TABLE[256]


cdef void _init_table():
    cdef uint64_t crc
    cdef int i, j
    for i in range(256):
        crc = i
        for j in range(8):
            if crc & 1:
                crc = (crc >> 1) ^ _POLY
            else:
                crc = crc >> 1
        _TABLE[i] = crc


_init_table()


def crc64(data, crc=0):
    cdef const unsigned char[::1] buf = memoryview(bytes(data))
    cdef uint64_t c = (<uint64_t>crc) ^ 0xFFFFFFFFFFFFFFFFULL
    cdef Py_ssize_t i, n = buf.shape[0]
    with nogil:
        for i in range(n):
            c = _TABLE[(c ^ buf[i]) & 0xFF] ^ (c >> 8)
    return c ^ 0xFFFFFFFFFFFFFFFFULL


def _dtype(const floating[:, :, :, ::1] probe):
    if floating is double:
        return np.float64
    return np.float32


def dwconv3x3_forward(const floating[:, :, :, ::1] x, const floating[:, :, :, ::1] k,
                      const floating[:, ::1] b):
    cdef Py_ssize_t N = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    out_arr = np.empty((N, H, W, C), dtype=_dtype(x))
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, i, j, c, a, bb, ii, jj
    with nogil:
        for n in range(N):
            for i in range(H):
                for j in range(W):
                    for c in range(C):
                        out[n, i, j, c] = b[n, c]
                    for a in range(3):
                        ii = i + a - 1
                        if ii < 0 or ii >= H:
                            continue
                        for bb in range(3):
                            jj = j + bb - 1
                            if jj < 0 or jj >= W:
                                continue
                            for c in range(C):
                                out[n, i, j, c] += x[n, ii, jj, c] * k[n, a, bb, c]
    return out_arr


def dwconv3x3_backward(const floating[:, :, :, ::1] x, const floating[:, :, :, ::1] k,
                       const floating[:, :, :, ::1] gy):
    cdef Py_ssize_t N = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    dt = _dtype(x)
    gx_arr = np.zeros((N, H, W, C), dtype=dt)
    gk_arr = np.zeros((N, 3, 3, C), dtype=dt)
    gb_arr = np.zeros((N, C), dtype=dt)
    cdef floating[:, :, :, ::1] gx = gx_arr
    cdef floating[:, :, :, ::1] gk = gk_arr
    cdef floating[:, ::1] gb = gb_arr
    cdef Py_ssize_t n, i, j, c, a, bb, ii, jj
    cdef floating g
    with nogil:
        for n in range(N):
            for i in range(H):
                for j in range(W):
                    for c in range(C):
                        gb[n, c] += gy[n, i, j, c]
                    for a in range(3):
                        ii = i + a - 1
                        if ii < 0 or ii >= H:
                            continue
                        for bb in range(3):
                            jj = j + bb - 1
                            if jj < 0 or jj >= W:
                                continue
                            for c in range(C):
                                g = gy[n, i, j, c]
                                gx[n, ii, jj, c] += g * k[n, a, bb, c]
                                gk[n, a, bb, c] += g * x[n, ii, jj, c]
    return gx_arr, gk_arr, gb_arr


def fuse_forward(const floating[:, :, :, ::1] q, const floating[:, :, :, ::1] r,
                 Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t N = q.shape[0], HM = q.shape[1], WM = q.shape[2]
    cdef Py_ssize_t HG = r.shape[1], WG = r.shape[2], C = r.shape[3]
    out_arr = np.zeros((N, HM, WM, C), dtype=_dtype(q))
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, u, v, nb, ii, jj, c
    cdef floating w
    with nogil:
        for n in range(N):
            for u in range(HM):
                for v in range(WM):
                    for nb in range(9):
                        ii = u // sh + nb // 3 - 1
                        jj = v // sw + nb % 3 - 1
                        if ii < 0 or ii >= HG or jj < 0 or jj >= WG:
                            continue
                        w = q[n, u, v, nb]
                        for c in range(C):
                            out[n, u, v, c] += w * r[n, ii, jj, c]
    return out_arr


def fuse_backward(const floating[:, :, :, ::1] q, const floating[:, :, :, ::1] r,
                  const floating[:, :, :, ::1] g, Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t N = q.shape[0], HM = q.shape[1], WM = q.shape[2]
    cdef Py_ssize_t HG = r.shape[1], WG = r.shape[2], C = r.shape[3]
    dt = _dtype(q)
    gq_arr = np.zeros((N, HM, WM, 9), dtype=dt)
    gr_arr = np.zeros((N, HG, WG, C), dtype=dt)
    cdef floating[:, :, :, ::1] gq = gq_arr
    cdef floating[:, :, :, ::1] gr = gr_arr
    cdef Py_ssize_t n, u, v, nb, ii, jj, c
    cdef floating acc, w
    with nogil:
        for n in range(N):
            for u in range(HM):
                for v in range(WM):
                    for nb in range(9):
                        ii = u // sh + nb // 3 - 1
                        jj = v // sw + nb % 3 - 1
                        if ii < 0 or ii >= HG or jj < 0 or jj >= WG:
                            continue
                        w = q[n, u, v, nb]
                        acc = 0
                        for c in range(C):
                            acc = acc + g[n, u, v, c] * r[n, ii, jj, c]
                            gr[n, ii, jj, c] += w * g[n, u, v, c]
                        gq[n, u, v, nb] = acc
    return gq_arr, gr_arr
