"""Pure numpy implementations of the hot kernels.

Every function works on contiguous arrays with one explicit leading batch
axis ``N``; broadcasting is resolved by the caller. Signatures mirror the
compiled ``_ckernels`` module exactly.
"""
import numpy as np

_CRC64_POLY = 0xC96C5795D7870F42


def _crc64_table():
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC64_TABLE = _crc64_table()


def crc64(data, crc=0):
    """CRC-64/XZ (ECMA-182 polynomial, reflected, init/xorout all ones)."""
    table = _CRC64_TABLE
    crc ^= 0xFFFFFFFFFFFFFFFF
    for byte in bytes(data):
        crc = table[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


def dwconv3x3_forward(x, k, b):
    # x (N,H,W,C), k (N,3,3,C), b (N,C)
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    out = np.broadcast_to(b[:, None, None, :], x.shape).copy()
    for a in range(3):
        for bb in range(3):
            out += xp[:, a:a + h, bb:bb + w] * k[:, a, bb][:, None, None, :]
    return out


def dwconv3x3_backward(x, k, gy):
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    gxp = np.zeros_like(xp)
    gk = np.empty_like(k)
    for a in range(3):
        for bb in range(3):
            gk[:, a, bb] = (gy * xp[:, a:a + h, bb:bb + w]).sum(axis=(1, 2))
            gxp[:, a:a + h, bb:bb + w] += gy * k[:, a, bb][:, None, None, :]
    gb = gy.sum(axis=(1, 2))
    return np.ascontiguousarray(gxp[:, 1:-1, 1:-1]), gk, gb


def _shifted(rp, di, dj, hg, wg):
    return rp[:, 1 + di:1 + di + hg, 1 + dj:1 + dj + wg]


def fuse_forward(q, r, sh, sw):
    # q (N,Hg*sh,Wg*sw,9), r (N,Hg,Wg,C)
    n, hg, wg, c = r.shape
    rp = np.zeros((n, hg + 2, wg + 2, c), dtype=r.dtype)
    rp[:, 1:-1, 1:-1] = r
    out = np.zeros(q.shape[:3] + (c,), dtype=np.result_type(q, r))
    for nb in range(9):
        up = _shifted(rp, nb // 3 - 1, nb % 3 - 1, hg, wg)
        up = np.repeat(np.repeat(up, sh, axis=1), sw, axis=2)
        out += q[..., nb, None] * up
    return out


def fuse_backward(q, r, g, sh, sw):
    n, hg, wg, c = r.shape
    rp = np.zeros((n, hg + 2, wg + 2, c), dtype=r.dtype)
    rp[:, 1:-1, 1:-1] = r
    grp = np.zeros_like(rp)
    gq = np.empty(q.shape, dtype=np.result_type(q, g))
    for nb in range(9):
        di, dj = nb // 3 - 1, nb % 3 - 1
        up = _shifted(rp, di, dj, hg, wg)
        up = np.repeat(np.repeat(up, sh, axis=1), sw, axis=2)
        gq[..., nb] = (g * up).sum(axis=-1)
        blk = (q[..., nb, None] * g).reshape(n, hg, sh, wg, sw, c).sum(axis=(2, 4))
        grp[:, 1 + di:1 + di + hg, 1 + dj:1 + dj + wg] += blk
    return gq, np.ascontiguousarray(grp[:, 1:-1, 1:-1])
