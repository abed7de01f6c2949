"""Counter-based normal variates.

Every draw is a pure function of ``(seed, path, step, index)``: the 64-bit
seed is the Philox4x32-10 key, the counter holds the step, the path and a
block number.  Paths can therefore be simulated in any order, in any batch
size, and still see the same noise.
"""
from __future__ import annotations

import numba
import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint32(0x9E3779B9)
_W1 = np.uint32(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_TWO_PI = 2.0 * np.pi


@numba.njit(cache=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten rounds of Philox4x32 on counter ``(c0..c3)`` with key ``(k0, k1)``."""
    for _ in range(10):
        p0 = np.uint64(c0) * _M0
        p1 = np.uint64(c2) * _M1
        hi0 = np.uint32(p0 >> np.uint64(32))
        lo0 = np.uint32(p0 & _MASK)
        hi1 = np.uint32(p1 >> np.uint64(32))
        lo1 = np.uint32(p1 & _MASK)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        k0 = np.uint32(k0 + _W0)
        k1 = np.uint32(k1 + _W1)
    return c0, c1, c2, c3


@numba.njit(cache=True)
def _to_unit(hi, lo):
    bits = ((np.uint64(hi) << np.uint64(32)) | np.uint64(lo)) >> np.uint64(11)
    return (np.float64(bits) + 1.0) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True)
def _fill_normals(out, seed, paths, step):
    k0 = np.uint32(seed & np.uint64(0xFFFFFFFF))
    k1 = np.uint32(seed >> np.uint64(32))
    s0 = np.uint32(step & 0xFFFFFFFF)
    s1 = np.uint32(step >> 32)
    n, k = out.shape
    for i in range(n):
        path = np.uint32(paths[i])
        for blk in range((k + 1) // 2):
            r0, r1, r2, r3 = philox4x32(s0, s1, path, np.uint32(blk), k0, k1)
            u1 = _to_unit(r0, r1)
            u2 = _to_unit(r2, r3)
            rad = np.sqrt(-2.0 * np.log(u1))
            out[i, 2 * blk] = rad * np.cos(_TWO_PI * u2)
            if 2 * blk + 1 < k:
                out[i, 2 * blk + 1] = rad * np.sin(_TWO_PI * u2)


def normals(seed: int, paths, step: int, k: int) -> np.ndarray:
    """Standard normals of shape ``(len(paths), k)`` for one time step."""
    paths = np.asarray(paths, dtype=np.int64)
    if paths.size and (paths.min() < 0 or paths.max() >= 2**32):
        raise ValueError("path indices must lie in [0, 2^32)")
    if not 0 <= step < 2**64:
        raise ValueError("step out of range")
    out = np.empty((len(paths), k))
    _fill_normals(out, np.uint64(seed % 2**64), paths, np.int64(step))
    return out


class RngStream:
    """The noise of one path: ``stream.normals(step, k)``."""

    def __init__(self, seed: int, path: int = 0):
        self.seed = int(seed) % 2**64
        self.path = int(path)

    def normals(self, step, k):
        return normals(self.seed, [self.path], step, k)[0]
