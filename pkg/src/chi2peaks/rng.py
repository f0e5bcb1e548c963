"""Counter-based normal streams (Philox4x32-10).

Every draw is a pure function of (seed, stream key, position), so a stream
keyed by (alpha, l, m) yields the same numbers no matter how work is
scheduled or which other streams exist.
"""
from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_M0, _M1 = np.uint64(0xD2511F53), np.uint64(0xCD9E8D57)
_W0, _W1 = np.uint64(0x9E3779B9), np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_SHIFT = np.uint64(32)


def philox4x32(counter, key, rounds: int = 10):
    """Philox4x32 block function.

    Parameters
    ----------
    counter : sequence of 4 integer arrays (broadcastable), each < 2**32
    key : sequence of 2 integer arrays (broadcastable), each < 2**32

    Returns
    -------
    list of 4 uint64 arrays holding 32-bit outputs.
    """
    c0, c1, c2, c3 = np.broadcast_arrays(*(np.asarray(c, dtype=np.uint64) for c in counter))
    k0, k1 = (np.asarray(k, dtype=np.uint64) & _MASK for k in key)
    c0, c1, c2, c3 = (c & _MASK for c in (c0, c1, c2, c3))
    for i in range(rounds):
        if i:
            k0 = (k0 + _W0) & _MASK
            k1 = (k1 + _W1) & _MASK
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = ((p1 >> _SHIFT) ^ c1 ^ k0, p1 & _MASK,
                          (p0 >> _SHIFT) ^ c3 ^ k1, p0 & _MASK)
    return [c0, c1, c2, c3]


def _uniform53(a, b):
    # open interval (0, 1) from two 32-bit words
    return ((a >> np.uint64(5)).astype(float) * 67108864.0
            + (b >> np.uint64(6)).astype(float) + 0.5) / 9007199254740992.0


def split_seed(seed: int):
    seed = int(seed)
    if not 0 <= seed < 2 ** 64:
        raise ValueError("seed must lie in [0, 2**64)")
    return seed & 0xFFFFFFFF, seed >> 32


def stream_normals(seeds, alpha, ell, m, count: int):
    """Standard normals from the streams keyed by (seed, alpha, l, m).

    ``seeds``, ``alpha``, ``ell`` and ``m`` broadcast against each other; the
    result has their broadcast shape plus a trailing axis of length ``count``.
    Position j of a stream never depends on ``count``.
    """
    seeds = np.asarray(seeds, dtype=np.uint64)
    lo, hi = seeds & _MASK, seeds >> _SHIFT
    alpha, ell = np.asarray(alpha, dtype=np.int64), np.asarray(ell, dtype=np.int64)
    m = np.asarray(m, dtype=np.int64) & 0xFFFFFFFF
    shape = np.broadcast_shapes(seeds.shape, alpha.shape, ell.shape, m.shape)
    nblk = (count + 1) // 2
    blk = np.arange(nblk, dtype=np.uint64)
    expand = (Ellipsis, None)
    w = philox4x32((blk, np.broadcast_to(ell, shape)[expand], np.broadcast_to(m, shape)[expand],
                    np.broadcast_to(alpha, shape)[expand]),
                   (np.broadcast_to(lo, shape)[expand], np.broadcast_to(hi, shape)[expand]))
    z = np.empty(shape + (2 * nblk,))
    z[..., 0::2] = ndtri(_uniform53(w[0], w[1]))
    z[..., 1::2] = ndtri(_uniform53(w[2], w[3]))
    return z[..., :count]
