"""Counter-based normal streams.

Every draw is a pure function of ``(seed, stream name, trajectory id, step)``
via the Philox4x64-10 block cipher, vectorised over trajectories. Ensemble
results therefore do not depend on how trajectories are batched or split
across workers. The cipher matches ``numpy.random.Philox`` bit for bit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_LO = np.uint64(0xFFFFFFFF)
_32 = np.uint64(32)
_11 = np.uint64(11)


def _mulhilo(a, b):
    lo = a * b
    al, ah = a & _LO, a >> _32
    bl, bh = b & _LO, b >> _32
    ll, lh, hl, hh = al * bl, al * bh, ah * bl, ah * bh
    mid = (ll >> _32) + (lh & _LO) + (hl & _LO)
    return hh + (lh >> _32) + (hl >> _32) + (mid >> _32), lo


def philox4x64(counter, key):
    """Ten Philox rounds; ``counter`` is 4 and ``key`` 2 broadcastable uint64 arrays."""
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) for c in counter)
    k0, k1 = (np.asarray(k, dtype=np.uint64) for k in key)
    c0, c1, c2, c3 = np.broadcast_arrays(c0, c1, c2, c3)
    with np.errstate(over="ignore"):
        for rnd in range(10):
            if rnd:
                k0 = k0 + _W0
                k1 = k1 + _W1
            hi0, lo0 = _mulhilo(_M0, c0)
            hi1, lo1 = _mulhilo(_M1, c2)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


def stream_hash(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class Stream:
    """A named, seeded family of normal variates indexed by (trajectory, step)."""

    seed: int
    name: str = "noise"

    @property
    def key(self) -> tuple[int, int]:
        return (int(self.seed) & 0xFFFFFFFFFFFFFFFF, stream_hash(self.name))

    def normals(self, traj_ids, step: int, count: int) -> np.ndarray:
        """Standard normals of shape ``(len(traj_ids), count)``."""
        traj = np.asarray(traj_ids, dtype=np.uint64).reshape(-1, 1)
        nblocks = -(-count // 4)
        block = np.arange(nblocks, dtype=np.uint64).reshape(1, -1)
        words = philox4x64((block, np.uint64(step), traj, np.uint64(0)), self.key)
        u = [(w >> _11).astype(float) * 2.0**-53 for w in words]
        # Box-Muller on (u0, u1) and (u2, u3); 1 - u keeps the log argument in (0, 1].
        r0 = np.sqrt(-2.0 * np.log1p(-u[0]))
        r1 = np.sqrt(-2.0 * np.log1p(-u[2]))
        t0 = 2.0 * np.pi * u[1]
        t1 = 2.0 * np.pi * u[3]
        z = np.stack([r0 * np.cos(t0), r0 * np.sin(t0), r1 * np.cos(t1), r1 * np.sin(t1)], axis=-1)
        return z.reshape(traj.shape[0], 4 * nblocks)[:, :count]
