"""Open-addressing hash table from integer voxel coordinates to row indices.

Keys are packed into 63 bits (21 bits per axis, offset so negative
coordinates fit), mixed with a splitmix64 finalizer together with the
scale, and resolved by linear probing. Inserts and lookups are
vectorized: each probing round advances every unresolved key by one slot.
"""

import numpy as np

_BITS = 21
_BIAS = 1 << (_BITS - 1)
_COORD_MIN = -_BIAS
_COORD_MAX = _BIAS - 1
EMPTY = np.int64(-1)


def pack_coords(coords):
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if c.size and (c.min() < _COORD_MIN or c.max() > _COORD_MAX):
        raise OverflowError("voxel coordinate outside the packable range")
    b = c + _BIAS
    return (b[:, 0] << (2 * _BITS)) | (b[:, 1] << _BITS) | b[:, 2]


def unpack_coords(keys):
    keys = np.asarray(keys, dtype=np.int64)
    mask = (1 << _BITS) - 1
    out = np.stack([(keys >> (2 * _BITS)) & mask, (keys >> _BITS) & mask, keys & mask], axis=1)
    return out - _BIAS


def _mix(keys, scale):
    with np.errstate(over="ignore"):
        x = keys.astype(np.uint64) ^ (np.uint64(scale) * np.uint64(0x9E3779B97F4A7C15))
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
    return x


class VoxelHashTable:
    """Maps unique coordinates ``coords[i]`` to ``i``.

    Capacity is the smallest power of two at least twice the key count.
    """

    def __init__(self, coords, scale=0):
        keys = pack_coords(coords)
        if len(np.unique(keys)) != len(keys):
            raise ValueError("duplicate voxel coordinates")
        self.scale = int(scale)
        self.size = len(keys)
        cap = 8
        while cap < 2 * max(self.size, 1):
            cap *= 2
        self.capacity = cap
        self._mask = np.int64(cap - 1)
        self.keys = np.full(cap, EMPTY, dtype=np.int64)
        self.rows = np.full(cap, -1, dtype=np.int64)
        self._insert(keys)

    def _home(self, keys):
        return (_mix(keys, self.scale) & np.uint64(self._mask)).astype(np.int64)

    def _insert(self, keys):
        pending = np.arange(len(keys))
        slot = self._home(keys)
        while len(pending):
            s = slot[pending]
            free = self.keys[s] == EMPTY
            # among pending keys aiming at the same free slot, the first claims it
            cand = pending[free]
            _, first = np.unique(s[free], return_index=True)
            winners = cand[first]
            self.keys[slot[winners]] = keys[winners]
            self.rows[slot[winners]] = winners
            won = np.zeros(len(keys), dtype=bool)
            won[winners] = True
            pending = pending[~won[pending]]
            slot[pending] = (slot[pending] + 1) & self._mask

    def lookup(self, coords):
        """Row index per query coordinate, -1 where absent."""
        q = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        out = np.full(len(q), -1, dtype=np.int64)
        if not len(q):
            return out
        inrange = np.all((q >= _COORD_MIN) & (q <= _COORD_MAX), axis=1)
        active = np.nonzero(inrange)[0]
        keys = np.zeros(len(q), dtype=np.int64)
        keys[active] = pack_coords(q[active])
        slot = np.zeros(len(q), dtype=np.int64)
        slot[active] = self._home(keys[active])
        while len(active):
            s = slot[active]
            k = self.keys[s]
            hit = k == keys[active]
            out[active[hit]] = self.rows[s[hit]]
            active = active[~hit & (k != EMPTY)]
            slot[active] = (slot[active] + 1) & self._mask
        return out

    def __contains__(self, coord):
        return self.lookup(np.asarray(coord).reshape(1, 3))[0] >= 0

    def __len__(self):
        return self.size
