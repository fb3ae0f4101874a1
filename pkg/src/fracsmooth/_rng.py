"""Counter-based random streams for reproducible, order-independent Monte Carlo.

Every stream is a Philox generator whose 128-bit key encodes
(seed, stream class, identifier).  Streams never overlap by construction,
so results are bitwise independent of how work is split across workers,
and inner (restart) streams never collide with outer path streams.
"""

import numpy as np

# Stream classes partition the key space.
OUTER_PATH = 0    # one stream per simulated path, ident = path index
RESTART = 1       # one stream per (outer path, restart event) inner batch
PROBE = 2         # coefficient probing, scrambling, misc

_CLASS_SHIFT = 56
_IDENT_MASK = (1 << _CLASS_SHIFT) - 1


def stream_key(seed, stream_class, ident):
    """128-bit Philox key: high word = seed, low word = class tag | ident."""
    if ident < 0 or ident > _IDENT_MASK:
        raise ValueError(f"stream ident {ident} out of range")
    low = (stream_class << _CLASS_SHIFT) | ident
    return ((seed & 0xFFFFFFFFFFFFFFFF) << 64) | low


def generator(seed, stream_class, ident):
    return np.random.Generator(np.random.Philox(key=stream_key(seed, stream_class, ident)))


def path_stream(seed, path_id):
    return generator(seed, OUTER_PATH, path_id)


def restart_ident(path_id, restart_id):
    """Identifier for the inner batch of restart number ``restart_id`` of a path.

    path_id < 2**32, restart_id < 2**24.
    """
    if path_id >= 1 << 32 or restart_id >= 1 << 24:
        raise ValueError("path or restart id out of range")
    return (restart_id << 32) | path_id


def restart_stream(seed, path_id, restart_id):
    return generator(seed, RESTART, restart_ident(path_id, restart_id))


def probe_stream(seed, ident=0):
    return generator(seed, PROBE, ident)
