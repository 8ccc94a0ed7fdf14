"""Counter-based random streams keyed by (seed, name, ...)."""
import zlib

import numpy as np


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def make_rng(seed, *names):
    """Philox generator for a named stream; same arguments give the same draws."""
    ss = np.random.SeedSequence([_key(seed)] + [_key(n) for n in names])
    return np.random.Generator(np.random.Philox(ss))


def truncated_normal(rng, shape, std, dtype=np.float32):
    """Normal draws truncated to two standard deviations (resampled, not clipped)."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)
