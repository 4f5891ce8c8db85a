"""Named deterministic random streams derived from a single root seed."""

import hashlib

import numpy as np


def substream(root_seed, *tags):
    """Return an independent PCG64 generator for (root_seed, *tags).

    The tag path is hashed, so the stream for a given name never depends on
    how many other streams exist. Adding parameters or runs to a program
    therefore never perturbs the draws of existing ones.
    """
    root_seed = int(root_seed)
    if root_seed < 0:
        raise ValueError(f"root seed must be non-negative, got {root_seed}")
    name = "/".join(str(t) for t in tags)
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    seq = np.random.SeedSequence([root_seed, *words])
    return np.random.Generator(np.random.PCG64(seq))


def derive_seed(root_seed, *tags):
    """A non-negative integer seed deterministically derived from the tags."""
    return int(substream(root_seed, *tags).integers(0, 2**31 - 1))


def he_uniform(rng, shape, fan_in):
    """Scaled uniform init: U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    limit = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-limit, limit, size=shape)
