"""Counter-based random streams.

Every random draw in the package goes through a Philox generator so that a
seed fully determines the stream, independent of platform or thread count.
"""

import numpy as np


def make_rng(seed):
    """Return a ``numpy.random.Generator`` backed by Philox for ``seed``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(int(seed)))


def spawn(seed, index):
    """Independent stream number ``index`` derived from ``seed``.

    Streams are separated through the Philox key, so they never overlap.
    """
    return np.random.Generator(np.random.Philox(key=(int(seed) << 16) + int(index)))


def inverse_cdf(probs, u):
    """Pick indices by inverse-CDF lookup.

    ``probs`` has shape (..., V) and need not be normalized; ``u`` holds one
    uniform in [0, 1) per leading index.
    """
    cdf = np.cumsum(probs, axis=-1)
    target = np.asarray(u)[..., None] * cdf[..., -1:]
    idx = (cdf <= target).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)
