"""Small-array log-space reductions.

Same semantics as the scipy.special functions of the same names, without
their per-call dispatch overhead, which dominates in the per-token decoding
loops where arrays hold a handful of entries.
"""

import numpy as np


def logsumexp(a, axis=None, keepdims=False):
    a = np.asarray(a, dtype=np.float64)
    m = a.max(axis=axis, keepdims=True)
    if not np.isfinite(m).all():
        m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(a - m).sum(axis=axis, keepdims=True)
    if (s > 0).all():
        out = np.log(s) + m
    else:
        with np.errstate(divide="ignore"):
            out = np.log(s) + m
    if keepdims:
        return out
    return out.reshape(())[()] if axis is None else np.squeeze(out, axis=axis)


def log_softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    return x - logsumexp(x, axis=axis, keepdims=True)


def softmax(x, axis=-1):
    return np.exp(log_softmax(x, axis=axis))
