import numpy as np


def central_difference(f, x, h=1e-5):
    """Central finite differences of a scalar function at x, step h."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x).ravel()
    flat = x.ravel()
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = h
        grad[i] = (f((flat + bump).reshape(x.shape)) - f((flat - bump).reshape(x.shape))) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(got, want):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    return np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-12)


def softmax_np(logits, tau=1.0):
    """Plain-numpy softmax used as an oracle, independent of the tape engine."""
    logits = np.asarray(logits, dtype=np.float64)
    z = (logits - logits.max(axis=-1, keepdims=True)) / tau
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
