"""Central-difference helpers shared by the gradient tests."""

import numpy as np


def directional_fd(f, x, v, h=1e-4):
    """Fourth-order central difference of f along v.

    Truncation is O(h^4) and roundoff O(eps/h), so h = 1e-4 keeps both far
    below the 1e-6 tolerances for O(1) losses.
    """
    return (8.0 * (f(x + h * v) - f(x - h * v)) - (f(x + 2 * h * v) - f(x - 2 * h * v))) / (12.0 * h)


def rel_err(a, b, floor=1e-12):
    return abs(a - b) / max(abs(a), abs(b), floor)


def probe(f, grad, x, rng, h=1e-4):
    """Relative error of grad . v against the FD directional derivative, v random unit."""
    v = rng.standard_normal(x.shape)
    v /= np.linalg.norm(v)
    return rel_err(float(grad @ v), directional_fd(f, x, v, h))
