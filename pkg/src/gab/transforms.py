"""Smooth bijections between R^k and constrained parameter blocks.

Stick-breaking maps z in R^k onto {x >= 0, sum(x) <= 1}; the leftover mass is
an implicit slack coordinate, so the image is the open simplex interior.
"""

import numpy as np
from scipy.special import expit, logit

_TINY = 1e-300


def stick_forward(z):
    """x_j = v_j * prod_{l<j} (1 - v_l), v = sigmoid(z).  Returns (x, dx/dz)."""
    z = np.asarray(z, float)
    k = z.size
    v = expit(z)
    rem = np.concatenate([[1.0], np.cumprod(1.0 - v)[:-1]]) if k else np.empty(0)
    x = v * rem
    J = np.zeros((k, k))
    dv = v * (1.0 - v)
    for j in range(k):
        J[j, j] = dv[j] * rem[j]
        # d rem_j / d z_l = -rem_j * v_l for l < j
        J[j, :j] = -x[j] * v[:j]
    return x, J


def stick_inverse(x):
    x = np.asarray(x, float)
    if (x < 0).any() or x.sum() > 1.0 + 1e-12:
        raise ValueError("point outside the simplex")
    rem = 1.0 - np.concatenate([[0.0], np.cumsum(x)[:-1]])
    v = np.clip(x / np.maximum(rem, _TINY), 1e-300, 1.0 - 1e-16)
    return logit(v)


class SimplexTransform:
    """Constrained block is a point of the stick-breaking simplex."""

    def __init__(self, k):
        self.k = k

    def forward(self, z):
        return stick_forward(z)

    def inverse(self, x):
        return stick_inverse(x)


class IdentityTransform:
    def __init__(self, k):
        self.k = k

    def forward(self, z):
        z = np.asarray(z, float)
        return z.copy(), np.eye(z.size)

    def inverse(self, x):
        return np.asarray(x, float).copy()


class PositiveThenSimplex:
    """First coordinate exp(z0) > 0, the rest on the stick-breaking simplex."""

    def __init__(self, k):
        self.k = k

    def forward(self, z):
        z = np.asarray(z, float)
        x = np.empty_like(z)
        J = np.zeros((z.size, z.size))
        x[0] = np.exp(z[0])
        J[0, 0] = x[0]
        x[1:], J[1:, 1:] = stick_forward(z[1:])
        return x, J

    def inverse(self, x):
        x = np.asarray(x, float)
        if x[0] <= 0:
            raise ValueError("first coordinate must be positive")
        return np.concatenate([[np.log(x[0])], stick_inverse(x[1:])])
