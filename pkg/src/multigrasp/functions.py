"""
Elementary laws shared by the codec, the loss and the metrics.

Like membership functions, the scalar laws work as closures:
they are primed with their constants first and called with the value second.

>>> f = focal(0)
>>> round(f(0.5), 6)
0.693147

The elementwise helpers below accept floats as well as numpy arrays and
always compute in double precision.
"""

from math import isinf, log, pi

import numpy as np

# probabilities are clamped to [EPS, 1 - EPS] before any logarithm
EPS = 1e-12

HALF_PI = pi / 2


#####################
# ANGLES            #
#####################


def normalize_angle(theta):
    """Map any angle onto [0, pi), using theta == theta + pi.

    >>> normalize_angle(pi)
    0.0
    >>> round(normalize_angle(-pi / 4), 12) == round(3 * pi / 4, 12)
    True
    """
    t = np.mod(theta, pi)
    # np.mod may return pi itself for tiny negative inputs
    t = np.where(t >= pi, 0.0, t)
    return float(t) if np.ndim(t) == 0 else t


def wrap_angle(delta):
    """Fold an angle difference into (-pi/2, pi/2].

    >>> wrap_angle(pi / 2)
    1.5707963267948966
    >>> wrap_angle(-pi / 2)
    1.5707963267948966
    >>> round(wrap_angle(3 * pi / 4), 12) == round(-pi / 4, 12)
    True
    """
    w = HALF_PI - np.mod(HALF_PI - np.asarray(delta, dtype=float), pi)
    return float(w) if np.ndim(w) == 0 else w


########################
# ACTIVATIONS          #
########################


def sigmoid(t):
    """Logistic function, overflow-free for large |t|."""
    t = np.asarray(t, dtype=float)
    e = np.exp(-np.abs(t))
    out = np.where(t >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def logit(p, *, eps=1e-6):
    """Inverse of sigmoid with the argument clamped to [eps, 1 - eps]."""
    p = np.clip(np.asarray(p, dtype=float), eps, 1.0 - eps)
    out = np.log(p) - np.log1p(-p)
    return float(out) if out.ndim == 0 else out


def softplus(t):
    """log(1 + e^t); equals -log(1 - sigmoid(t)) and -log(sigmoid(-t))."""
    out = np.logaddexp(0.0, np.asarray(t, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def log_softmax(z, axis=-1):
    """Numerically stable log of softmax along `axis`."""
    z = np.asarray(z, dtype=float)
    m = np.max(z, axis=axis, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(z, axis=-1):
    """Softmax along `axis`; rows sum to 1."""
    return np.exp(log_softmax(z, axis=axis))


########################
# LAWS                 #
########################


def focal(gamma):
    """Focal loss as a function of the probability of the true class.

    FL(p_t) = -(1 - p_t)^gamma * ln(p_t)
    with p_t clamped to >= EPS. gamma == 0 gives cross-entropy.

    >>> round(focal(2)(0.5), 6)
    0.173287
    >>> focal(2)(1.0)
    0.0
    """
    assert gamma >= 0, "gamma can't be negative"

    def f(p_t):
        p = min(max(p_t, EPS), 1.0)
        # 0 ** 0 == 1 keeps gamma == 0 a plain cross-entropy
        return -((1.0 - p) ** gamma) * log(p) + 0.0

    return f


def binary_focal(gamma):
    """Focal-modulated binary cross-entropy for one slot.

    Target slots score -(1 - s)^gamma ln s, the others -s^gamma ln(1 - s).
    """
    fl = focal(gamma)

    def f(s, target):
        s = min(max(s, EPS), 1.0 - EPS)
        return fl(s) if target else fl(1.0 - s)

    return f


def finite(*values):
    """True if no value is NaN or infinite."""
    for v in values:
        if np.ndim(v) == 0:
            if v != v or isinf(v):
                return False
        elif not np.all(np.isfinite(v)):
            return False
    return True


if __name__ == "__main__":
    import doctest

    doctest.testmod()
