"""Counter-based uniforms addressed by (stream, replication, series, time).

Every cell of a simulation draws from its own position in a SplitMix64-style
hash sequence, so results do not depend on how replications are scheduled
across workers or in which order cells are visited.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31 = np.uint64(30), np.uint64(27), np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0

MAIN = 0
INIT = 1


def _mix(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def cell_keys(seed, stream, reps, n_series):
    """Per-(replication, series) keys, shape (len(reps), n_series)."""
    reps = np.asarray(reps, dtype=np.uint64).reshape(-1, 1)
    series = np.arange(n_series, dtype=np.uint64).reshape(1, -1)
    with np.errstate(over="ignore"):
        base = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GOLDEN * np.uint64(stream + 1))
        k = _mix(base ^ (reps * _GOLDEN + np.uint64(0x632BE59BD9B4E019)))
        k = _mix(k + series * _GOLDEN)
    return k


def uniforms(keys, t):
    """Uniform draws on (0, 1] for time index ``t`` (a nonnegative integer).

    The interval is closed at 1 so that ``u <= p`` is never true for p = 0 and
    always true for p = 1.
    """
    with np.errstate(over="ignore"):
        z = _mix(keys + _GOLDEN * np.uint64(t + 1))
    return ((z >> _S11).astype(np.float64) + 1.0) * _INV53
