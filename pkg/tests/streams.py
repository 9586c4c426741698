"""Random measurement-vector streams shared by the mixer tests."""
import numpy as np


def policy_stream(seed: int, m: int, length: int = 500):
    """(ids, points, tau) for a stream of ``length`` policies in R^(m+1).

    Even seeds draw fresh Gaussian points; odd seeds draw repeatedly from a pool
    of eight, the way a training loop revisits the same best responses.  The
    threshold sits at zero so roughly 2^-m of the points are feasible.
    """
    rng = np.random.default_rng([seed, m, length])
    if seed % 2 == 0:
        points = rng.normal(size=(length, m + 1))
        ids = [f"p{i}" for i in range(length)]
    else:
        pool = rng.normal(size=(8, m + 1))
        pick = rng.integers(0, 8, size=length)
        points = pool[pick]
        ids = [f"q{j}" for j in pick]
    return ids, points, np.zeros(m)


def acceptance_streams():
    """The 20 streams of length 500 used for the mixer equivalence and dominance checks."""
    return [(seed, m) for m in (1, 3) for seed in range(10)]
