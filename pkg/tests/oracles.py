"""Independent oracles shared by the test modules.

The path enumeration mirrors the documented alignment rules directly (enter
at any row of the first column; diagonal/vertical steps everywhere;
horizontal only into the last column; end at any row of the last column) and
never calls the dynamic program it is used to check.
"""

import math

import numpy as np


def enumerate_paths(n_rows, n_cols):
    last = n_cols - 1
    paths = []

    def extend(path):
        i, j = path[-1]
        if j == last:
            paths.append(list(path))
        if i + 1 < n_rows and j + 1 < n_cols:
            path.append((i + 1, j + 1))
            extend(path)
            path.pop()
        if i + 1 < n_rows:
            path.append((i + 1, j))
            extend(path)
            path.pop()
        if j + 1 == last:
            path.append((i, j + 1))
            extend(path)
            path.pop()

    for row in range(n_rows):
        extend([(row, 0)])
    return paths


def path_costs(cost):
    return np.array(
        [sum(cost[i, j] for i, j in p) for p in enumerate_paths(*cost.shape)]
    )


def oracle_softmin(cost, gamma):
    totals = path_costs(cost)
    if totals.size == 0:
        return math.inf
    lo = totals.min()
    return lo - gamma * math.log(np.exp(-(totals - lo) / gamma).sum())


def oracle_hardmin(cost):
    totals = path_costs(cost)
    return math.inf if totals.size == 0 else float(totals.min())


def oracle_bidirectional(cost, gamma):
    return 0.5 * (oracle_softmin(cost, gamma) + oracle_softmin(cost.T, gamma))


def central_difference_gradient(fn, x, step=1e-6):
    """Central finite differences of a scalar fn over a numpy array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        bumped = x.copy()
        bumped[idx] += step
        plus = fn(bumped)
        bumped[idx] -= 2 * step
        minus = fn(bumped)
        grad[idx] = (plus - minus) / (2 * step)
        it.iternext()
    return grad
