"""Reference numpy backend for the relaxed-boundary soft-minimum alignment DP.

Kept loop-for-loop identical to the compiled kernel in ``_softdp.pyx`` so the
two backends can be differential-tested against each other.
"""

from __future__ import annotations

import math

import numpy as np


def _softmin(values, gamma):
    lo = min(values)
    if not math.isfinite(lo):
        return math.inf
    total = 0.0
    for v in values:
        total += math.exp(-(v - lo) / gamma)
    return lo - gamma * math.log(total)


def dp_forward(costs, gamma):
    """Accumulate a batch of cost matrices, returning (values, tables).

    ``costs`` is (B, R, C) float64. Cell (i, j) adds ``costs[i, j]`` to a soft
    minimum over its allowed predecessors: diagonal (i-1, j-1) and vertical
    (i-1, j) everywhere, horizontal (i, j-1) only into the last column, plus a
    free entry point (accumulated value 0) anywhere in the first column. The
    final value is the soft minimum over the last column, so a path may exit
    at any row. Unreachable cells hold +inf.
    """
    costs = np.ascontiguousarray(costs, dtype=np.float64)
    batch, n_rows, n_cols = costs.shape
    acc = np.full((batch, n_rows, n_cols), np.inf)
    values = np.empty(batch)
    last = n_cols - 1
    for k in range(batch):
        for i in range(n_rows):
            for j in range(n_cols):
                preds = []
                if j == 0:
                    preds.append(0.0)
                if i > 0:
                    if j > 0:
                        preds.append(acc[k, i - 1, j - 1])
                    preds.append(acc[k, i - 1, j])
                if j == last and j > 0:
                    preds.append(acc[k, i, j - 1])
                if preds:
                    acc[k, i, j] = costs[k, i, j] + _softmin(preds, gamma)
        values[k] = _softmin(list(acc[k, :, last]), gamma)
    return values, acc


def dp_grad(costs, acc, values, gamma):
    """d(value)/d(costs), reverse accumulation over the stored tables.

    Edge weights are recovered from the forward tables via
    ``w(p -> c) = exp((acc[c] - costs[c] - acc[p]) / gamma)``, which is the
    softmin weight of predecessor ``p`` among the predecessors of ``c``.
    """
    costs = np.ascontiguousarray(costs, dtype=np.float64)
    batch, n_rows, n_cols = costs.shape
    grads = np.zeros((batch, n_rows, n_cols))
    last = n_cols - 1
    for k in range(batch):
        for i in range(n_rows - 1, -1, -1):
            for j in range(n_cols - 1, -1, -1):
                here = acc[k, i, j]
                if not math.isfinite(here):
                    continue
                e = 0.0
                if j == last:
                    e += math.exp((values[k] - here) / gamma)
                if i + 1 < n_rows and j + 1 < n_cols:
                    child = acc[k, i + 1, j + 1]
                    if math.isfinite(child):
                        e += math.exp((child - costs[k, i + 1, j + 1] - here) / gamma) * grads[k, i + 1, j + 1]
                if i + 1 < n_rows:
                    child = acc[k, i + 1, j]
                    if math.isfinite(child):
                        e += math.exp((child - costs[k, i + 1, j] - here) / gamma) * grads[k, i + 1, j]
                if j + 1 == last and j + 1 < n_cols:
                    child = acc[k, i, j + 1]
                    if math.isfinite(child):
                        e += math.exp((child - costs[k, i, j + 1] - here) / gamma) * grads[k, i, j + 1]
                grads[k, i, j] = e
    return grads
