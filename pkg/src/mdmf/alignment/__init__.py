"""Soft-minimum sequence alignment with relaxed start/end boundaries.

The dynamic program scores monotone alignment paths through a frame-cost
matrix: a path may enter at any row of the first column, advance by diagonal
or vertical steps (horizontal only into the last column), and exit at any row
of the last column. The score is the gamma-smoothed minimum
``-gamma * log(sum_paths(exp(-cost(path) / gamma)))``.

Two interchangeable backends provide ``dp_forward`` / ``dp_grad``: a Cython
kernel built at install time and a numpy reference. The compiled one is
preferred when importable.
"""

from __future__ import annotations

try:
    from . import _softdp as _backend

    BACKEND = "cython"
except ImportError:  # extension not built; fall back to the reference
    from . import _softdp_py as _backend

    BACKEND = "python"

from . import _softdp_py as reference

dp_forward = _backend.dp_forward
dp_grad = _backend.dp_grad

__all__ = ["BACKEND", "dp_forward", "dp_grad", "reference"]
