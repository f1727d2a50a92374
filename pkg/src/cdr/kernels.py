"""Backend selection for the hot loops.

The compiled extension ``cdr._core`` is used when it imports; otherwise the
numpy fallback in ``cdr._core_py`` is used. Setting ``CDR_PURE_PYTHON=1``
forces the fallback.
"""
import os

import numpy as np

from . import _core_py

if os.environ.get("CDR_PURE_PYTHON", "") not in ("", "0"):
    _impl = _core_py
    BACKEND = "python"
else:
    try:
        from . import _core as _impl

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _core_py
        BACKEND = "python"


def _f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def compensated_sum(x):
    """Neumaier-compensated sum of a 1-D array, in index order."""
    return float(_impl.compensated_sum(_f64(x)))


def compensated_row_sums(x):
    """Compensated sum of each row of a 2-D array."""
    return _impl.compensated_row_sums(_f64(x))


def cdr_trial_losses(obs, e, e_hat, p_hat, gamma):
    """CDR loss for every row of a (trials, pairs) 0/1 observation matrix."""
    obs = np.ascontiguousarray(obs, dtype=np.uint8)
    return _impl.cdr_trial_losses(obs, _f64(e), _f64(e_hat), _f64(p_hat), _f64(gamma))


def auc_from_sorted(scores, labels):
    return float(_impl.auc_from_sorted(_f64(scores), _f64(labels)))


__all__ = [
    "BACKEND",
    "compensated_sum",
    "compensated_row_sums",
    "cdr_trial_losses",
    "auc_from_sorted",
]
