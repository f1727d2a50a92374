import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cdr import _core_py, kernels

try:
    from cdr import _core
except ImportError:  # extension not built
    _core = None

needs_ext = pytest.mark.skipif(_core is None, reason="compiled extension not built")
finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


class TestFallback:
    def test_compensated_sum_beats_naive(self):
        x = np.array([1.0, 1e100, 1.0, -1e100])
        assert _core_py.compensated_sum(x) == 2.0

    @given(hnp.arrays(np.float64, st.integers(0, 60), elements=finite))
    def test_compensated_sum_matches_fsum(self, x):
        assert _core_py.compensated_sum(x) == pytest.approx(math.fsum(x), rel=1e-15, abs=1e-9)

    def test_row_sums_match_rowwise(self, rng):
        x = rng.normal(size=(7, 33))
        np.testing.assert_array_equal(_core_py.compensated_row_sums(x),
                                      [_core_py.compensated_sum(r) for r in x])

    def test_trial_losses_formula(self, rng):
        obs = (rng.random((5, 12)) < 0.4).astype(np.uint8)
        e, e_hat = rng.random(12), rng.random(12)
        p, g = rng.uniform(0.1, 1, 12), (rng.random(12) < 0.5).astype(float)
        expected = [math.fsum(o * e / p + g * e_hat * (1 - o / p)) / 12 for o in obs]
        np.testing.assert_allclose(_core_py.cdr_trial_losses(obs, e, e_hat, p, g), expected, rtol=1e-14)


@needs_ext
class TestCompiledMatchesFallback:
    @given(hnp.arrays(np.float64, st.integers(0, 80), elements=finite))
    def test_compensated_sum(self, x):
        assert _core.compensated_sum(x) == _core_py.compensated_sum(x)

    def test_row_sums(self, rng):
        x = rng.normal(size=(11, 57)) * 10.0 ** rng.integers(-5, 5, (11, 57))
        np.testing.assert_array_equal(_core.compensated_row_sums(x), _core_py.compensated_row_sums(x))

    def test_trial_losses(self, rng):
        n = 200
        obs = (rng.random((50, n)) < 0.3).astype(np.uint8)
        e, e_hat = rng.random(n) * 2, rng.random(n) * 2
        p, g = rng.uniform(0.005, 1, n), (rng.random(n) < 0.5).astype(float)
        np.testing.assert_array_equal(_core.cdr_trial_losses(obs, e, e_hat, p, g),
                                      _core_py.cdr_trial_losses(obs, e, e_hat, p, g))

    def test_auc(self, rng):
        for _ in range(20):
            s = np.sort(np.round(rng.normal(size=40), 1))
            l = (rng.random(40) < 0.5).astype(float)
            assert _core.auc_from_sorted(s, l) == _core_py.auc_from_sorted(s, l)


def test_backend_reported():
    import cdr
    assert cdr.BACKEND == kernels.BACKEND in ("compiled", "python")


def test_env_var_forces_fallback():
    env = dict(os.environ, CDR_PURE_PYTHON="1")
    res = subprocess.run([sys.executable, "-c", "import cdr; print(cdr.BACKEND)"],
                         capture_output=True, text=True, env=env)
    assert res.stdout.strip() == "python"
