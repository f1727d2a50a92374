import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cdr import estimators as est
from cdr.estimators import EstimatorInputError, EstimatorInputs

E2 = dict(e=[0.8, 0.6], e_hat=[0.5, 0.2], o=[1, 0], p_hat=[0.5, 0.5])


def random_inputs(rng, n=None, gamma=None):
    n = int(rng.integers(1, 40)) if n is None else n
    e = rng.uniform(0, 2, n)
    return EstimatorInputs(
        e=e, e_hat=e * np.exp(rng.normal(0, 1, n)), p_hat=rng.uniform(0.05, 1, n),
        p_true=rng.uniform(0.05, 1, n), o=(rng.random(n) < 0.4).astype(float),
        gamma=(rng.random(n) < 0.5).astype(float) if gamma is None else gamma)


@st.composite
def inputs_strategy(draw, max_n=30):
    n = draw(st.integers(1, max_n))
    floats = lambda lo, hi: hnp.arrays(np.float64, n, elements=st.floats(lo, hi))
    bits = hnp.arrays(np.float64, n, elements=st.sampled_from([0.0, 1.0]))
    return EstimatorInputs(e=draw(floats(0, 10)), e_hat=draw(floats(0, 10)), p_hat=draw(floats(0.01, 1)),
                           p_true=draw(floats(0.01, 1)), o=draw(bits), gamma=draw(bits))


class TestLossExamples:
    @pytest.mark.parametrize("e, expected", [([0.5, 0.5], 0.5), ([1, 0], 0.5), ([0.8, 0.6, 0.1], 0.5)])
    def test_ideal(self, e, expected):
        assert est.ideal_loss(EstimatorInputs(e=e)) == pytest.approx(expected, abs=1e-15)

    def test_naive(self):
        assert est.naive_loss(EstimatorInputs(e=[0.8, 0.6], o=[1, 0])) == pytest.approx(0.4, abs=1e-15)

    def test_naive_full_and_empty_observation(self, rng):
        e = rng.random(10)
        assert est.naive_loss(EstimatorInputs(e=e, o=np.ones(10))) == est.ideal_loss(EstimatorInputs(e=e))
        assert est.naive_loss(EstimatorInputs(e=e, o=np.zeros(10))) == 0.0

    def test_ips(self):
        assert est.ips_loss(EstimatorInputs(e=[0.8, 0.6], o=[1, 0], p_hat=[0.5, 0.5])) == pytest.approx(0.8, abs=1e-15)

    def test_ips_unit_propensity_is_naive(self, rng):
        x = EstimatorInputs(e=rng.random(10), o=np.ones(10), p_hat=np.ones(10))
        assert est.ips_loss(x) == est.naive_loss(x)

    def test_ips_nothing_observed(self):
        assert est.ips_loss(EstimatorInputs(e=[1, 2], o=[0, 0], p_hat=[0.3, 0.3])) == 0.0

    def test_dr(self):
        assert est.dr_loss(EstimatorInputs(**E2)) == pytest.approx(0.65, abs=1e-15)

    def test_dr_perfect_imputation_is_ideal(self, rng):
        e = rng.random(20)
        x = EstimatorInputs(e=e, e_hat=e, o=(rng.random(20) < 0.5), p_hat=rng.uniform(0.1, 1, 20))
        assert est.dr_loss(x) == pytest.approx(est.ideal_loss(x), rel=1e-14)

    def test_dr_nothing_observed(self):
        x = EstimatorInputs(e=[1, 2], e_hat=[0.25, 0.5], o=[0, 0], p_hat=[0.3, 0.3])
        assert est.dr_loss(x) == 0.375

    def test_cdr(self):
        assert est.cdr_loss(EstimatorInputs(**E2, gamma=[0, 1])) == pytest.approx(0.9, abs=1e-15)

    def test_eib(self):
        assert est.eib_loss(EstimatorInputs(**E2, gamma=[1, 1])) == pytest.approx(0.5, abs=1e-15)

    def test_eib_reductions(self, rng):
        x = random_inputs(rng, 25)
        assert est.eib_loss(x.replace(gamma=np.zeros(25))) == est.naive_loss(x)
        full = x.replace(o=np.ones(25))
        assert est.eib_loss(full) == est.naive_loss(full)


class TestValidation:
    def test_length_mismatch(self):
        with pytest.raises(EstimatorInputError, match="length"):
            EstimatorInputs(e=[1, 2], o=[1])

    def test_propensity_below_floor(self):
        with pytest.raises(EstimatorInputError):
            EstimatorInputs(e=[1], p_hat=[0.01], floor=0.05)

    def test_zero_propensity(self):
        with pytest.raises(EstimatorInputError):
            EstimatorInputs(e=[1], p_hat=[0.0])

    def test_non_binary_gamma(self):
        with pytest.raises(EstimatorInputError, match="gamma"):
            EstimatorInputs(e=[1], gamma=[0.5])

    def test_missing_gamma(self):
        with pytest.raises(EstimatorInputError, match="gamma"):
            est.cdr_loss(EstimatorInputs(**E2))

    def test_missing_e_hat(self):
        with pytest.raises(EstimatorInputError, match="e_hat"):
            est.dr_loss(EstimatorInputs(e=[1], o=[1], p_hat=[1]))

    def test_missing_p_true(self):
        with pytest.raises(EstimatorInputError, match="p_true"):
            est.ips_bias(EstimatorInputs(e=[1], p_hat=[1]))

    def test_empty(self):
        with pytest.raises(EstimatorInputError, match="empty"):
            est.ideal_loss(EstimatorInputs(e=[]))

    def test_kappa_range(self):
        x = EstimatorInputs(e=[1], e_hat=[1], p_hat=[1], gamma=[1])
        for k in (0.0, 1.0, -0.1):
            with pytest.raises(EstimatorInputError):
                est.cdr_tail_bound(x, k)


class TestMomentExamples:
    def test_ips_bias_zero_when_exact(self, rng):
        x = random_inputs(rng)
        assert est.ips_bias(x.replace(p_true=x.p_hat)) == 0.0

    def test_ips_one_pair(self):
        assert est.ips_bias(EstimatorInputs(e=[1], p_true=[0.5], p_hat=[0.25])) == 1.0
        assert est.ips_variance(EstimatorInputs(e=[1], p_true=[0.5], p_hat=[0.5])) == 1.0

    def test_dr_one_pair(self):
        x = EstimatorInputs(e=[1], e_hat=[0.5], p_true=[0.5], p_hat=[0.25])
        assert est.dr_bias(x) == 0.5
        assert est.dr_variance(x) == 1.0

    def test_dr_exact_imputation(self, rng):
        x = random_inputs(rng)
        x = x.replace(e_hat=x.e)
        assert est.dr_bias(x) == 0.0 and est.dr_variance(x) == 0.0

    def test_cdr_reduces(self, rng):
        x = random_inputs(rng, 30)
        assert est.cdr_bias(x.replace(gamma=np.zeros(30))) == est.ips_bias(x)
        assert est.cdr_variance(x.replace(gamma=np.zeros(30))) == est.ips_variance(x)
        assert est.cdr_bias(x.replace(gamma=np.ones(30))) == est.dr_bias(x)
        assert est.cdr_variance(x.replace(gamma=np.ones(30))) == est.dr_variance(x)

    def test_cdr_three_pair_term_by_term(self):
        e, eh = [1.0, 0.4, 2.0], [0.5, 1.2, 2.5]
        p, ph, g = [0.5, 0.2, 0.9], [0.25, 0.4, 0.6], [1, 0, 1]
        x = EstimatorInputs(e=e, e_hat=eh, p_true=p, p_hat=ph, gamma=g)
        bias_terms = [(p[k] - ph[k]) / ph[k] * (g[k] * (e[k] - eh[k]) + (1 - g[k]) * e[k]) for k in range(3)]
        var_terms = [p[k] * (1 - p[k]) / ph[k] ** 2 * (g[k] * (eh[k] - e[k]) ** 2 + (1 - g[k]) * e[k] ** 2)
                     for k in range(3)]
        assert est.cdr_bias(x) == pytest.approx(abs(math.fsum(bias_terms)) / 3, rel=1e-14)
        assert est.cdr_variance(x) == pytest.approx(math.fsum(var_terms) / 9, rel=1e-14)

    def test_expectation_matches_enumeration(self, rng):
        x = random_inputs(rng, 6)
        total = 0.0
        for bits in np.ndindex(*(2,) * 6):
            o = np.array(bits, dtype=float)
            prob = np.prod(np.where(o == 1, x.p_true, 1 - x.p_true))
            total += prob * est.cdr_loss(x.replace(o=o))
        assert est.cdr_expectation(x) == pytest.approx(total, rel=1e-12)
        assert abs(total - est.ideal_loss(x)) == pytest.approx(est.cdr_bias(x), rel=1e-10, abs=1e-14)

    def test_variance_matches_enumeration(self, rng):
        x = random_inputs(rng, 6)
        mean = sq = 0.0
        for bits in np.ndindex(*(2,) * 6):
            o = np.array(bits, dtype=float)
            prob = np.prod(np.where(o == 1, x.p_true, 1 - x.p_true))
            v = est.cdr_loss(x.replace(o=o))
            mean += prob * v
            sq += prob * v * v
        assert est.cdr_variance(x) == pytest.approx(sq - mean * mean, rel=1e-9)


class TestTailBound:
    def test_zero_when_exact(self, rng):
        x = random_inputs(rng, 10)
        assert est.cdr_tail_bound(x.replace(gamma=np.ones(10), e_hat=x.e), 0.05) == 0.0

    def test_one_pair(self):
        x = EstimatorInputs(e=[1], e_hat=[0], p_hat=[0.5], gamma=[0])
        assert est.cdr_tail_bound(x, 0.05) == pytest.approx(math.sqrt(math.log(40) / 2 * 4), rel=1e-15)
        assert est.cdr_tail_bound(x, 0.05) == pytest.approx(2.716, abs=5e-4)

    def test_monotone_in_kappa(self, rng):
        x = random_inputs(rng, 15)
        values = [est.cdr_tail_bound(x, k) for k in (0.01, 0.1, 0.5, 0.9, 0.999999)]
        assert all(a > b for a, b in zip(values, values[1:]))
        total = np.sum(((x.gamma * (x.e - x.e_hat) ** 2 + (1 - x.gamma) * x.e ** 2) / x.p_hat ** 2))
        assert values[-1] == pytest.approx(math.sqrt(math.log(2) * total / (2 * 15 ** 2)), rel=1e-5)

    def test_ips_and_dr_variants(self, rng):
        x = random_inputs(rng, 12)
        assert est.ips_tail_bound(x, 0.1) == est.cdr_tail_bound(x.replace(gamma=np.zeros(12)), 0.1)
        assert est.dr_tail_bound(x, 0.1) == est.cdr_tail_bound(x.replace(gamma=np.ones(12)), 0.1)


class TestPoisonous:
    def test_exact(self, rng):
        e = rng.random(10)
        assert est.poisonous_ratio(e, e) == 0.0

    def test_three_pairs(self):
        assert est.poisonous_ratio([1, 1, 1], [1.5, 2.5, 0.4]) == pytest.approx(1 / 3)

    def test_triple(self, rng):
        e = rng.uniform(0.1, 1, 10)
        assert est.poisonous_ratio(e, 3 * e) == 1.0

    def test_errors(self):
        with pytest.raises(EstimatorInputError):
            est.poisonous_ratio([], [])
        with pytest.raises(EstimatorInputError):
            est.poisonous_ratio([1], [1, 2])

    def test_oracle_gamma_is_complement_up_to_ties(self):
        e = np.array([1.0, 1.0, 1.0, 1.0])
        e_hat = np.array([1.5, 2.5, 2.0, 0.0])
        np.testing.assert_array_equal(est.oracle_gamma(e, e_hat), [1, 0, 0, 0])


class TestProperties:
    @given(inputs_strategy())
    def test_interpolation_identities_bit_exact(self, x):
        n = len(x)
        assert est.cdr_loss(x.replace(gamma=np.zeros(n))) == est.ips_loss(x)
        assert est.cdr_loss(x.replace(gamma=np.ones(n))) == est.dr_loss(x)

    @given(inputs_strategy())
    def test_doubly_robust(self, x):
        assert est.dr_bias(x.replace(p_hat=x.p_true)) <= 1e-12
        assert est.dr_bias(x.replace(e_hat=x.e)) <= 1e-12

    @given(inputs_strategy())
    def test_oracle_dominance(self, x):
        y = x.replace(gamma=est.oracle_gamma(x.e, x.e_hat))
        assert est.cdr_variance(y) <= min(est.ips_variance(y), est.dr_variance(y))
        assert est.cdr_tail_bound(y, 0.05) <= min(est.ips_tail_bound(y, 0.05), est.dr_tail_bound(y, 0.05))

    @given(inputs_strategy())
    def test_moments_non_negative(self, x):
        assert est.cdr_bias(x) >= 0 and est.cdr_variance(x) >= 0

    @given(inputs_strategy(max_n=8))
    def test_summation_order_is_pair_order(self, x):
        # the reported loss is the mean of the per-pair terms, summed exactly up to rounding
        terms = x.o * x.e / x.p_hat + x.gamma * x.e_hat * (1 - x.o / x.p_hat)
        assert est.cdr_loss(x) == pytest.approx(math.fsum(terms) / len(x), rel=1e-15, abs=1e-300)


class TestReport:
    def test_json_keys(self, rng):
        r = est.report(random_inputs(rng), "cdr", kappa=0.05)
        body = json.loads(r.to_json())
        assert list(body) == ["value", "bias", "variance", "tail_bound"]
        assert est.EstimatorReport.from_json(r.to_json()) == r

    def test_moments_only_with_p_true(self, rng):
        x = random_inputs(rng).replace(p_true=None)
        r = est.report(x, "dr")
        assert r.bias is None and r.variance is None and r.tail_bound is None
