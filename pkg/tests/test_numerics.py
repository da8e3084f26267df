import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wcmi.numerics import (
    PerturbationBudget,
    binary_entropy,
    derive_seed,
    discrete_mutual_information,
    dual_norm,
    entropy,
    erfc,
    normal_interval_prob,
    parse_norm,
    project_ball,
    seeded_rng,
    std_normal_cdf,
    steepest_direction,
)

mpmath.mp.dps = 40


def mp_phi(x):
    return float(mpmath.ncdf(x))


class TestNormalCdf:
    def test_against_mpmath_on_grid(self):
        xs = np.linspace(-40.0, 40.0, 4001)
        err = max(abs(std_normal_cdf(x) - mp_phi(x)) for x in xs)
        assert err <= 1e-15

    def test_lower_tail_relative_accuracy(self):
        # rounding x by one ulp already moves Phi(x) by about x^2 ulps relatively
        for x in (-5.0, -10.0, -20.0, -37.5):
            ref = mp_phi(x)
            assert abs(std_normal_cdf(x) - ref) <= 1e-15 * (1.0 + x * x) * ref

    def test_quoted_values(self):
        assert round(std_normal_cdf(1.0), 6) == 0.841345
        assert round(std_normal_cdf(-1.0), 6) == 0.158655

    def test_reflection_identity_on_grid(self):
        for x in np.linspace(-30, 30, 601):
            assert abs(std_normal_cdf(x) + std_normal_cdf(-x) - 1.0) <= 1e-12

    def test_erfc_relative_accuracy(self):
        for x in np.linspace(0.0, 26.0, 521):
            ref = float(mpmath.erfc(x))
            assert abs(erfc(x) - ref) <= 1e-13 * ref

    def test_symmetry_and_center(self):
        assert std_normal_cdf(0.0) == 0.5
        for x in (0.3, 1.7, 4.2):
            assert abs(std_normal_cdf(x) + std_normal_cdf(-x) - 1.0) <= 2e-16

    def test_saturation(self):
        assert std_normal_cdf(40.0) == 1.0
        assert 0.0 <= std_normal_cdf(-40.0) < 1e-300

    @pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(ValueError):
            std_normal_cdf(bad)

    @given(st.floats(-8, 8), st.floats(-8, 8))
    def test_monotone(self, a, b):
        lo, hi = min(a, b), max(a, b)
        assert std_normal_cdf(lo) <= std_normal_cdf(hi)

    def test_interval_prob(self):
        assert normal_interval_prob(1.0, 0.5) == 0.0
        ref = float(mpmath.ncdf(6.5) - mpmath.ncdf(6.0))
        assert abs(normal_interval_prob(6.0, 6.5) - ref) <= 1e-12 * ref


class TestBinaryEntropy:
    def test_known_values(self):
        assert binary_entropy(0.0) == 0.0
        assert binary_entropy(1.0) == 0.0
        assert abs(binary_entropy(0.5) - math.log(2)) < 1e-16

    def test_against_mpmath(self):
        for t in (1e-12, 0.01, 0.2, 0.37, 0.9):
            t_mp = mpmath.mpf(t)
            ref = float(-t_mp * mpmath.log(t_mp) - (1 - t_mp) * mpmath.log(1 - t_mp))
            assert abs(binary_entropy(t) - ref) <= 1e-15

    @pytest.mark.parametrize("bad", [-1e-9, 1.0000001, math.nan])
    def test_domain(self, bad):
        with pytest.raises(ValueError):
            binary_entropy(bad)

    def test_quoted_value(self):
        # 0.3791 is 1/2 - p_int/2 of the mixture running example rounded to 4 digits
        p_int = std_normal_cdf(1.5) - std_normal_cdf(0.5)
        theta = 0.5 - 0.5 * p_int
        assert round(binary_entropy(theta), 5) == 0.66364
        slope = math.log((1 - 0.3791) / 0.3791)
        assert abs(binary_entropy(0.3791) - 0.66364) <= slope * abs(theta - 0.3791) + 5e-6

    def test_concave_on_grid(self):
        h = np.array([binary_entropy(t) for t in np.linspace(0, 1, 201)])
        assert np.all(h[:-2] + h[2:] - 2 * h[1:-1] <= 1e-15)

    @given(st.floats(0, 1))
    def test_symmetric_and_bounded(self, t):
        h = binary_entropy(t)
        assert 0.0 <= h <= math.log(2) + 1e-15
        assert abs(h - binary_entropy(1.0 - t)) <= 1e-12


class TestDiscreteMI:
    def test_table_value(self):
        # 0.8 ln 1.6 + 0.2 ln 0.4 by hand
        ref = 0.8 * math.log(1.6) + 0.2 * math.log(0.4)
        assert abs(discrete_mutual_information([[0.4, 0.1], [0.1, 0.4]]) - ref) < 1e-15
        assert abs(ref - 0.1927) < 1e-4

    def test_random_tables_nonnegative(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            t = rng.random((rng.integers(1, 5), rng.integers(1, 5)))
            t /= t.sum()
            assert discrete_mutual_information(t) >= 0.0
            assert discrete_mutual_information(np.outer(t.sum(1), t.sum(0))) == 0.0

    def test_identity_coupling(self):
        assert abs(discrete_mutual_information(np.eye(2) / 2) - math.log(2)) < 1e-16

    def test_independent_is_zero(self):
        assert discrete_mutual_information(np.outer([0.2, 0.8], [0.5, 0.3, 0.2])) == 0.0

    def test_diagonal_gives_entropy(self):
        p = np.array([0.1, 0.2, 0.7])
        assert abs(discrete_mutual_information(np.diag(p)) - entropy(p)) < 1e-15

    @pytest.mark.parametrize(
        "table", [[[0.5, 0.6], [0.0, 0.0]], [[-0.1, 0.6], [0.3, 0.2]], [[0.5, math.nan], [0.25, 0.25]], [0.5, 0.5]]
    )
    def test_invalid_tables(self, table):
        with pytest.raises(ValueError):
            discrete_mutual_information(table)

    @settings(max_examples=50)
    @given(st.lists(st.floats(0.01, 1.0), min_size=6, max_size=6))
    def test_nonnegative_and_bounded(self, w):
        t = np.array(w).reshape(2, 3)
        t /= t.sum()
        mi = discrete_mutual_information(t)
        assert 0.0 <= mi <= min(entropy(t.sum(1)), entropy(t.sum(0))) + 1e-12


vec = st.lists(st.floats(-5, 5), min_size=3, max_size=3).map(np.array)


class TestProjection:
    @pytest.mark.parametrize("p", [2, "inf"])
    def test_interior_unchanged(self, p):
        b = PerturbationBudget(p=p, epsilon=1.0)
        x = np.array([0.1, -0.2, 0.3])
        assert np.array_equal(project_ball(x, np.zeros(3), b), x)

    @given(vec, vec, st.floats(0.0, 2.0))
    def test_inside_and_idempotent(self, point, center, eps):
        for p in (2, "inf"):
            b = PerturbationBudget(p=p, epsilon=eps)
            q = project_ball(point, center, b)
            norm = np.max(np.abs(q - center)) if p == "inf" else np.linalg.norm(q - center)
            assert norm <= eps * (1 + 1e-12) + 1e-12
            assert np.allclose(project_ball(q, center, b), q, atol=1e-12)

    def test_one_dimensional_clamp(self):
        b = PerturbationBudget(p="inf", epsilon=0.1)
        assert project_ball(np.array([0.7]), np.array([0.5]), b)[0] == pytest.approx(0.6, abs=1e-15)

    @given(vec, vec, st.floats(0.0, 2.0))
    def test_never_moves_away_from_center(self, point, center, eps):
        b = PerturbationBudget(p=2, epsilon=eps)
        q = project_ball(point, center, b)
        assert np.linalg.norm(q - center) <= np.linalg.norm(point - center) + 1e-12

    def test_box_clamp(self):
        b = PerturbationBudget(p="inf", epsilon=0.5, domain_box=(0.0, 1.0))
        out = project_ball(np.array([[1.4, -0.3]]), np.array([[0.9, 0.1]]), b)
        assert np.array_equal(out, [[1.0, 0.0]])

    def test_l2_direction_preserved(self):
        b = PerturbationBudget(p=2, epsilon=1.0)
        out = project_ball(np.array([3.0, 4.0]), np.zeros(2), b)
        assert np.allclose(out, [0.6, 0.8])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            project_ball(np.zeros(2), np.zeros(3), PerturbationBudget())


class TestBudgetAndDualNorm:
    def test_parse(self):
        assert parse_norm("inf") == math.inf and parse_norm(2) == 2.0
        with pytest.raises(ValueError):
            parse_norm(1)
        with pytest.raises(ValueError):
            PerturbationBudget(epsilon=-0.1)
        with pytest.raises(ValueError):
            PerturbationBudget(domain_box=(1.0, 0.0))

    def test_dual_norms(self):
        w = np.array([0.6, -0.8])
        assert dual_norm(w, PerturbationBudget(p="inf")) == pytest.approx(1.4, abs=1e-15)
        assert dual_norm(w, PerturbationBudget(p=2)) == pytest.approx(1.0, abs=1e-15)
        assert dual_norm([1, 0], PerturbationBudget(p=2)) == 1.0
        assert dual_norm([1, -1, 1], PerturbationBudget(p="inf")) == 3.0
        assert dual_norm([3, 4], PerturbationBudget(p=2)) == 5.0

    @given(vec, vec)
    def test_hoelder(self, w, v):
        # <w, v> <= ||v||_p ||w||_q
        for p, pn in ((2, np.linalg.norm(v)), ("inf", np.max(np.abs(v)))):
            assert float(w @ v) <= pn * dual_norm(w, PerturbationBudget(p=p)) + 1e-9

    def test_steepest_direction_attains_dual_norm(self):
        g = np.array([[0.3, -2.0, 0.0]])
        assert float(steepest_direction(g, math.inf)[0] @ g[0]) == pytest.approx(2.3)
        assert float(steepest_direction(g, 2.0)[0] @ g[0]) == pytest.approx(np.linalg.norm(g))
        assert np.array_equal(steepest_direction(np.zeros((1, 3)), 2.0), np.zeros((1, 3)))


class TestSeeding:
    def test_derive_seed_stable_and_distinct(self):
        a = derive_seed(7, "critic-init")
        assert a == derive_seed(7, "critic-init")
        assert a != derive_seed(7, "critic-init", 1)
        assert a != derive_seed(8, "critic-init")
        assert 0 <= a < 2**64

    def test_rng_reproducible(self):
        assert np.array_equal(seeded_rng(5).random(4), seeded_rng(5).random(4))
