"""The polynomial window transform."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import enumerate_windows, loop_power, naive_protect
from polyshield.params import ParamPolicy, generate_naive
from polyshield.transform import (
    PolyParams, PowerTable, ProtectedTemplate, format_template, integer_power, parse_template, protect,
    protect_values, protected_dim, window_indices,
)


def _random_params(rng, m, o):
    coeffs = rng.choice(np.r_[-100:0, 1:101], size=m, replace=False)
    return PolyParams(tuple(coeffs.tolist()), tuple((rng.permutation(m) + 1).tolist()), o)


class TestProtect:
    def test_hand_example_no_overlap(self):
        p = PolyParams((2, -3), (1, 2), 0)
        assert protect([1, 2, 3, 4], p).values.tolist() == [-10.0, -42.0]

    def test_hand_example_overlap_one(self):
        # windows (1,2), (2,3), (3,4); the last element is already covered,
        # so no padded (4, 0) window follows
        p = PolyParams((2, -3), (1, 2), 1)
        assert protect([1, 2, 3, 4], p).values.tolist() == [-10.0, -23.0, -42.0]

    def test_padding_only_on_last_window(self):
        # n=5, m=2, o=0: windows (1,2), (3,4), (5,0)
        p = PolyParams((2, -3), (1, 2), 0)
        assert protect([1, 2, 3, 4, 5], p).values.tolist() == [-10.0, -42.0, 10.0]

    def test_zeros_map_to_zeros(self, rng):
        for o in range(7):
            p = _random_params(rng, 7, o)
            assert not np.any(protect(np.zeros(40), p).values)

    @pytest.mark.parametrize("o,k", [(0, 74), (6, 506)])
    def test_dimensionality(self, rng, o, k):
        t = protect(rng.standard_normal(512), _random_params(rng, 7, o))
        assert t.k == k and t.source_dim == 512

    def test_too_short_input(self):
        with pytest.raises(ValueError, match="smaller than m"):
            protect(np.ones(4), PolyParams((1, 2, 3, 4, 5), (1, 2, 3, 4, 5)))

    def test_non_finite_input(self):
        with pytest.raises(ValueError, match="non-finite"):
            protect(np.array([1.0, np.nan, 2.0]), PolyParams((1, 2), (2, 1)))

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_overflow_caught_by_template(self):
        with pytest.raises(ValueError, match="non-finite"):
            protect(np.full(7, 1e200), PolyParams((1, 2, 3, 4, 5, 6, 7), (1, 2, 3, 4, 5, 6, 7)))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 8), st.integers(8, 64))
    def test_matches_window_loop_oracle(self, seed, m, n):
        rng = np.random.default_rng(seed)
        o = int(rng.integers(0, m))
        p = _random_params(rng, m, o)
        v = rng.standard_normal(n)
        expected = naive_protect(v, p.coefficients, p.exponents, o)
        assert np.array_equal(protect_values(v, p), expected)

    def test_batch_rows_equal_single(self, rng):
        p = _random_params(rng, 7, 3)
        X = rng.standard_normal((5, 50))
        batch = protect_values(X, p)
        for row, x in zip(batch, X):
            assert np.array_equal(row, protect_values(x, p))

    def test_deterministic(self, rng):
        p = _random_params(rng, 7, 2)
        v = rng.standard_normal(64)
        assert np.array_equal(protect(v, p).values, protect(v, p).values)

    def test_exponent_sensitivity(self):
        rng = np.random.default_rng(5)
        v = rng.uniform(0.1, 1.0, 64) * rng.choice([-1, 1], 64)
        assert len(np.unique(v)) == 64
        collisions = 0
        for _ in range(1000):
            a = _random_params(rng, 7, 0)
            exps = list(a.exponents)
            while exps == list(a.exponents):
                exps = (rng.permutation(7) + 1).tolist()
            b = PolyParams(a.coefficients, tuple(exps), 0)
            collisions += np.array_equal(protect_values(v, a), protect_values(v, b))
        assert collisions == 0

    def test_not_homogeneous(self, rng):
        p = _random_params(rng, 7, 0)
        v = rng.standard_normal(64)
        assert not np.allclose(protect_values(2 * v, p), 2 * protect_values(v, p))

    def test_power_table_bit_identical(self, rng):
        for _ in range(50):
            m = int(rng.integers(2, 9))
            X = rng.standard_normal((int(rng.integers(1, 6)), int(rng.integers(m, 70))))
            table = PowerTable(X, m)
            p = _random_params(rng, m, int(rng.integers(0, m)))
            assert np.array_equal(table.protect(p), protect_values(X, p))


class TestProtectedDim:
    def test_published_endpoints(self):
        assert protected_dim(512, 7, 6) == 506
        assert protected_dim(512, 7, 0) == 74

    def test_full_overlap_closed_form(self):
        for n in range(7, 200):
            assert protected_dim(n, 7, 6) == n - 7 + 1 == enumerate_windows(n, 7, 6)

    def test_exhaustive_against_enumeration(self):
        for m in range(1, 9):
            for n in range(m, 65):
                for o in range(m):
                    assert protected_dim(n, m, o) == enumerate_windows(n, m, o), (n, m, o)

    def test_no_pure_padding_window(self):
        # every window starts inside the data and every index is covered
        for m in range(1, 9):
            for n in range(m, 65):
                for o in range(m):
                    idx = window_indices(n, m, o)
                    assert idx[:, 0].max() < n
                    assert set(range(n)) <= set(idx.ravel().tolist())

    @pytest.mark.parametrize("n,m,o", [(3, 4, 0), (10, 4, 4), (10, 4, -1), (10, 0, 0)])
    def test_precondition_errors(self, n, m, o):
        with pytest.raises(ValueError):
            protected_dim(n, m, o)


class TestIntegerPower:
    def test_negative_base_odd_exponent(self):
        assert integer_power(-0.5, 3) == -0.125

    @settings(max_examples=100)
    @given(st.floats(allow_nan=False, allow_infinity=False))
    def test_identity(self, x):
        assert integer_power(x, 1) == x

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal(10000) * 3
        for e in range(1, 8):
            np.testing.assert_allclose(integer_power(x, e), loop_power(x, e), rtol=1e-14, atol=0)

    def test_small_exponents_exact(self, rng):
        # up to e=3 both schemes perform the same multiplications
        x = rng.standard_normal(1000)
        for e in (1, 2, 3):
            assert np.array_equal(integer_power(x, e), loop_power(x, e))

    def test_rejects_zero_exponent(self):
        with pytest.raises(ValueError):
            integer_power(2.0, 0)

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_overflow_propagates(self):
        assert integer_power(1e200, 2) == np.inf


class TestPolyParams:
    def test_invariants(self):
        with pytest.raises(ValueError, match="non-zero"):
            PolyParams((0, 1), (1, 2))
        with pytest.raises(ValueError, match="unique"):
            PolyParams((1, 1), (1, 2))
        with pytest.raises(ValueError, match="permutation"):
            PolyParams((1, 2), (1, 1))
        with pytest.raises(ValueError, match="overlap"):
            PolyParams((1, 2), (1, 2), 2)

    def test_identifier_from_secret(self):
        a = PolyParams((1, 2), (2, 1), 0)
        assert a.params_id == a.with_overlap(1).params_id
        assert a.params_id != PolyParams((1, 2), (1, 2)).params_id


class TestTemplateFile:
    def test_round_trip(self, rng):
        p = generate_naive(ParamPolicy(o=4), rng)
        t = protect(rng.standard_normal(40), p)
        text = format_template(t)
        assert text.splitlines()[0] == f"k={t.k} params={p.params_id} source_dim=40"
        back = parse_template(text)
        assert np.array_equal(back.values, t.values)
        assert (back.params_id, back.source_dim) == (t.params_id, t.source_dim)

    def test_count_mismatch(self):
        with pytest.raises(ValueError, match="k=3"):
            parse_template("k=3 params=x source_dim=9\n1 2\n")

    def test_template_rejects_nan(self):
        with pytest.raises(ValueError):
            ProtectedTemplate(np.array([np.nan]), "x", 7)
