import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nfcet.tensor3 import (
    ComplexTensor3,
    khatri_rao,
    kron,
    mode_product,
    mode_refold,
    mode_unfold,
    outer3,
    tucker_reconstruct,
    vectorize_tucker,
)


def rand_tensor(rng, dims):
    return ComplexTensor3(
        rng.standard_normal(dims) + 1j * rng.standard_normal(dims)
    )


def rand_matrix(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


class TestUnfold:
    def test_hand_derived_2x2x2(self):
        # entries numbered 1..8 in mode-1-fastest order
        t = ComplexTensor3.from_vec(np.arange(1, 9), (2, 2, 2))
        expect1 = np.array([[1, 3, 5, 7], [2, 4, 6, 8]])
        np.testing.assert_allclose(mode_unfold(t, 1).real, expect1)
        expect2 = np.array([[1, 2, 5, 6], [3, 4, 7, 8]])
        np.testing.assert_allclose(mode_unfold(t, 2).real, expect2)
        expect3 = np.array([[1, 2, 3, 4], [5, 6, 7, 8]])
        np.testing.assert_allclose(mode_unfold(t, 3).real, expect3)

    def test_column_index_formula(self):
        # 0-based column index of (i2, i3) in the mode-1 unfolding is i2 + i3*I2
        rng = np.random.default_rng(0)
        t = rand_tensor(rng, (3, 4, 5))
        m = mode_unfold(t, 1)
        for i2 in range(4):
            for i3 in range(5):
                np.testing.assert_allclose(m[:, i2 + i3 * 4], t.data[:, i2, i3])

    def test_refold_roundtrip(self):
        rng = np.random.default_rng(1)
        t = rand_tensor(rng, (2, 3, 4))
        for n in (1, 2, 3):
            back = mode_refold(mode_unfold(t, n), n, t.dims)
            np.testing.assert_allclose(back.data, t.data, atol=1e-14)

    def test_invalid_mode_raises(self):
        t = ComplexTensor3.zeros((2, 2, 2))
        with pytest.raises(ValueError):
            mode_unfold(t, 0)
        with pytest.raises(ValueError):
            mode_unfold(t, 4)


class TestModeProduct:
    def test_matches_unfold_multiply_refold(self):
        rng = np.random.default_rng(2)
        t = rand_tensor(rng, (3, 4, 5))
        for n, rows in ((1, 6), (2, 2), (3, 7)):
            d = rand_matrix(rng, (rows, t.dims[n - 1]))
            got = mode_product(t, d, n)
            ref = mode_refold(d @ mode_unfold(t, n), n,
                              tuple(rows if i == n - 1 else s for i, s in enumerate(t.dims)))
            np.testing.assert_allclose(got.data, ref.data, atol=1e-12)

    def test_dim_mismatch_raises(self):
        t = ComplexTensor3.zeros((2, 3, 4))
        with pytest.raises(ValueError):
            mode_product(t, np.eye(5), 1)


class TestTucker:
    def test_against_triple_loop(self):
        rng = np.random.default_rng(3)
        core = rand_tensor(rng, (2, 3, 2))
        d1 = rand_matrix(rng, (4, 2))
        d2 = rand_matrix(rng, (5, 3))
        d3 = rand_matrix(rng, (3, 2))
        got = tucker_reconstruct(core, d1, d2, d3)
        ref = np.zeros((4, 5, 3), dtype=complex)
        for a in range(2):
            for b in range(3):
                for c in range(2):
                    ref += core.data[a, b, c] * np.einsum(
                        "i,j,k->ijk", d1[:, a], d2[:, b], d3[:, c]
                    )
        np.testing.assert_allclose(got.data, ref, atol=1e-12)

    def test_vectorize_matches_kron(self):
        rng = np.random.default_rng(4)
        d1 = rand_matrix(rng, (3, 2))
        d2 = rand_matrix(rng, (4, 2))
        d3 = rand_matrix(rng, (2, 3))
        z = rand_matrix(rng, (12,))
        got = vectorize_tucker(z, d1, d2, d3)
        ref = kron(d3, kron(d2, d1)) @ z
        np.testing.assert_allclose(got, ref, atol=1e-12)

    def test_vectorize_matches_vec_of_reconstruct(self):
        rng = np.random.default_rng(5)
        d1 = rand_matrix(rng, (3, 2))
        d2 = rand_matrix(rng, (4, 3))
        d3 = rand_matrix(rng, (5, 2))
        z = rand_matrix(rng, (12,))
        core = ComplexTensor3.from_vec(z, (2, 3, 2))
        np.testing.assert_allclose(
            vectorize_tucker(z, d1, d2, d3),
            tucker_reconstruct(core, d1, d2, d3).vec(),
            atol=1e-12,
        )


class TestProducts:
    def test_khatri_rao_identity_columns(self):
        got = khatri_rao(np.eye(2), np.eye(2))
        expect = np.zeros((4, 2))
        expect[0, 0] = 1.0
        expect[3, 1] = 1.0
        np.testing.assert_allclose(got, expect)

    def test_outer3_rank1_unfolding(self):
        rng = np.random.default_rng(6)
        u, v, w = (rand_matrix(rng, (n,)) for n in (3, 4, 5))
        t = outer3(u, v, w)
        np.testing.assert_allclose(
            mode_unfold(t, 1), np.outer(u, kron(w, v)), atol=1e-12
        )

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3),
           st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
    def test_mixed_product_identity(self, m1, m2, r, n1, n2, seed):
        # (A B) khatri-rao (C D) == (A kron C) (B khatri-rao D)
        rng = np.random.default_rng(seed)
        a = rand_matrix(rng, (m1, n1))
        b = rand_matrix(rng, (n1, r))
        c = rand_matrix(rng, (m2, n2))
        d = rand_matrix(rng, (n2, r))
        lhs = khatri_rao(a @ b, c @ d)
        rhs = kron(a, c) @ khatri_rao(b, d)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_khatri_rao_column_count_mismatch(self):
        with pytest.raises(ValueError):
            khatri_rao(np.eye(2), np.ones((2, 3)))


class TestVec:
    def test_vec_roundtrip(self):
        rng = np.random.default_rng(7)
        t = rand_tensor(rng, (2, 3, 4))
        back = ComplexTensor3.from_vec(t.vec(), t.dims)
        np.testing.assert_allclose(back.data, t.data)

    def test_vec_is_mode1_fastest(self):
        t = ComplexTensor3.from_vec(np.arange(24), (2, 3, 4))
        # linear index n = i1 + i2*I1 + i3*I1*I2 (0-based)
        assert t.data[1, 2, 3].real == 1 + 2 * 2 + 3 * 6
