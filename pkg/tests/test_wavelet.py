import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mwgs.errors import InvalidConfig, InvalidShape
from mwgs.selftest import check_dwt, corrupted, numeric_grad
from mwgs.wavelet import (DB2, HAAR, SubbandSet, dwt2, dwt2_backward, get_filters, idwt2,
                          wavelet_packet, wavelet_packet_backward)

even = st.integers(1, 12).map(lambda n: 2 * n)


@pytest.mark.parametrize("filters", [HAAR, DB2], ids=["haar", "db2"])
def test_filters_are_orthonormal(filters):
    assert filters.is_orthonormal()


def test_haar_examples():
    s = dwt2(np.full((2, 4, 6), 3.0))
    assert np.allclose(s.LL, 6.0) and not np.any(np.abs(s.LH) + np.abs(s.HL) + np.abs(s.HH) > 1e-15)
    a, b, c, d = 1.0, 2.0, 5.0, -3.0
    assert dwt2(np.array([[a, b], [c, d]])).LL[0, 0, 0] == pytest.approx((a + b + c + d) / 2)
    assert all(band.shape == (3, 4, 5) for band in dwt2(np.zeros((3, 8, 10))).as_list())


def test_odd_dims_rejected():
    with pytest.raises(InvalidShape):
        dwt2(np.zeros((1, 5, 4)))
    with pytest.raises(InvalidShape):
        wavelet_packet(np.zeros((1, 6, 6)), 2)


def test_unknown_family_rejected():
    with pytest.raises(InvalidConfig):
        get_filters("sym8")


@pytest.mark.parametrize("filters", [HAAR, DB2], ids=["haar", "db2"])
def test_perfect_reconstruction_32x32x4(filters, rng):
    F = rng.normal(size=(4, 32, 32))
    assert np.abs(idwt2(dwt2(F, filters), filters) - F).max() <= 1e-12


def test_zero_and_constant_reconstruction():
    z = np.zeros((4, 3, 2, 2))
    assert not np.any(idwt2(SubbandSet(*z)))
    s = dwt2(np.full((1, 4, 4), 0.7))
    s = SubbandSet(s.LL, 0 * s.LH, 0 * s.HL, 0 * s.HH)
    assert np.allclose(idwt2(s), 0.7)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3), even, even, st.integers(0, 2 ** 31))
def test_linearity(c, h, w, seed):
    rng = np.random.default_rng(seed)
    F, G = rng.normal(size=(2, c, h, w))
    a, b = rng.normal(size=2)
    lhs = dwt2(a * F + b * G).as_list()
    rhs = [a * x + b * y for x, y in zip(dwt2(F).as_list(), dwt2(G).as_list())]
    assert all(np.abs(x - y).max() <= 1e-12 for x, y in zip(lhs, rhs))


def test_packet_levels_and_energy(rng):
    F = rng.normal(size=(2, 16, 16))
    assert wavelet_packet(F, 0)[0] is not None and np.array_equal(wavelet_packet(F, 0)[0], F)
    one = wavelet_packet(F, 1)
    assert len(one) == 4 and one[0].shape == (2, 8, 8)
    two = wavelet_packet(F, 2)
    assert len(two) == 16 and two[0].shape == (2, 4, 4)
    energy = sum(np.sum(b * b) for b in two)
    assert abs(energy - np.sum(F * F)) / np.sum(F * F) <= 1e-10


def test_packet_order_is_depth_first():
    F = np.random.default_rng(5).normal(size=(1, 8, 8))
    lh = dwt2(F).LH
    assert np.array_equal(wavelet_packet(F, 2)[4:8][1], dwt2(lh).LH)


def test_backward_matches_finite_differences(rng):
    F = rng.normal(size=(1, 8, 8))
    G = [rng.normal(size=(1, 4, 4)) for _ in range(4)]

    def f():
        return sum(float(np.sum(b * g)) for b, g in zip(dwt2(F).as_list(), G))

    num = numeric_grad(f, F, 1e-6)
    ana = dwt2_backward(SubbandSet(*G))
    assert np.abs(num - ana).max() / np.abs(num).max() <= 1e-6
    assert not np.any(dwt2_backward(SubbandSet(*[0 * g for g in G])))


def test_packet_adjoint(rng):
    F = rng.normal(size=(3, 16, 8))
    leaves = wavelet_packet(F, 2, DB2)
    G = [rng.normal(size=x.shape) for x in leaves]
    lhs = sum(np.sum(x * g) for x, g in zip(leaves, G))
    rhs = np.sum(F * wavelet_packet_backward(G, 2, DB2))
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_selftest_suite_and_corruption_hook():
    assert check_dwt(n_maps=50).passed
    assert not check_dwt(n_maps=5, filters=corrupted(HAAR)).passed
