import numpy as np
import pytest

from idea_ts import diffcore as dc
from idea_ts.basis import (BasisSpec, Kind, harmonics, make_seasonality_basis,
                           make_trend_basis, project)


def test_trend_basis_by_hand():
    T = make_trend_basis(2, 3)
    expected = np.array([[1, 0, 0], [1, 1 / 3, 1 / 9], [1, 2 / 3, 4 / 9]])
    assert np.allclose(T, expected, atol=1e-15, rtol=0)


def test_trend_degree_zero_is_ones():
    assert np.array_equal(make_trend_basis(0, 7), np.ones((7, 1)))


def test_trend_first_row():
    T = make_trend_basis(4, 9)
    assert T[0, 0] == 1 and np.all(T[0, 1:] == 0)


def test_trend_overparameterised():
    with pytest.raises(ValueError):
        make_trend_basis(3, 3)


def test_seasonality_h4():
    S = make_seasonality_basis(4, 4)
    t = np.array([0, 0.25, 0.5, 0.75])
    expected = np.stack([np.ones(4), np.cos(2 * np.pi * t), np.sin(2 * np.pi * t)], axis=1)
    assert S.shape == (4, 3)
    assert np.allclose(S, expected, atol=1e-15, rtol=0)


def test_seasonality_first_row_and_count():
    S = make_seasonality_basis(6, 5)
    assert S.shape == (5, 5)
    assert np.array_equal(S[0], [1, 1, 1, 0, 0])


def test_seasonality_too_short_horizon():
    with pytest.raises(ValueError):
        make_seasonality_basis(3, 8)


@pytest.mark.parametrize("H", range(4, 51))
def test_seasonality_column_count(H):
    assert make_seasonality_basis(H, H).shape[1] == 2 * int(np.floor(H / 2 - 1)) + 1
    # odd horizons: H = 2h + 1 gives 2h - 1 columns too
    h = H // 2
    assert 2 * harmonics(H) + 1 == 2 * h - 1


def test_generic_projection_is_identity():
    spec = BasisSpec(Kind.GENERIC, 2, 1)
    back, fore = project(np.array([1.0, 2.0]), np.array([3.0]), spec)
    assert back.value.tolist() == [1.0, 2.0]
    assert fore.value.tolist() == [3.0]


def test_trend_projection():
    spec = BasisSpec(Kind.TREND, 3, 3, degree=1)
    _, fore = project(np.zeros(2), np.array([5.0, 0.0]), spec)
    assert np.allclose(fore.value, [5, 5, 5])
    _, fore = project(np.zeros(2), np.array([0.0, 3.0]), spec)
    assert np.allclose(fore.value, [0, 1, 2], atol=1e-15)


def test_projection_dimension_mismatch():
    with pytest.raises(dc.ShapeError):
        project(np.zeros(4), np.zeros(3), BasisSpec(Kind.TREND, 8, 4, degree=2))


def test_spec_dimensions():
    assert BasisSpec(Kind.TREND, 8, 4, degree=2).backcast_dim == 3
    assert BasisSpec(Kind.SEASONALITY, 8, 6).forecast_dim == 5
    s = BasisSpec(Kind.GENERIC, 8, 4)
    assert (s.backcast_dim, s.forecast_dim) == (8, 4)


def test_rebuilt_bases_identical():
    for a, b in zip(BasisSpec(Kind.SEASONALITY, 24, 12).matrices(),
                    BasisSpec(Kind.SEASONALITY, 24, 12).matrices()):
        assert np.array_equal(a, b)


@pytest.mark.parametrize("p,length", [(0, 1), (1, 4), (2, 8), (3, 24), (5, 48)])
def test_trend_gram_invertible(p, length):
    T = make_trend_basis(p, length)
    assert np.isfinite(np.linalg.cond(T.T @ T))
    assert np.linalg.matrix_rank(T) == p + 1


def test_gradients_reach_coefficients_not_basis():
    spec = BasisSpec(Kind.SEASONALITY, 8, 6)
    tb = dc.Array(np.ones(spec.backcast_dim), requires_grad=True)
    tf = dc.Array(np.ones(spec.forecast_dim), requires_grad=True)
    with dc.ComputationRecord() as rec:
        back, fore = project(tb, tf, spec)
        loss = dc.sum_(back) + dc.sum_(fore)
    grads = dc.backward(rec, loss)
    assert set(grads) == {tb, tf}
    bmat, fmat = spec.matrices()
    assert np.allclose(tf.grad, fmat.sum(axis=0))
    assert not bmat.flags.writeable
