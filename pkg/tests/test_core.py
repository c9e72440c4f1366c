import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ipmo.core import (AllocationPath, CovariancePath, ForecastPath, ProblemParams, RealizedPanel, clamp_floor,
                       clamp_rows, simplex_residual)
from ipmo.errors import InvalidParameterError, ShapeError


def test_params_validation():
    with pytest.raises(InvalidParameterError):
        ProblemParams(delta=0.0)
    with pytest.raises(InvalidParameterError):
        ProblemParams(kappa=-1.0)
    with pytest.raises(InvalidParameterError):
        ProblemParams(lam=-1e-3)
    with pytest.raises(InvalidParameterError):
        ProblemParams(horizon=0)
    with pytest.raises(InvalidParameterError):
        ProblemParams(n_assets=1)
    assert ProblemParams().with_(lam=0.5).lam == 0.5


def test_clamp_corner_row():
    out = clamp_floor(AllocationPath(np.array([1.0, 0.0]), np.array([[1.0, 0.0]])), 1e-8).stages[0]
    # the pinned coordinate sits exactly at the floor and the rest absorbs the mass
    assert out[1] == 1e-8
    assert abs(out.sum() - 1.0) <= 1e-15
    assert out[0] == pytest.approx(1 - 1e-8 / (1 + 1e-8), abs=1e-15)


def test_clamp_interior_untouched():
    row = np.array([[0.5, 0.5]])
    out = clamp_rows(row, 1e-8)
    assert np.array_equal(out, row)


def test_clamp_rejects_floor_above_uniform():
    with pytest.raises(InvalidParameterError):
        clamp_rows(np.array([[0.3, 0.7]]), 0.6)
    with pytest.raises(InvalidParameterError):
        clamp_rows(np.array([[0.3, 0.7]]), 0.0)


def test_clamp_cascade():
    # scaling after the first pin pushes a second coordinate under the floor
    row = np.array([[0.0, 0.095, 0.905]])
    out = clamp_rows(row, 0.1)
    assert np.all(out >= 0.1 - 1e-15)
    assert abs(out.sum() - 1) <= 1e-12


simplex_rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)),
                      elements=st.floats(0, 1, allow_nan=False)).filter(lambda a: np.all(a.sum(-1) > 1e-3))


@settings(max_examples=200, deadline=None)
@given(simplex_rows, st.sampled_from([1e-8, 1e-4, 1e-2]))
def test_clamp_properties(raw, floor):
    z = raw / raw.sum(axis=-1, keepdims=True)
    once = clamp_rows(z, floor)
    assert np.all(once >= floor)
    assert simplex_residual(once) <= 1e-12
    assert np.array_equal(clamp_rows(once, floor), once)
    # argmax preserved (ties resolved identically because order is preserved by positive scaling)
    assert np.all(np.argmax(once, axis=-1) == np.argmax(z, axis=-1))


def test_simplex_residual_examples():
    assert simplex_residual(AllocationPath.uniform(4, 3)) == 0.0
    assert simplex_residual(np.array([[0.6, 0.6]])) == pytest.approx(0.2, abs=1e-15)
    # the row sums to one; only the negative entry contributes
    assert simplex_residual(np.array([[1.1, -0.1]])) == pytest.approx(0.1, abs=1e-15)


def test_allocation_path_shapes():
    with pytest.raises(ShapeError):
        AllocationPath(np.ones(3) / 3, np.ones((2, 4)) / 4)
    p = AllocationPath.hold(np.array([0.2, 0.8]), 3)
    assert p.horizon == 3 and p.n_assets == 2
    assert p.is_feasible()


def test_forecast_rejects_nonfinite():
    with pytest.raises(InvalidParameterError):
        ForecastPath(np.array([[np.nan, 0.0]]))


def test_covariance_check():
    CovariancePath.constant(np.eye(3) * 1e-6, 2).check(1e-6)
    with pytest.raises(InvalidParameterError):
        CovariancePath(np.array([[[1.0, 2.0], [2.0, 1.0]]])).check()
    with pytest.raises(InvalidParameterError):
        CovariancePath(np.array([[[1.0, 0.5], [0.4, 1.0]]])).check()


def test_panel_invariants():
    import datetime as dt
    d = [dt.date(2020, 1, 1), dt.date(2020, 1, 2)]
    RealizedPanel(d, np.zeros((2, 2)))
    with pytest.raises(InvalidParameterError):
        RealizedPanel(d[::-1], np.zeros((2, 2)))
    with pytest.raises(InvalidParameterError):
        RealizedPanel(d, np.array([[0.0, np.nan], [0.0, 0.0]]))
