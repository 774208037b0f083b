"""Property-based checks for a few algebraic contracts."""

import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from whitesel.linmodel import standardize
from whitesel.selection import StabilityReport, lasso_solve
from whitesel.whitening import pooled_autocovariance

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, width=64)
# Magnitudes bounded so the absolute 1e-12 KKT tolerance stays above the
# rounding floor of the correlation computations.
moderate = st.floats(min_value=-100.0, max_value=100.0, allow_nan=False, width=64)


@settings(max_examples=50, deadline=None)
@given(
    y=arrays(np.float64, st.integers(1, 12), elements=moderate),
    lam=st.floats(min_value=0.0, max_value=10.0, allow_nan=False),
)
def test_orthonormal_design_soft_threshold(y, lam):
    sol = lasso_solve(np.eye(y.size), y, lam=lam, kkt_tol=1e-12)
    closed = np.sign(y) * np.maximum(np.abs(y) - lam / 2, 0.0)
    np.testing.assert_allclose(sol.beta, closed, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(
    E=arrays(np.float64, (3, 10), elements=finite),
    c=st.floats(min_value=0.01, max_value=100.0, allow_nan=False),
)
def test_autocovariance_scale_equivariance(E, c):
    base = pooled_autocovariance(E, 3)
    scaled = pooled_autocovariance(c * E, 3)
    np.testing.assert_allclose(scaled, c**2 * base, rtol=1e-9, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(Y=arrays(np.float64, (5, 4), elements=finite))
def test_standardize_centers_columns(Y):
    values, constant = standardize(Y, scale=True)
    assert np.abs(values.mean(axis=0)).max() < 1e-6 * max(1.0, np.abs(Y).max())
    sd = values.std(axis=0)
    assert np.allclose(sd[~constant], 1.0, atol=1e-8)
    assert np.all(sd[constant] == 0.0)


@settings(max_examples=50, deadline=None)
@given(
    freq=arrays(
        np.float64,
        (2, 6),
        elements=st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
    ),
    t1=st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
    t2=st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
)
def test_support_monotone_in_threshold(freq, t1, t2):
    lo, hi = min(t1, t2), max(t1, t2)
    report = StabilityReport(frequencies=freq, lambda_cv=1.0, n_resamples=1)
    assert np.all(report.support(hi) <= report.support(lo))
