import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from indalpha import alpha_estimate, build_pair_index
from indalpha.gee import (_cholesky_repaired, alpha_eval, compute_U, estimate_nuisance,
                          u_covariance)

finite = st.floats(-5, 5, allow_nan=False)


@given(st.integers(2, 30))
def test_pair_index_is_lexicographic_bijection(k):
    pairs = build_pair_index(k)
    assert len(pairs) == len(set(pairs)) == k * (k - 1) // 2
    assert pairs == sorted(pairs)
    assert all(1 <= i < j <= k for i, j in pairs)


@given(arrays(float, (4, 3), elements=finite), arrays(float, (4, 3), elements=finite),
       arrays(float, (4, 3), elements=st.floats(0.1, 5)))
def test_compute_U_symmetric_under_item_swap(y, mu, s2):
    u = compute_U(y, mu, s2)
    perm = [1, 0, 2]
    swapped = compute_U(y[:, perm], mu[:, perm], s2[:, perm])
    # swapping items 1 and 2 maps pairs (1,2),(1,3),(2,3) to (1,2),(2,3),(1,3)
    np.testing.assert_allclose(swapped, u[:, [0, 2, 1]], rtol=1e-12, atol=1e-12)


@given(arrays(float, (5, 3, 2), elements=st.floats(-3, 3)), arrays(float, 2, elements=st.floats(-3, 3)))
def test_eta_inside_unit_interval(w, theta):
    ev = alpha_eval(w, theta)
    assert np.all(np.abs(ev.value) <= 1.0)
    np.testing.assert_allclose(1 - np.exp(w @ theta), 2 * ev.value / (1 + ev.value), rtol=1e-6,
                               atol=1e-9)


@given(arrays(float, (3, 3), elements=st.floats(-1, 1)), arrays(float, 3, elements=st.floats(0.2, 3)),
       arrays(float, 3, elements=st.floats(-0.99, 0.99)))
def test_isserlis_factor_is_valid(mu, s2, eta):
    cov = u_covariance(mu, np.broadcast_to(s2, mu.shape), np.broadcast_to(eta, mu.shape))
    chol = _cholesky_repaired(cov)
    assert np.all(np.isfinite(chol))
    assert np.all(np.diagonal(chol, axis1=1, axis2=2) > 0)


@given(st.floats(-4, 4), st.floats(0.0, 2.0), st.floats(0.5, 0.999))
def test_interval_contains_estimate(lin, se, level):
    est = alpha_estimate([1.0], [lin], [[se * se]], level)
    assert est.ci[0] <= est.alpha <= est.ci[1] < 1.0


@settings(max_examples=50)
@given(arrays(float, (20, 4), elements=st.floats(-10, 10)), arrays(float, 20, elements=st.floats(0.1, 5)))
def test_exchangeable_rho_in_pd_range(r, wt):
    if np.all(r == 0):
        r[0, 0] = 1.0
    cov = estimate_nuisance(r, wt, "exchangeable")
    assert -1.0 / 3.0 < cov.rho < 1.0
    assert np.linalg.eigvalsh(cov.matrix()).min() > 0
