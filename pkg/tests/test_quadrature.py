import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import tilted_oracle

from gppriv.exceptions import InputError
from gppriv.quadrature import (
    CavityMoments,
    gauss_hermite,
    inv_mills,
    log_std_norm_cdf,
    moment_update,
    std_norm_cdf,
    tilted_gpc,
    tilted_gpcplus,
)


def Phi(u):
    return 0.5 * math.erfc(-u / math.sqrt(2))


def random_cavities(n, seed, vmax=10.0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        yield (int(rng.choice([-1, 1])), rng.uniform(-3, 3), rng.uniform(0.01, vmax),
               rng.uniform(-3, 3), rng.uniform(0.01, vmax))


# -- Gauss-Hermite rule ----------------------------------------------------------

@pytest.mark.parametrize("order", [1, 2, 5, 32, 64, 128])
def test_rule_symmetric_positive_and_normalized(order):
    r = gauss_hermite(order)
    np.testing.assert_allclose(np.sort(r.nodes), np.sort(-r.nodes), atol=1e-12)
    assert np.all(r.weights > 0)
    assert r.weights.sum() == pytest.approx(math.sqrt(math.pi), rel=1e-12)
    assert r.order == order


def test_fourth_moment_order_32():
    r = gauss_hermite(32)
    assert float(r.weights @ r.nodes ** 4) == pytest.approx(0.75 * math.sqrt(math.pi), rel=1e-10)


@pytest.mark.parametrize("order", [3, 8, 20])
def test_polynomial_exactness(order):
    r = gauss_hermite(order)
    for k in range(0, 2 * order, 2):
        # int t^k exp(-t^2) dt = Gamma((k + 1) / 2) for even k
        exact = math.gamma((k + 1) / 2)
        assert float(r.weights @ r.nodes ** k) == pytest.approx(exact, rel=1e-10)
    for k in range(1, 2 * order, 2):
        assert abs(float(r.weights @ r.nodes ** k)) <= 1e-10 * math.gamma((k + 2) / 2)


@pytest.mark.parametrize("bad", [0, -3, 129, 2.5, True])
def test_bad_orders_rejected(bad):
    with pytest.raises(InputError):
        gauss_hermite(bad)


def test_expect_normal_variance():
    assert gauss_hermite(16).expect(lambda x: x * x, 1.0, 2.0) == pytest.approx(3.0)


# -- normal CDF helpers ------------------------------------------------------------

def test_cdf_values():
    assert std_norm_cdf(2.0) == pytest.approx(0.977250, abs=1e-6)
    assert std_norm_cdf(-5.0) == pytest.approx(2.8665e-7, rel=1e-4)
    assert log_std_norm_cdf(-5.0) == pytest.approx(-15.0650, abs=1e-4)


@pytest.mark.parametrize("u", [-30.0, -20.0, -8.0, -1.0, 0.0, 3.0])
def test_log_cdf_accurate_far_in_tail(u):
    import mpmath
    ref = float(mpmath.log(mpmath.ncdf(u)))
    got = float(log_std_norm_cdf(u))
    assert np.isfinite(got)
    assert abs(got - ref) <= 1e-10 * abs(ref) + 1e-15


def test_inverse_mills_ratio_finite_in_tail():
    r = inv_mills(np.array([-40.0, -10.0, 0.0, 10.0]))
    assert np.all(np.isfinite(r))
    assert r[0] == pytest.approx(40.0, rel=1e-3)  # ~ -u for u -> -inf
    assert r[2] == pytest.approx(math.sqrt(2 / math.pi))


# -- probit tilted moments ---------------------------------------------------------

def test_gpc_tilted_known_value():
    tm = tilted_gpc(1, 1.0, 0.0, 1.0)
    assert tm.log_z == pytest.approx(math.log(0.841345), abs=1e-6)
    assert tm.log_z == pytest.approx(-0.172753, abs=1e-6)


def test_gpc_site_update_from_prior():
    tm = tilted_gpc(1, 0.0, 1.0, 1.0)
    expected = (1 / math.sqrt(2 * math.pi)) / (0.5 * math.sqrt(2))
    assert tm.d_mf == pytest.approx(expected, rel=1e-12)
    assert tm.d_mf == pytest.approx(0.564190, abs=1e-6)
    m_new, _ = moment_update(0.0, 1.0, tm.d_mf, tm.d_vf)
    assert m_new == pytest.approx(0.564190, abs=1e-6)


def test_gpc_label_symmetry():
    a, b = tilted_gpc(1, 0.4, 0.7, 0.5), tilted_gpc(-1, -0.4, 0.7, 0.5)
    assert a.log_z == pytest.approx(b.log_z)
    assert a.d_mf == pytest.approx(-b.d_mf)
    assert a.d_vf == pytest.approx(b.d_vf)


def test_gpc_partials_match_finite_differences():
    rng = np.random.default_rng(5)
    h = 1e-5
    for _ in range(50):
        y, m, v, s2 = rng.choice([-1, 1]), rng.uniform(-3, 3), rng.uniform(0.01, 10), rng.uniform(0.1, 3)
        tm = tilted_gpc(y, m, v, s2)
        fd_m = (tilted_gpc(y, m + h, v, s2).log_z - tilted_gpc(y, m - h, v, s2).log_z) / (2 * h)
        fd_v = (tilted_gpc(y, m, v + h, s2).log_z - tilted_gpc(y, m, v - h, s2).log_z) / (2 * h)
        assert tm.d_mf == pytest.approx(fd_m, rel=1e-4, abs=1e-9)
        assert tm.d_vf == pytest.approx(fd_v, rel=1e-4, abs=1e-9)


def test_gpc_rejects_bad_inputs():
    with pytest.raises(InputError):
        tilted_gpc(0, 0.0, 1.0, 1.0)
    with pytest.raises(InputError):
        tilted_gpc(1, 0.0, -1.0, 1.0)
    with pytest.raises(InputError):
        tilted_gpc(1, 0.0, 1.0, 0.0)


# -- privileged-noise tilted moments -----------------------------------------------

def test_gpcplus_point_mass_noise_examples():
    tm = tilted_gpcplus(1, CavityMoments(1.0, 0.0, math.log(5.0), 0.0))
    assert math.exp(tm.log_z) == pytest.approx(0.672640, abs=1e-6)
    tm = tilted_gpcplus(1, CavityMoments(1.0, 1e-12, math.log(0.5), 0.0))
    assert math.exp(tm.log_z) == pytest.approx(0.921350, abs=1e-6)


def test_gpcplus_reduces_to_probit_when_g_is_known():
    for y, m, v, g in [(1, 0.3, 0.5, 0.0), (-1, 1.2, 2.0, -1.0), (1, -2.0, 0.1, 1.5)]:
        a = tilted_gpcplus(y, CavityMoments(m, v, g, 0.0))
        b = tilted_gpc(y, m, v, math.exp(g))
        assert a.log_z == pytest.approx(b.log_z, rel=1e-12)
        assert a.d_mf == pytest.approx(b.d_mf, rel=1e-12)
        assert a.d_vf == pytest.approx(b.d_vf, rel=1e-12)


def test_gpcplus_matches_integration_oracle_moderate_variance():
    # the range EP visits with unit-amplitude kernels: g-cavity variance <= 1
    for y, mf, vf, mg, vg in random_cavities(60, seed=6, vmax=1.0):
        tm = tilted_gpcplus(y, CavityMoments(mf, vf, mg, vg))
        ref = tilted_oracle(y, mf, vf, mg, vg)
        assert tm.log_z == pytest.approx(ref[0], abs=1e-8)
        for got, want in zip((tm.d_mf, tm.d_vf, tm.d_mg, tm.d_vg), ref[1:]):
            assert got == pytest.approx(want, abs=1e-6)


def test_gpcplus_error_shrinks_with_order_on_full_range():
    # g-variances up to 10 make exp(g) heavy-tailed; more nodes are needed there
    cavs = list(random_cavities(40, seed=7))
    refs = [tilted_oracle(*c) for c in cavs]
    worst = {}
    for order in (32, 64, 128):
        rule = gauss_hermite(order)
        errs = []
        for (y, mf, vf, mg, vg), ref in zip(cavs, refs):
            tm = tilted_gpcplus(y, CavityMoments(mf, vf, mg, vg), rule)
            errs.append((abs(tm.log_z - ref[0]),
                         max(abs(a - b) for a, b in zip((tm.d_mf, tm.d_vf, tm.d_mg, tm.d_vg), ref[1:]))))
        worst[order] = np.max(errs, axis=0)
    assert np.all(worst[64] < worst[32]) and np.all(worst[128] < worst[64])
    assert worst[128][0] <= 1e-6 and worst[128][1] <= 1e-5


def test_gpcplus_partials_match_finite_differences():
    h = 1e-5
    rule = gauss_hermite(128)
    for y, mf, vf, mg, vg in random_cavities(40, seed=8):
        base = dict(m_f=mf, v_f=vf, m_g=mg, v_g=vg)
        tm = tilted_gpcplus(y, CavityMoments(**base), rule)
        for key, got in zip(base, (tm.d_mf, tm.d_vf, tm.d_mg, tm.d_vg)):
            up = tilted_gpcplus(y, CavityMoments(**{**base, key: base[key] + h}), rule).log_z
            dn = tilted_gpcplus(y, CavityMoments(**{**base, key: base[key] - h}), rule).log_z
            assert got == pytest.approx((up - dn) / (2 * h), rel=1e-4, abs=1e-8)


def test_gpcplus_order_convergence_moderate_variance():
    r32, r64 = gauss_hermite(32), gauss_hermite(64)
    for y, mf, vf, mg, vg in random_cavities(100, seed=9, vmax=1.0):
        cav = CavityMoments(mf, vf, mg, vg)
        assert abs(tilted_gpcplus(y, cav, r32).log_z - tilted_gpcplus(y, cav, r64).log_z) <= 1e-9


@pytest.mark.xfail(strict=True, reason="32 nodes do not resolve log-normal noise when the "
                   "g-variance reaches ~10; see the decisions ledger")
def test_gpcplus_order_convergence_full_range():
    r32, r64 = gauss_hermite(32), gauss_hermite(64)
    for y, mf, vf, mg, vg in random_cavities(200, seed=10):
        cav = CavityMoments(mf, vf, mg, vg)
        assert abs(tilted_gpcplus(y, cav, r32).log_z - tilted_gpcplus(y, cav, r64).log_z) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([-1, 1]), st.floats(-30, 30), st.floats(0, 50),
       st.floats(-8, 8), st.floats(0, 20))
def test_gpcplus_finite_and_log_z_nonpositive(y, mf, vf, mg, vg):
    tm = tilted_gpcplus(y, CavityMoments(mf, vf, mg, vg))
    assert all(np.isfinite(v) for v in (tm.log_z, tm.d_mf, tm.d_vf, tm.d_mg, tm.d_vg))
    assert tm.log_z <= 1e-10


def test_gpcplus_likelihood_decreases_with_noise_mean():
    vals = [tilted_gpcplus(1, CavityMoments(1.0, 0.0, mg, 0.0)).log_z for mg in np.linspace(-4, 4, 41)]
    assert np.all(np.diff(vals) < 0)


def test_gpcplus_rejects_negative_variances():
    with pytest.raises(InputError):
        tilted_gpcplus(1, CavityMoments(0.0, -1.0, 0.0, 1.0))
    with pytest.raises(InputError):
        tilted_gpcplus(1, CavityMoments(0.0, 1.0, 0.0, -1.0))


def test_moment_update_rejects_nonpositive_variance():
    assert moment_update(0.0, 1.0, 2.0, 0.0) is None  # beta = 4 > 1 / v
    m, v = moment_update(0.5, 2.0, 0.1, -0.2)
    assert m == pytest.approx(0.7) and v == pytest.approx(2.0 * (1 - 2.0 * 0.41))
