import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bethe_anderson.cavity import (
    CavityParams,
    EtaProtocol,
    McBudget,
    estimate_dos,
    estimate_free_energy,
    estimate_greens_second_moment,
    estimate_ids,
    estimate_lyapunov,
    estimate_phi_at_one,
    extrapolate_eta,
    init_pool,
    sweep,
)
from bethe_anderson.disorder import DisorderSpec
from bethe_anderson.errors import ConvergenceError, DomainError, HeavyTailWarning, InvariantViolation
from bethe_anderson.exact_forms import (
    gamma0,
    green_root_free,
    kesten_mckay_dos,
    log_fractional_moment_bound,
    lyapunov_exact_cauchy,
    lyapunov_exact_free,
)
from bethe_anderson.rng import RngHandle

CAUCHY = DisorderSpec.cauchy()
UNIFORM = DisorderSpec.uniform()


def within(est, exact, k=3.0, floor=1e-12):
    return abs(est.value - exact) <= k * est.std_error + floor


# ---- pool ------------------------------------------------------------------


def test_init_pool_examples():
    z = 0.3 + 0.2j
    pool = init_pool(CavityParams(2, 0.0, z, CAUCHY), 1000, RngHandle(0))
    assert np.allclose(pool.samples, -1 / z)
    pool = init_pool(CavityParams(2, 0.01, 10j, UNIFORM), 1000, RngHandle(0))
    assert np.all(np.abs(pool.samples) <= 0.1)
    pool = init_pool(CavityParams(2, 1.0, 1j, CAUCHY), 5000, RngHandle(0))
    assert np.all(pool.samples.imag > 0)


def test_init_pool_preconditions():
    with pytest.raises(DomainError):
        init_pool(CavityParams(2, 1.0, 0.5 + 0j, CAUCHY), 1000, RngHandle(0))
    with pytest.raises(DomainError):
        init_pool(CavityParams(2, 1.0, 0.5 + 0.1j, CAUCHY), 999, RngHandle(0))


@pytest.mark.parametrize("z", [0.5 + 0.01j, 2.0 + 0.1j, -1 + 1j])
def test_free_pool_collapses_to_gamma0(z):
    pool = sweep(init_pool(CavityParams(2, 0.0, z, CAUCHY), 10_000, RngHandle(2)), 200)
    assert pool.sweep_count == 200
    assert pool.samples.std() < 1e-10
    assert abs(pool.samples.mean() - gamma0(2, z)) < 1e-8


@given(E=st.floats(-6, 6), eta=st.floats(1e-3, 2.0), lam=st.floats(0.0, 5.0), K=st.integers(2, 4))
@settings(max_examples=25, deadline=None)
def test_sweeps_preserve_herglotz_and_bound(E, eta, lam, K):
    pool = init_pool(CavityParams(K, lam, complex(E, eta), CAUCHY), 2000, RngHandle(3))
    for _ in range(5):
        sweep(pool, 2)
        assert pool.samples.imag.min() > 0
        assert np.abs(pool.samples).max() <= 1 / eta * (1 + 1e-9)


def test_sweep_detects_broken_invariant():
    pool = init_pool(CavityParams(2, 1.0, 0.1 + 0.1j, CAUCHY), 1000, RngHandle(4))
    pool.samples[:] = -1j
    with pytest.raises(InvariantViolation):
        sweep(pool, 1)


# ---- Lyapunov and DOS ------------------------------------------------------


def test_lyapunov_free_band_center(small_mc):
    est = estimate_lyapunov(CavityParams(2, 0.0, 0.1j, CAUCHY), mc=small_mc)
    assert abs(est.value - math.log(math.sqrt(2))) < 1e-4
    assert est.metadata["etas"] == [0.1, 0.01, 0.001]


@pytest.mark.parametrize("lam,E", [(0.5, 1.0), (1.0, 0.0)])
def test_lyapunov_cauchy_oracle(small_mc, lam, E):
    est = estimate_lyapunov(CavityParams(2, lam, complex(E, 0.1), CAUCHY), mc=small_mc)
    assert within(est, float(lyapunov_exact_cauchy(2, lam, E)))
    assert est.std_error > 0


def test_lyapunov_reports_extrapolation_error(small_mc):
    est = estimate_lyapunov(CavityParams(2, 0.5, complex(0.0, 0.1), CAUCHY), mc=small_mc)
    md = est.metadata
    assert est.std_error == pytest.approx(math.hypot(md["stat_error"], md["extrapolation_error"]))


def test_drift_failure_raises(small_mc):
    from dataclasses import replace

    strict = replace(small_mc, drift_fail_sigma=0.0, drift_abs_tol=0.0, burn_in=0)
    with pytest.raises(ConvergenceError) as info:
        estimate_lyapunov(CavityParams(2, 1.0, complex(0.0, 0.1), CAUCHY), mc=strict)
    assert "drift_sigma" in info.value.diagnostics


def test_dos_free(small_mc):
    est = estimate_dos(CavityParams(2, 0.0, 0.1j, CAUCHY), mc=small_mc)
    assert abs(est.value - kesten_mckay_dos(2, 0.0)) < 1e-3
    outside = estimate_dos(
        CavityParams(2, 0.0, 3 + 0.1j, CAUCHY), EtaProtocol(etas=(0.001,)), mc=small_mc
    )
    assert outside.value < 1e-2


def test_ids_free(small_mc):
    mc = McBudget(n_pool=5000, burn_in=60, n_measure=20, n_batches=4, n_paths=4096, rng=RngHandle(9))
    p = CavityParams(2, 0.0, 0.1j, CAUCHY)
    assert estimate_ids(p, -3.0, mc).value == 0.0
    top = estimate_ids(p, 2 * math.sqrt(2), mc, dE=0.1)
    assert top.value == pytest.approx(1.0, abs=0.02)
    vals = top.metadata["dos"]
    cum = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(top.metadata["grid"]) * (np.array(vals[1:]) + vals[:-1]))])
    assert np.all(np.diff(cum) >= 0)


@given(c=st.floats(-3, 3), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_sqrt_rule_is_exact_on_its_model(c, a, b):
    etas = [0.1, 0.01, 0.001]
    vals = [c + a * math.sqrt(e) + b * e for e in etas]
    val, stat, _ = extrapolate_eta(etas, vals, [0.0] * 3, "sqrt")
    assert val == pytest.approx(c, abs=1e-9)
    assert stat == 0.0


@given(c=st.floats(-3, 3), b=st.floats(-3, 3))
def test_linear_rule_is_exact_on_lines(c, b):
    etas = [0.1, 0.01, 0.001]
    val, _, model = extrapolate_eta(etas, [c + b * e for e in etas], [0.0] * 3, "linear")
    assert val == pytest.approx(c, abs=1e-9)
    assert model == pytest.approx(0.0, abs=1e-9)


def test_eta_protocol_validation():
    with pytest.raises(DomainError):
        EtaProtocol(etas=(0.01, 0.1))
    with pytest.raises(DomainError):
        EtaProtocol(etas=(0.1, 0.0))
    with pytest.raises(DomainError):
        EtaProtocol(rule="cubic")


# ---- free energy -----------------------------------------------------------


def test_free_energy_free_case(small_mc):
    z = 0.1j
    est = estimate_free_energy(CavityParams(2, 0.0, z, CAUCHY), 0.5, mc=small_mc)
    exact = -0.5 * float(lyapunov_exact_free(2, z))
    assert abs(est.value - exact) < 1e-10
    # at eta -> 0 the value is -0.5 log sqrt 2
    est0 = estimate_free_energy(CavityParams(2, 0.0, 1e-9j, CAUCHY), 0.5, mc=small_mc)
    assert est0.value == pytest.approx(-0.17329, abs=1e-5)


def test_free_energy_preconditions(small_mc):
    p = CavityParams(2, 1.0, 0.1j, CAUCHY)
    for s in (0.0, 1.0, 1.5):
        with pytest.raises(DomainError):
            estimate_free_energy(p, s, mc=small_mc)
    with pytest.raises(DomainError):
        estimate_free_energy(p, 0.5, R=5, mc=small_mc)


def test_free_energy_convex_and_decreasing(small_mc):
    from bethe_anderson.cavity import _ready_pool

    p = CavityParams(2, 1.0, complex(0.5, 0.01), CAUCHY)
    pool = _ready_pool(p, small_mc, None)
    est = [estimate_free_energy(p, s, mc=small_mc.with_rng(RngHandle(5, (i,))), pool=pool)
           for i, s in enumerate((0.2, 0.5, 0.8))]
    v = [e.value for e in est]
    se = [e.std_error for e in est]
    assert v[0] > v[1] > v[2]
    # midpoint convexity: phi(0.5) <= (phi(0.2) + phi(0.8)) / 2
    gap = 0.5 * (v[0] + v[2]) - v[1]
    assert gap >= -3 * math.sqrt(0.25 * se[0] ** 2 + se[1] ** 2 + 0.25 * se[2] ** 2)


def test_small_s_slope_matches_lyapunov(small_mc):
    p = CavityParams(2, 0.5, complex(1.0, 0.01), CAUCHY)
    L = estimate_lyapunov(p, EtaProtocol(etas=(0.01,)), small_mc).value
    phi = estimate_free_energy(p, 0.05, mc=small_mc).value
    assert abs(-phi / 0.05 - L) < 0.05 * L


def test_free_energy_respects_fractional_moment_bound(small_mc):
    p = CavityParams(2, 20.0, complex(0.0, 0.01), UNIFORM)
    for s in (0.2, 0.5, 0.8):
        est = estimate_free_energy(p, s, mc=small_mc)
        assert est.value <= float(log_fractional_moment_bound(s, 20.0, 0.5)) + 3 * est.std_error


def test_phi_at_one_free(small_mc):
    est = estimate_phi_at_one(CavityParams(2, 0.0, 0.1j, CAUCHY), small_mc)
    assert est.value == pytest.approx(-math.log(math.sqrt(2)), abs=1e-3)
    assert est.value > -math.log(2)


@pytest.mark.slow
def test_phi_at_one_deep_localized():
    est = estimate_phi_at_one(CavityParams(2, 20.0, 0.1j, UNIFORM), McBudget(rng=RngHandle(3)))
    assert est.value + 3 * est.std_error < -math.log(2)
    assert "extrapolation_dominated" in est.metadata


# ---- second moments --------------------------------------------------------


def test_second_moment_free_is_exact(small_mc):
    z = 0.1j
    ests = estimate_greens_second_moment(CavityParams(2, 0.0, z, CAUCHY), [1, 4, 9], small_mc)
    g00, g = green_root_free(2, z), gamma0(2, z)
    for e in ests:
        d = e.metadata["distance"]
        assert e.value == pytest.approx(abs(g00) ** 2 * abs(g) ** (2 * d), rel=1e-10)


def test_second_moment_preconditions(small_mc):
    with pytest.raises(DomainError):
        estimate_greens_second_moment(CavityParams(2, 0.3, 0.0j, CAUCHY), [4], small_mc)
    with pytest.raises(DomainError):
        estimate_greens_second_moment(CavityParams(2, 0.3, 0.1j, CAUCHY), [0], small_mc)


def test_heavy_tail_warning_in_localized_regime(small_mc):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        estimate_greens_second_moment(CavityParams(2, 20.0, 0.01j, UNIFORM), [10], small_mc)
    assert any(issubclass(w.category, HeavyTailWarning) for w in caught)


def test_estimates_are_deterministic(small_mc):
    p = CavityParams(2, 0.7, complex(0.3, 0.1), CAUCHY)
    a = estimate_lyapunov(p, mc=small_mc)
    b = estimate_lyapunov(p, mc=small_mc)
    assert (a.value, a.std_error) == (b.value, b.std_error)
