import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bethe_anderson.disorder import DisorderSpec
from bethe_anderson.errors import DomainError, StatisticsWarning
from bethe_anderson.finite_graphs import build_random_regular, build_truncated_tree
from bethe_anderson.rng import RngHandle, derive
from bethe_anderson.spectral_stats import (
    GOE_R,
    POISSON_R,
    PoissonTestConfig,
    RRGScanConfig,
    bulk_levels,
    classify,
    gap_ratio,
    gap_ratios,
    goe_reference_r,
    goe_spectrum,
    is_bipartite,
    participation_ratio,
    participation_ratios,
    poisson_cdf,
    poisson_levels,
    poisson_test_truncated_tree,
    rescale,
    rrg_statistics_scan,
    spacing_distribution,
    tv_distance,
    unfold,
    wigner_cdf,
    wigner_density,
)


def _poisson_spectra(n, size, seed):
    return [poisson_levels(size, derive(RngHandle(seed), [i]).generator()) for i in range(n)]


def test_reference_values():
    assert POISSON_R == pytest.approx(0.38629, abs=1e-5)
    from scipy import integrate

    assert integrate.quad(wigner_density, 0, np.inf)[0] == pytest.approx(1.0)
    assert integrate.quad(lambda s: s * wigner_density(s), 0, np.inf)[0] == pytest.approx(1.0)
    assert wigner_cdf(np.array([0.0]))[0] == 0 and poisson_cdf(np.array([0.0]))[0] == 0


def test_poisson_gap_ratio():
    st_ = gap_ratio(_poisson_spectra(20, 5000, 1))
    assert abs(st_.mean_gap_ratio - POISSON_R) < 0.01
    assert st_.std_error < 0.005 and st_.n_gaps == 20 * 4998
    assert classify(st_) == "poisson"


def test_goe_gap_ratio():
    st_ = goe_reference_r(RngHandle(2), N=400, n_realizations=200)
    assert abs(st_.mean_gap_ratio - GOE_R) < 0.002 + 2 * st_.std_error
    assert classify(st_) == "goe"


def test_picket_fence():
    r, nd = gap_ratios(np.arange(100.0))
    assert nd == 0 and np.allclose(r, 1.0)
    assert gap_ratio(np.arange(100.0)).mean_gap_ratio == pytest.approx(1.0)


def test_degenerate_levels_warn():
    with pytest.warns(StatisticsWarning):
        st_ = gap_ratio(np.array([0.0, 1.0, 1.0, 2.5, 3.0, 4.2]))
    assert st_.n_degenerate == 2  # one zero spacing enters two ratios


def test_gap_ratio_needs_levels():
    with pytest.raises(DomainError):
        gap_ratio([np.array([1.0])])


@given(shift=st.floats(-100, 100), scale=st.floats(0.01, 100), seed=st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_gap_ratio_affine_invariance(shift, scale, seed):
    lv = poisson_levels(200, np.random.default_rng(seed))
    a = gap_ratio(lv).mean_gap_ratio
    b = gap_ratio(scale * lv + shift).mean_gap_ratio
    assert b == pytest.approx(a, abs=1e-9)


@given(seed=st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_gap_ratio_in_unit_interval(seed):
    r, _ = gap_ratios(np.random.default_rng(seed).normal(size=50))
    assert np.all((r >= 0) & (r <= 1))


def test_unfold_unit_mean_spacing():
    gen = np.random.default_rng(3)
    spectra = [np.sort(gen.normal(size=500)) for _ in range(20)]
    u = unfold(spectra)
    mean = np.mean(np.concatenate([np.diff(x) for x in u]))
    assert mean == pytest.approx(1.0, abs=0.02)


def test_spacing_histogram_poisson():
    h = spacing_distribution(_poisson_spectra(10, 3000, 4))
    assert h.mean_spacing == pytest.approx(1.0, abs=0.02)
    assert np.sum(h.density * np.diff(h.edges)) == pytest.approx(1.0, abs=0.02)
    assert h.tv_poisson < 0.05 and h.tv_goe > 0.2


def test_spacing_histogram_goe():
    gen = np.random.default_rng(5)
    spectra = [goe_spectrum(300, gen)[100:200] for _ in range(200)]
    h = spacing_distribution(spectra)
    assert h.tv_goe < 0.05 and h.tv_poisson > 0.2


def test_spacing_histogram_mixture_matches_neither():
    gen = np.random.default_rng(6)
    spectra = []
    for _ in range(100):
        a = goe_spectrum(300, gen)[100:200]
        b = np.sort(gen.uniform(a[0], a[-1], size=100))
        spectra.append(np.sort(np.concatenate([a, b])))
    h = spacing_distribution(spectra)
    assert h.tv_poisson > 0.05 and h.tv_goe > 0.05


def test_spacing_histogram_merges_and_warns(tmp_path):
    with pytest.warns(StatisticsWarning):
        h = spacing_distribution([np.array([0.0, 1.0, 1.0, 2.0, 3.5])])
    assert h.n_merged == 1 and h.n_spacings == 3
    h.to_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().startswith("bin_center,density")


def test_tv_distance_self_is_small():
    s = np.random.default_rng(7).exponential(size=200000)
    assert tv_distance(s, np.linspace(0, 4, 41), poisson_cdf) < 0.01


def test_participation_ratio_bounds():
    assert participation_ratio(np.eye(10)[3]) == pytest.approx(1.0)
    assert participation_ratio(np.full(10, 1 / math.sqrt(10))) == pytest.approx(10.0)
    with pytest.raises(DomainError):
        participation_ratio(np.ones(3))
    Q, _ = np.linalg.qr(np.random.default_rng(8).normal(size=(30, 30)))
    pr = participation_ratios(Q)
    assert np.all((pr >= 1 - 1e-12) & (pr <= 30 + 1e-9))


@given(seed=st.integers(0, 1000), n=st.integers(1, 40))
@settings(max_examples=40, deadline=None)
def test_participation_ratio_range(seed, n):
    v = np.random.default_rng(seed).normal(size=n)
    v /= np.linalg.norm(v)
    assert 1 - 1e-9 <= participation_ratio(v) <= n + 1e-9


def test_rescale_examples():
    p = rescale(np.array([-0.01, 0.0, 0.002, 0.5]), 0.0, 1000, 5.0)
    assert np.allclose(p.points, [0.0, 2.0]) and len(p) == 2
    with pytest.raises(DomainError):
        rescale(np.array([0.0]), 0.0, 10, 0.0)


def test_rescale_counts_match_density():
    # uniform levels of density N on [0, 1]; about 2W points fall in the window
    gen = np.random.default_rng(9)
    counts = [len(rescale(gen.uniform(size=10000), 0.5, 10000, 50.0)) for _ in range(50)]
    assert abs(np.mean(counts) - 100) < 10


def test_bulk_levels_and_bipartite():
    lv = np.linspace(-1, 1, 101)
    b = bulk_levels(lv, 0.4)
    assert b.size == pytest.approx(41, abs=1) and np.all(np.abs(b) <= 0.41)
    assert np.all(np.abs(bulk_levels(lv, 0.4, exclude_zero=0.05)) >= 0.05)
    assert is_bipartite(build_truncated_tree(2, 4))
    assert not is_bipartite(build_random_regular(2, 1000, RngHandle(0)))


def test_truncated_tree_single_level_warns():
    cfg = PoissonTestConfig(L=1, n_realizations=5, centers=(0.0,), rng=RngHandle(1))
    with pytest.warns(StatisticsWarning):
        rows = poisson_test_truncated_tree(cfg)
    assert rows[0]["label"] == "inconclusive"


def test_truncated_tree_poisson_small():
    cfg = PoissonTestConfig(L=7, n_realizations=40, centers=(0.0,), rng=RngHandle(2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StatisticsWarning)
        row = poisson_test_truncated_tree(cfg)[0]
    assert abs(row["mean_r"] - POISSON_R) < 0.03 + 2 * row["se_r"]


def test_small_rrg_is_inconclusive():
    cfg = RRGScanConfig(N=20, n_realizations=3, points=((0.0, None),), rng=RngHandle(3))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StatisticsWarning)
        row = rrg_statistics_scan(cfg)[0]
    assert row["label"] == "inconclusive"


def test_rrg_free_is_extended():
    cfg = RRGScanConfig(N=1000, n_realizations=4, points=((0.0, None),), rng=RngHandle(4))
    row = rrg_statistics_scan(cfg)[0]
    assert row["median_pr_fraction"] >= 0.1
    assert abs(row["mean_r"] - GOE_R) < 0.03


def test_rrg_scan_deterministic():
    cfg = RRGScanConfig(N=200, n_realizations=3, points=((1.0, None),), participation=False, rng=RngHandle(5))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StatisticsWarning)
        assert rrg_statistics_scan(cfg) == rrg_statistics_scan(cfg)
