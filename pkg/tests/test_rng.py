import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from bethe_anderson.rng import RngHandle, battery, derive, float_key

paths = st.lists(st.integers(min_value=0, max_value=2**40), max_size=4)


def test_distinct_paths_give_distinct_streams():
    s = RngHandle(42)
    a = derive(s, [1]).generator().random(8)
    b = derive(s, [2]).generator().random(8)
    assert not np.array_equal(a, b)


@given(seed=st.integers(min_value=0, max_value=2**64 - 1), p=paths, q=paths)
@settings(max_examples=50, deadline=None)
def test_composition_law(seed, p, q):
    s = RngHandle(seed)
    assert derive(derive(s, p), q) == derive(s, p + q)
    x = derive(derive(s, p), q).generator().integers(0, 2**62, 4)
    y = derive(s, p + q).generator().integers(0, 2**62, 4)
    assert np.array_equal(x, y)


def test_stream_is_reproducible():
    h = RngHandle(7, (3, 1))
    assert np.array_equal(h.generator().random(100), h.generator().random(100))


def test_float_key_distinguishes_values():
    assert float_key(0.1) != float_key(0.1000000001)
    assert float_key(1.0) == float_key(1)


def test_negative_path_rejected():
    import pytest

    with pytest.raises(ValueError):
        RngHandle(1, (-1,))


def test_battery_first_million_outputs():
    pvals = battery(derive(RngHandle(2024), [5, 9]), n=1_000_000)
    assert set(pvals) == {"ks_uniform", "chi2_bytes", "bit_frequency", "serial_lag1", "runs"}
    # five tests at 1e-3 each
    assert min(pvals.values()) > 1e-3, pvals


def test_handle_round_trips_through_dict():
    h = RngHandle(99, (1, 2, 3))
    d = h.to_dict()
    assert RngHandle(d["master_seed"], tuple(d["path"])) == h
