import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hc3ldiff.phantom import (
    PhantomSpec,
    body_mask,
    degrade_to_cbct,
    generate_ct,
    generate_split,
    hu_to_unit,
    unit_to_hu,
)

SMALL = PhantomSpec(n_train=12, n_test=4)


def test_ct_deterministic():
    assert np.array_equal(generate_ct(SMALL, 3), generate_ct(SMALL, 3))
    assert not np.array_equal(generate_ct(SMALL, 3), generate_ct(SMALL, 4))


def test_train_and_test_streams_disjoint():
    assert not np.array_equal(generate_ct(SMALL, 0, "train"), generate_ct(SMALL, 0, "test"))


def test_ct_range_and_modes():
    for i in range(SMALL.n_train):
        ct = generate_ct(SMALL, i)
        assert ct.shape == (64, 64)
        assert ct.min() >= -1000 and ct.max() <= 3000
        air = np.count_nonzero(ct < -900)
        tissue = np.count_nonzero((ct > -100) & (ct < 100))
        bone = np.count_nonzero(ct > 500)
        assert air > 0 and tissue > 0 and bone > 0


def test_ct_index_out_of_range():
    with pytest.raises(ValueError):
        generate_ct(SMALL, SMALL.n_train)


def test_null_degradation_is_identity():
    spec = SMALL.null_degradation()
    ct = generate_ct(spec, 2)
    assert np.array_equal(degrade_to_cbct(ct, spec, 2), np.clip(ct, -1000, 3000))


def test_degradation_nonvacuous_and_paired():
    ct, cbct = generate_split(SMALL, "train")
    mae = np.abs(cbct - ct).mean(axis=(1, 2))
    assert np.all(mae > 0)
    assert np.all((mae >= 40) & (mae <= 200))
    for a, b in zip(ct, cbct):
        assert np.array_equal(body_mask(a), body_mask(b))
        assert b.min() >= -1000 and b.max() <= 3000


def test_split_regeneration_bit_identical():
    a = generate_split(SMALL, "test")
    b = generate_split(SMALL, "test")
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_mae_band_enforced():
    with pytest.raises(ValueError):
        generate_split(PhantomSpec(n_train=3, n_test=0, mae_band=(500.0, 600.0)), "train")


def test_spec_dict_roundtrip_and_unknown_keys():
    d = SMALL.to_dict()
    assert PhantomSpec.from_dict(d) == SMALL
    with pytest.raises(ValueError):
        PhantomSpec.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        PhantomSpec(size=60)


def test_normalization_endpoints():
    assert hu_to_unit(-1000) == -1.0
    assert hu_to_unit(3000) == 1.0
    assert hu_to_unit(1000) == 0.0
    assert hu_to_unit(-2000) == -1.0 and hu_to_unit(5000) == 1.0


@settings(max_examples=100, deadline=None)
@given(st.floats(-1000, 3000))
def test_normalization_roundtrip(v):
    assert abs(unit_to_hu(hu_to_unit(v)) - v) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e6, 1e6))
def test_normalization_bounds(v):
    u = hu_to_unit(v)
    assert -1.0 <= u <= 1.0
