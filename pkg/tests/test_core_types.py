from dataclasses import replace

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from cacdn.core_types import BANDS, Modality, validate_sample
from conftest import make_sample


def test_band_layouts():
    assert BANDS[Modality.S1_PRE].band_names == ("VV", "VH")
    assert BANDS[Modality.S1_POST].count == 2
    assert BANDS[Modality.S2_PRE].band_names == ("Red", "Green", "Blue", "NIR")
    assert BANDS[Modality.DEM_STACK].band_names == ("elevation", "slope", "aspect_sin", "aspect_cos")


def test_well_formed_sample_is_valid():
    assert validate_sample(make_sample(p=128)) == []


def test_wrong_band_count_reported():
    s = make_sample(p=128)
    bad = replace(s, s2_pre=s.s2_pre[:3])
    assert validate_sample(bad) == ["s2_pre: expected 4 bands"]


def test_non_binary_mask_reported():
    s = make_sample(p=128)
    mask = s.mask.copy()
    mask[0, 0] = 2
    assert validate_sample(replace(s, mask=mask)) == ["mask: non-binary value"]


def test_other_violations():
    s = make_sample(p=32)
    assert any("p:" in v for v in validate_sample(replace(s, p=24)))
    out_of_range = s.dem.copy()
    out_of_range[0, 0, 0] = 1.5
    assert validate_sample(replace(s, dem=out_of_range)) == ["dem: values outside [0, 1]"]
    nan = s.s1_pre.copy()
    nan[1, 2, 3] = np.nan
    assert validate_sample(replace(s, s1_pre=nan)) == ["s1_pre: non-finite values"]
    assert validate_sample(replace(s, mask=None)) == []


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), corrupt=st.booleans())
def test_validate_is_idempotent_and_pure(seed, corrupt):
    s = make_sample(p=16, seed=seed)
    if corrupt:
        s = replace(s, s1_post=s.s1_post * 3)
    before = {m: s.grid(m).copy() for m in BANDS}
    first = validate_sample(s)
    assert validate_sample(s) == first
    for m in BANDS:
        np.testing.assert_array_equal(s.grid(m), before[m])
