import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from readdisturb.model import (
    CellArray,
    CellEncoding,
    ChipProfile,
    EncodingPolicy,
    Role,
    encoding_of,
    init_row,
    load_profile,
    neighbors,
    physical_neighbors,
    shipped_profile_names,
    synthetic_profile,
)
from readdisturb.tables import CHIPS

from conftest import small_profile


def test_twelve_shipped_profiles():
    names = shipped_profile_names()
    assert names == sorted(c.name for c in CHIPS)
    for n in names:
        p = load_profile(n)
        assert p.name == n
        assert p.columns_per_row == 65536
        assert p.rows_per_bank == (65536 if p.die_density_gb == 8 else 131072)
        assert p.calibration is not None


def test_profile_invariants_rejected():
    good = small_profile(1)
    d = good.to_dict()
    with pytest.raises(ValueError):
        ChipProfile.from_dict({**d, "subarray_size": 48})
    with pytest.raises(ValueError):
        ChipProfile.from_dict({**d, "logical_to_physical_map": [0] * good.rows_per_bank})
    with pytest.raises(ValueError):
        ChipProfile.from_dict({**d, "remapped_rows": [good.rows_per_bank]})
    with pytest.raises(ValueError):
        ChipProfile.from_dict({**d, "manufacturer_id": "X"})


@given(st.integers(0, 2**32))
def test_json_roundtrip(seed):
    p = synthetic_profile(seed, n_remapped=2)
    q = ChipProfile.from_dict(json.loads(p.to_json()))
    assert q == p
    assert q.sha256() == p.sha256()


@given(st.integers(0, 2**32), st.data())
def test_logical_physical_bijection(seed, data):
    p = synthetic_profile(seed)
    r = data.draw(st.integers(0, p.rows_per_bank - 1))
    assert p.logical(p.physical(r)) == r
    assert sorted(p.physical(x) for x in range(p.rows_per_bank)) == list(range(p.rows_per_bank))


@given(st.sampled_from(list(CellEncoding)), st.lists(st.integers(0, 1), min_size=1, max_size=64))
def test_encoding_roundtrip(enc, bits):
    b = np.array(bits)
    assert np.array_equal(enc.decode(enc.charged(b)), b)


def test_encoding_definition():
    assert CellEncoding.TRUE_CELL.charged(1) == 1
    assert CellEncoding.ANTI_CELL.charged(1) == 0


@given(st.integers(0, 2**32), st.data())
def test_neighbors_symmetric(seed, data):
    p = synthetic_profile(seed, n_remapped=3)
    phys = data.draw(st.integers(0, p.rows_per_bank - 1))
    lower, upper = physical_neighbors(p, phys)
    if upper is not None:
        assert physical_neighbors(p, upper)[0] == phys
    if lower is not None:
        assert physical_neighbors(p, lower)[1] == phys


def test_subarray_boundaries_and_remaps():
    p = synthetic_profile(3, rows=64, subarray_size=16, permute=False, n_remapped=0)
    for sa in range(4):
        assert physical_neighbors(p, sa * 16)[0] is None
        assert physical_neighbors(p, sa * 16 + 15)[1] is None
    p = synthetic_profile(3, rows=64, subarray_size=16, permute=False, n_remapped=2)
    for r in p.remapped_rows:
        for nb in physical_neighbors(p, r):
            assert nb is None
        if r % 16 and r - 1 not in p.remapped_rows:
            assert physical_neighbors(p, r - 1)[1] is None


@given(st.integers(0, 2**16 - 1))
def test_each_cell_has_one_nwl_and_one_pwl(col):
    adj = neighbors(small_profile(1), 5)
    roles = {adj.role("upper", col), adj.role("lower", col)}
    assert roles == {Role.NWL, Role.PWL}
    # a wordline is NWL for one column class and PWL for the other
    assert adj.role("upper", col) != adj.role("upper", col + 1)


def test_encoding_policies():
    base = small_profile(1).to_dict()
    allt = ChipProfile.from_dict({**base, "cell_encoding_policy": "AllTrue", "subarray_encodings": ["TrueCell"]})
    assert {encoding_of(allt, r) for r in range(64)} == {CellEncoding.TRUE_CELL}
    anti = ChipProfile.from_dict({**base, "cell_encoding_policy": "AllAnti", "subarray_encodings": ["TrueCell"]})
    assert {encoding_of(anti, r) for r in range(64)} == {CellEncoding.ANTI_CELL}
    inter = ChipProfile.from_dict({**base, "cell_encoding_policy": EncodingPolicy.INTERLEAVED.value, "subarray_encodings": ["AntiCell"]})
    got = [encoding_of(inter, sa * 16).value for sa in range(4)]
    assert got == ["AntiCell", "TrueCell", "AntiCell", "TrueCell"]


def test_m_profile_interleaves():
    p = load_profile("M-8Gb-E")
    assert encoding_of(p, 0) is not encoding_of(p, p.subarray_size)
    assert encoding_of(load_profile("S-8Gb-B"), 512) is CellEncoding.TRUE_CELL


def test_init_row_resets_state():
    p = small_profile(2)
    arr = CellArray(p)
    st_ = arr.row(4)
    st_.acc[:] = 5.0
    arr.now_ps = 10_000
    init_row(arr, 4, 0xFF)
    assert arr.logical_bits(4).all()
    assert not arr.accumulators(4)[0].any()
    assert arr.retention_clock_ns(4) == 0.0
    assert not arr.flipped(4).any()
    with pytest.raises(ValueError):
        init_row(arr, 4, 0x55)


def test_untouched_rows_read_fill():
    arr = CellArray(small_profile(2), 0xFF)
    assert arr.logical_bits(9).all()
    assert arr.materialized() == [9]
