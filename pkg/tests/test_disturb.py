import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from readdisturb import commands, kernels
from readdisturb.disturb import (
    EVEN,
    FALL,
    ODD,
    RISE,
    DisturbanceEvent,
    EventKind,
    apply_event,
    count_flips_at,
    no_flip_possible,
    retention_tick,
    sample_vulnerabilities,
)
from readdisturb.mechanisms import Mechanism, MechanismParams, Mode
from readdisturb.model import CellArray, CellEncoding, encoding_of, init_row, physical_neighbors, synthetic_profile

from conftest import low_threshold_mechanism


def lowprof(seed=3, **kw):
    return synthetic_profile(seed, mechanism=low_threshold_mechanism(kw.pop("mode", None)), **kw)


def interior_row(p):
    for r in range(p.rows_per_bank):
        lo, up = physical_neighbors(p, r)
        if lo is not None and up is not None:
            return r, lo, up


@given(st.integers(0, 2**40), st.integers(0, 63), st.sampled_from([FALL, RISE]),
       st.lists(st.floats(1.0, 1e6), min_size=1, max_size=8))
def test_flip_counts_match_lognormal_oracle(seed, row, d, doses):
    p = synthetic_profile(seed)
    tp = p.mechanism.thresholds[d]
    u = kernels.uniforms(p.master_seed, row, int(d), p.columns_per_row)
    thr = np.full(u.shape, np.inf)
    vul = u < tp.p
    thr[vul] = stats.lognorm.ppf(u[vul] / tp.p, s=tp.sigma, scale=math.exp(tp.mu))
    doses = np.sort(doses)
    ce, co = count_flips_at(p, row, d, doses, doses)
    for i, x in enumerate(doses):
        # ppf and the closed form can disagree in the last ulp right at a threshold
        near = np.isclose(thr, x, rtol=1e-9)
        lo_e, lo_o = np.sum((thr[0::2] <= x) & ~near[0::2]), np.sum((thr[1::2] <= x) & ~near[1::2])
        assert lo_e <= ce[i] <= lo_e + near[0::2].sum()
        assert lo_o <= co[i] <= lo_o + near[1::2].sum()


def test_sampling_is_pure_and_positive():
    p = synthetic_profile(11)
    a, b = sample_vulnerabilities(p, 5), sample_vulnerabilities(p, 5)
    for d in (FALL, RISE):
        assert np.array_equal(a.thresholds[d], b.thresholds[d])
        assert np.all(a.thresholds[d] > 0)
    assert not np.array_equal(a.thresholds[FALL], sample_vulnerabilities(p, 6).thresholds[FALL])


def test_vulnerable_fraction():
    p = synthetic_profile(12, columns=100_000)
    v = sample_vulnerabilities(p, 2)
    for d in (FALL, RISE):
        frac = np.isfinite(v.thresholds[d]).mean()
        assert abs(frac - p.mechanism.thresholds[d].p) < 0.01


events = st.lists(
    st.tuples(st.sampled_from(["lo", "up"]), st.sampled_from([EventKind.ACTIVATION, EventKind.OPEN_TIME]), st.integers(1, 400)),
    min_size=1, max_size=25,
)


@given(st.integers(0, 2**20), events)
def test_accumulators_non_negative_and_non_decreasing(seed, evs):
    p = lowprof(seed)
    v, lo, up = interior_row(p)
    arr = CellArray(p, 0xFF)
    init_row(arr, v, 0xFF)
    prev = np.zeros((2, p.columns_per_row))
    for side, kind, amt in evs:
        apply_event(arr, DisturbanceEvent(lo if side == "lo" else up, kind, float(amt)))
        cur = np.vstack(arr.accumulators(v))
        assert np.all(cur >= 0)
        assert np.all(cur >= prev)
        prev = cur


@given(st.integers(0, 2**20), st.integers(1, 3000), st.integers(0, 3000), st.sampled_from([0x00, 0xFF]))
def test_flip_set_monotone_in_activations(seed, m, extra, fill):
    p = lowprof(seed)
    v, lo, up = interior_row(p)
    sets = []
    for n in (m, m + extra):
        arr = CellArray(p, fill)
        for agg in (lo, up):
            init_row(arr, agg, fill ^ 0xFF)
        init_row(arr, v, fill)
        for _ in range(2):
            apply_event(arr, DisturbanceEvent(lo, EventKind.ACTIVATION, n / 2))
            apply_event(arr, DisturbanceEvent(up, EventKind.ACTIVATION, n / 2))
        sets.append(set(np.flatnonzero(arr.flipped(v))))
    assert sets[0] <= sets[1]


def test_temperature_never_reduces_flips():
    mech = low_threshold_mechanism()
    mech = replace(mech, nwl_press=Mechanism(1e-3, 1.02), pwl_press=Mechanism(5e-3, 1.01), nwl_hammer=Mechanism(1.0, 1.005))
    p = synthetic_profile(4, mechanism=mech)
    v, lo, up = interior_row(p)
    counts = []
    for temp in (50, 65, 80, 95):
        arr = CellArray(p, 0xFF)
        init_row(arr, v, 0xFF)
        prog = commands.build_hammer_program([p.logical(up)], 200, 2000.0)
        commands.execute(arr, prog, temperature=temp)
        counts.append(int(arr.flipped(v).sum()))
    assert counts == sorted(counts) and counts[-1] > counts[0]


def test_own_activation_restores_row():
    p = lowprof(5)
    v, lo, up = interior_row(p)
    arr = CellArray(p, 0xFF)
    init_row(arr, v, 0xFF)
    commands.execute(arr, commands.build_hammer_program([p.logical(lo), p.logical(up)], 4000))
    assert arr.flipped(v).any()
    before = arr.logical_bits(v).copy()
    t0 = arr.now_ps / 1000 + 100
    commands.execute(arr, [commands.TimedCommand(commands.Opcode.ACT, t0, p.logical(v)), commands.TimedCommand(commands.Opcode.PRE, t0 + 32)])
    assert not np.vstack(arr.accumulators(v)).any()
    # restored at the ACT; the clock then runs to the end of the program (PRE + tRP)
    assert arr.retention_clock_ns(v) == pytest.approx(32.0 + commands.T_RP / 1000)
    # restore rewrites what was read; flipped cells stay flipped
    assert np.array_equal(arr.logical_bits(v), before)
    assert not arr.flipped(v).any()


def device_prof(seed=6):
    p = lowprof(seed, random_encodings=False)
    return p.device_mode()


def test_device_mode_double_sided_only_fall():
    p = device_prof()
    v, lo, up = interior_row(p)
    dirs = set()
    for fill in (0x00, 0xFF):
        arr = CellArray(p, fill)
        for agg in (lo, up):
            init_row(arr, agg, fill ^ 0xFF)
        init_row(arr, v, fill)
        tr = commands.execute(arr, commands.build_hammer_program([p.logical(lo), p.logical(up)], 20_000))
        dirs |= {f.direction for f in tr.flips if f.row == v}
    assert dirs == {FALL}


def test_device_mode_rowpress_both_directions():
    p = device_prof()
    v, lo, up = interior_row(p)
    dirs = {}
    for side, agg in (("upper", up), ("lower", lo)):
        seen = set()
        for fill in (0x00, 0xFF):
            arr = CellArray(p, fill)
            init_row(arr, v, fill)
            tr = commands.execute(arr, commands.build_hammer_program([p.logical(agg)], 40, 7800.0))
            seen |= {(f.direction, f.column % 2) for f in tr.flips if f.row == v}
        dirs[side] = seen
    # NWL press pushes discharged cells up, PWL press pulls charged cells down
    assert (RISE, EVEN) in dirs["upper"] and (FALL, ODD) in dirs["upper"]
    assert (RISE, ODD) in dirs["lower"] and (FALL, EVEN) in dirs["lower"]


def test_empirical_rowpress_is_one_sided():
    p = lowprof(8)
    v, lo, up = interior_row(p)
    ups = downs = 0
    for agg in (lo, up):
        for fill in (0x00, 0xFF):
            arr = CellArray(p, fill)
            init_row(arr, v, fill)
            commands.execute(arr, commands.build_hammer_program([p.logical(agg)], 40, 7800.0))
            n = int(arr.flipped(v).sum())
            if fill == 0x00:
                ups += n
            else:
                downs += n
    assert downs > 0 and ups <= downs * 0.001


def test_retention_only_discharges():
    p = synthetic_profile(9, mechanism=low_threshold_mechanism(), random_encodings=True).device_mode()
    rows = list(range(p.rows_per_bank))
    for fill in (0x00, 0xFF):
        arr = CellArray(p, fill)
        for r in rows:
            init_row(arr, r, fill)
        flips = retention_tick(arr, 2e9, 80.0, rows=rows)
        assert flips
        for f in flips:
            assert f.direction == FALL
            enc = encoding_of(p, f.row)
            assert enc.charged(1 if fill == 0xFF else 0) == 1


def test_retention_clock_and_doubling():
    p = lowprof(10)
    counts = []
    for t in (1e8, 2e8, 4e8, 8e8):
        arr = CellArray(p, 0xFF)
        init_row(arr, 3, 0xFF)
        retention_tick(arr, t, 80.0, rows=[3])
        assert arr.retention_clock_ns(3) == pytest.approx(t)
        counts.append(int(arr.flipped(3).sum()))
    assert counts == sorted(counts)


def test_event_and_parameter_validation():
    with pytest.raises(ValueError):
        DisturbanceEvent(1, EventKind.ACTIVATION, 0)
    with pytest.raises(ValueError):
        Mechanism(-1.0)
    with pytest.raises(ValueError):
        replace(low_threshold_mechanism(), double_sided_boost=0.5)
    with pytest.raises(IndexError):
        apply_event(CellArray(lowprof(1)), DisturbanceEvent(10_000, EventKind.ACTIVATION))


def test_zeroed_mechanism_never_flips():
    p = lowprof(12)
    p = p.with_mechanism(p.mechanism.zeroed())
    assert no_flip_possible(p.mechanism)
    v, lo, up = interior_row(p)
    arr = CellArray(p, 0xFF)
    tr = commands.execute(arr, commands.build_hammer_program([p.logical(lo), p.logical(up)], 50_000))
    assert tr.flips == [] and not arr.flipped(v).any()


def test_device_variant_flags():
    m = low_threshold_mechanism()
    d = m.device_variant()
    assert d.mode is Mode.DEVICE and d.nwl_press == m.pwl_press
    assert MechanismParams.from_dict(d.to_dict()) == d


def test_true_cell_default_frame():
    p = lowprof(13)
    assert {encoding_of(p, r) for r in range(16)} <= set(CellEncoding)
