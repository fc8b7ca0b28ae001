import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from readdisturb import protocols as P
from readdisturb.commands import T_RAS
from readdisturb.disturb import DisturbanceEvent, EventKind, apply_event
from readdisturb.model import CellArray, init_row, physical_neighbors, synthetic_profile

from conftest import low_threshold_mechanism

SMALL = P.ExperimentConfig(rows_to_test=64, hc_hi=20_000, hc_step=250, rowpress_count=200, reveng_count=20_000)


def lowprof(seed, **kw):
    return synthetic_profile(seed, mechanism=low_threshold_mechanism(kw.pop("mode", None)), **kw)


def measurable(p):
    return [r for r, why in P.select_rows(p, p.rows_per_bank) if why is None]


def brute_force_onset(p, victim, direction, cap):
    """Per-activation stepping: pairs completed when the first flip appears."""
    lo, up = P.aggressors_of(p, victim)
    pattern = P.PATTERN_FOR[direction]
    bit = 1 if pattern == 0xFF else 0
    arr = CellArray(p)
    init_row(arr, p.physical(victim), pattern)
    for a in (lo, up):
        init_row(arr, p.physical(a), pattern ^ 0xFF)
    v = p.physical(victim)
    order = [p.physical(a) for a in sorted((lo, up))]
    for k in range(1, cap + 1):
        for agg in order:
            apply_event(arr, DisturbanceEvent(agg, EventKind.ACTIVATION, 1.0))
            apply_event(arr, DisturbanceEvent(agg, EventKind.OPEN_TIME, T_RAS / 1000))
            if np.any(arr.logical_bits(v) != bit):
                return k
    return None


def expected_from_onset(onset, cfg):
    if onset is None:
        return P.NOT_FOUND
    grid = cfg.grid()
    above = grid[grid >= onset]
    return int(above[0]) if above.size else P.NOT_FOUND


@pytest.mark.parametrize("method", ["analytic", "simulate"])
def test_hc_first_oracle_instances(method):
    """Sweep result is the smallest candidate at or above the stepped onset."""
    cfg = P.ExperimentConfig(hc_hi=3000, hc_step=50, method=method)
    checked = 0
    seed = 0
    while checked < 100:
        p = lowprof(seed, rows=32, subarray_size=32, columns=256)
        rows = measurable(p)
        victim = rows[seed % len(rows)]
        d = P.DIRECTIONS[seed % 2]
        got = P.run_hc_first(p, victim, d, cfg)
        assert got == expected_from_onset(brute_force_onset(p, victim, d, cfg.hc_hi), cfg), (seed, victim, d)
        checked += 1
        seed += 1
        if method == "simulate" and checked >= 20:
            break


@given(st.integers(0, 2**30))
def test_skip_rule(seed):
    p = synthetic_profile(seed, n_remapped=4)
    for r, why in P.select_rows(p, p.rows_per_bank):
        lo, up = physical_neighbors(p, p.physical(r))
        if why is None:
            assert lo is not None and up is not None
            continue
        if why == P.SKIP_REMAPPED:
            assert p.physical(r) in p.remapped_rows
        with pytest.raises(P.SkippedRow):
            P.aggressors_of(p, r)


def test_default_row_set_counts_measurable_rows():
    p = synthetic_profile(3, n_remapped=3)
    plan = P.select_rows(p, 20)
    assert sum(why is None for _, why in plan) == 20
    assert [r for r, _ in plan] == list(range(len(plan)))


@given(st.integers(0, 2**20))
def test_result_invariants(seed):
    p = lowprof(seed)
    res = P.run_experiment(p, P.EXPERIMENTS, SMALL)
    for r in res.measured():
        for k in ("hc_first_0to1", "hc_first_1to0", "hc_exceeds"):
            v = getattr(r, k)
            assert v == P.NOT_FOUND or (v % SMALL.hc_step == 0 and SMALL.hc_lo <= v <= SMALL.hc_hi)
        for k in P.CSV_FIELDS[5:7] + P.CSV_FIELDS[8:]:
            assert getattr(r, k) >= 0
        if isinstance(r.hc_exceeds, int) and isinstance(r.hc_first_0to1, int):
            assert r.hc_exceeds >= r.hc_first_0to1
    for r in res.rows:
        if r.skipped:
            assert r.reason and all(getattr(r, k) is None for k in P.CSV_FIELDS[3:])


@pytest.mark.parametrize("device", [False, True])
def test_analytic_equals_simulation(device):
    p = lowprof(21, rows=32, subarray_size=16)
    if device:
        p = p.device_mode()
    cfg = P.ExperimentConfig(rows_to_test=8, hc_hi=4000, hc_step=250, rowpress_count=60)
    a = P.run_experiment(p, P.EXPERIMENTS, cfg)
    s = P.run_experiment(p, P.EXPERIMENTS, P.with_method(cfg, "simulate"))
    assert a.to_csv() == s.to_csv()


def test_rerun_and_threads_identical():
    p = lowprof(5)
    one = P.run_experiment(p, P.EXPERIMENTS, SMALL, threads=1).to_csv()
    assert P.run_experiment(p, P.EXPERIMENTS, SMALL, threads=1).to_csv() == one
    assert P.run_experiment(p, P.EXPERIMENTS, SMALL, threads=4).to_csv() == one


def test_restore_between_measurements():
    p = lowprof(6)
    cfg = P.with_method(SMALL, "simulate")
    v = measurable(p)[0]
    assert P.run_hc_first(p, v, "1to0", cfg) == P.run_hc_first(p, v, "1to0", cfg)


def test_csv_roundtrip():
    p = lowprof(7, n_remapped=2)
    res = P.run_experiment(p, P.EXPERIMENTS, SMALL)
    text = res.to_csv()
    assert text.startswith("# readdisturb ") and f"sha256={p.sha256()}" in text and f"seed={p.master_seed}" in text
    back = P.ExperimentResult.from_csv(text)
    assert back.to_csv() == text
    assert back.rows == res.rows


def test_config_validation():
    with pytest.raises(ValueError):
        P.ExperimentConfig(hc_step=0)
    with pytest.raises(ValueError):
        P.ExperimentConfig(hc_lo=10, hc_hi=5)
    with pytest.raises(ValueError):
        P.run_hc_first(lowprof(1), 5, "up")
    assert P.ExperimentConfig(rows_to_test=8).overrides() == {"rows_to_test": 8}


def test_not_found_when_thresholds_unreachable():
    p = synthetic_profile(8)  # thresholds far above a 1000-activation sweep
    cfg = P.ExperimentConfig(rows_to_test=4, hc_hi=1000, hc_step=500)
    res = P.run_experiment(p, ("hcfirst", "hcexceeds"), cfg)
    assert all(r.hc_first_0to1 == P.NOT_FOUND and r.hc_exceeds == P.NOT_FOUND for r in res.measured())


def test_retention_by_pattern():
    p = lowprof(9, random_encodings=True).device_mode()
    cfg = P.ExperimentConfig()
    for r in range(0, 64, 9):
        f00, fff = P.run_retention(p, r, 0x00, cfg), P.run_retention(p, r, 0xFF, cfg)
        assert (f00 == 0) != (fff == 0)


@pytest.mark.parametrize("method", ["analytic", "simulate"])
@pytest.mark.parametrize("seed", range(4))
def test_reveng_map_recovers_layout(method, seed):
    p = lowprof(100 + seed, n_remapped=2)
    cfg = P.with_method(SMALL, method)
    m = P.reveng_row_mapping(p, cfg)
    for r in range(p.rows_per_bank):
        truth = P.ground_truth_neighbors(p, r)
        assert m.neighbors[r] == truth
        assert (m.status[r] == "undetectable") == (truth == ())


def test_reveng_cells_recovers_layout():
    p = lowprof(11, random_encodings=True, n_remapped=3)
    enc = P.reveng_true_anti(p, SMALL)
    assert enc == P.ground_truth_encodings(p, enc)
