import pytest

from readdisturb import calibration as C
from readdisturb import tables as T
from readdisturb.model import load_profile, shipped_profile_names, synthetic_profile


@pytest.fixture(scope="module")
def mini():
    """1024-row bank with full-width rows and realistic populations."""
    src = load_profile("H-8Gb-C")
    return synthetic_profile(5, rows=1024, subarray_size=512, columns=65536, permute=False, random_encodings=False, mechanism=src.mechanism)


def test_recovers_own_statistics(mini):
    targets = C.measure(mini, rows=256).values
    fitted = C.calibrate(mini, targets, rows=256, budget=300, start=C.initial_guess(targets, 65536))
    errs = fitted.calibration["relative_errors"]
    assert max(errs.values()) <= 0.02
    assert set(errs) == set(C.KEYS)
    assert fitted.calibration["iterations"] <= 300
    # refit of a fitted profile is a no-op
    again = C.calibrate(fitted, targets, rows=256, budget=0)
    assert again.mechanism == fitted.mechanism and again.calibration["iterations"] == 0


def test_zero_budget_on_unfitted_profile_fails(mini):
    targets = C.measure(mini, rows=64).values
    far = C.initial_guess({k: v * 2 for k, v in targets.items()}, 65536)
    with pytest.raises(C.CalibrationFailed) as e:
        C.calibrate(mini, targets, rows=64, budget=0, start=far)
    assert set(e.value.errors) == set(C.KEYS) and max(e.value.errors.values()) > 0.10


def test_bad_targets_rejected(mini):
    with pytest.raises(ValueError):
        C.calibrate(mini, {k: 0 for k in C.KEYS}, rows=16)


@pytest.mark.parametrize("name", shipped_profile_names())
def test_shipped_provenance(name):
    p = load_profile(name)
    cal = p.calibration
    assert cal["targets"] == T.BY_NAME[name].as_dict()
    assert cal["target_tables"] == [2, 3, 4]
    assert max(cal["relative_errors"].values()) <= 0.10
    assert cal["rows"] == 2048
    # geometry and layout are those of the uncalibrated base
    base = C.base_profile(T.BY_NAME[name])
    assert (p.rows_per_bank, p.columns_per_row, p.remapped_rows, p.master_seed) == (
        base.rows_per_bank, base.columns_per_row, base.remapped_rows, base.master_seed)


def test_shipped_profile_stats_reproduce():
    p = load_profile("S-8Gb-B")
    got = C.measure(p).errors(p.calibration["targets"])
    for k, v in got.items():
        assert v == pytest.approx(p.calibration["relative_errors"][k], abs=1e-6)
