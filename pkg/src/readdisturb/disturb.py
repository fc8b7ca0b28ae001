"""Threshold-accumulator fault model for read disturbance and retention.

Every mechanism adds linearly to one of two accumulators per cell (one per
physical direction). A cell flips once the accumulator of the direction
matching its state at the last restore reaches its threshold; the flip is
latched until the row is restored again.

Flip tests for sampled (log-normal) populations run on the cell's uniform
rank ``u`` rather than on the materialized threshold: the threshold is
``exp(mu + sigma * ndtri(u / p))`` for ``u < p``, so ``threshold <= dose``
iff ``u < p * ndtr((log(dose) - mu) / sigma)``. Only the right-hand side
involves transcendental functions and it is a per-class scalar.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, IntEnum

import numpy as np
from scipy.special import ndtr, ndtri

from readdisturb import kernels
from readdisturb.mechanisms import MechanismParams, Mode
from readdisturb.model import CellArray, CellEncoding, ChipProfile, RowState, disturb_polarity, encoding_of, physical_neighbors


class Direction(IntEnum):
    CHARGED_TO_DISCHARGED = 0
    DISCHARGED_TO_CHARGED = 1


FALL = Direction.CHARGED_TO_DISCHARGED
RISE = Direction.DISCHARGED_TO_CHARGED

EVEN, ODD = 0, 1
# column-parity class whose NWL is the given side
NWL_CLASS = {"upper": EVEN, "lower": ODD}
# side of an aggressor as seen from its victim
UPPER, LOWER = 0, 1
SIDE_NAME = ("upper", "lower")


class EventKind(str, Enum):
    ACTIVATION = "activation"
    OPEN_TIME = "open_time"
    ELAPSED = "elapsed"


@dataclass(frozen=True)
class DisturbanceEvent:
    aggressor: int  # physical row (the aged row for ELAPSED)
    kind: EventKind
    amount: float = 1.0  # activations, or ns for OPEN_TIME / ELAPSED
    temperature: float = 50.0

    def __post_init__(self):
        if self.amount <= 0:
            raise ValueError("event amount must be positive")


@dataclass(frozen=True)
class CellVulnerability:
    """Per-cell thresholds, index 0 charged->discharged, 1 discharged->charged."""

    row: int
    thresholds: tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class Flip:
    row: int
    column: int
    direction: Direction  # physical direction in the disturbance frame


# -- dose arithmetic ---------------------------------------------------------

def class_doses(mech: MechanismParams, temperature, nwl_boosted, nwl_plain, pwl_count, nwl_open_ns, pwl_open_ns, paired):
    """Disturbance received by one column-parity class of a victim.

    Arguments may be numpy arrays (evaluated elementwise). The simulator and
    the closed-form protocol path both call this, so identical inputs give
    bit-identical doses.
    """
    f1 = mech.nwl_hammer.at(temperature)
    f2 = mech.pwl_hammer.at(temperature)
    f4 = mech.nwl_press.at(temperature)
    f5 = mech.pwl_press.at(temperature)
    fall = f1 * (mech.double_sided_boost * nwl_boosted + nwl_plain) + f5 * pwl_open_ns
    rise = f2 * pwl_count + f4 * nwl_open_ns
    if mech.mode is Mode.DEVICE and paired:
        rise = rise * 0.0
    return fall, rise


def segment_increment(mech: MechanismParams, temperature, per_side):
    """Accumulator increments ``[..., class, direction]`` for one restore segment.

    ``per_side[s]`` (s = UPPER, LOWER) holds the segment totals of that
    aggressor side: ``(boosted activations, plain activations, activations
    counted for PWL hammer, open ns, open ns counted for NWL press)``. The
    "counted" totals exclude what device mode suppresses once both sides
    were active. Entries may be arrays; the result broadcasts over them.
    """
    shape = np.broadcast(*[np.asarray(x) for side in per_side for x in side]).shape
    acc = np.zeros(shape + (2, 2))
    for s in (UPPER, LOWER):
        nb, npl, n_live, open_all, open_live = per_side[s]
        nwl_cls = NWL_CLASS[SIDE_NAME[s]]
        pwl_cls = 1 - nwl_cls
        # activations from side s: NWL hammer on nwl_cls, PWL hammer on pwl_cls
        f_fall, _ = class_doses(mech, temperature, nb, npl, 0, 0.0, 0.0, False)
        _, f_rise = class_doses(mech, temperature, 0, 0, n_live, 0.0, 0.0, False)
        # open time of side s: NWL press on nwl_cls, PWL press on pwl_cls
        _, o_rise = class_doses(mech, temperature, 0, 0, 0, open_live, 0.0, False)
        o_fall, _ = class_doses(mech, temperature, 0, 0, 0, 0.0, open_all, False)
        acc[..., nwl_cls, FALL] += f_fall
        acc[..., pwl_cls, RISE] += f_rise
        acc[..., nwl_cls, RISE] += o_rise
        acc[..., pwl_cls, FALL] += o_fall
    return acc


def rank_cutoff(profile: ChipProfile, direction: int, dose):
    """Uniform-rank cutoff ``q``: a sampled cell flips at ``dose`` iff ``u < q``."""
    tp = profile.mechanism.thresholds[direction]
    dose = np.asarray(dose, dtype=np.float64)
    with np.errstate(divide="ignore"):
        z = (np.log(np.where(dose > 0, dose, 1.0)) - tp.mu) / tp.sigma
    q = tp.p * ndtr(z)
    return np.where(dose > 0, q, 0.0)


def sample_vulnerabilities(profile: ChipProfile, row: int) -> CellVulnerability:
    """Materialized thresholds of a physical row (``inf`` = not vulnerable)."""
    profile._check(row)
    if row in profile.threshold_overrides:
        fall, rise = profile.threshold_overrides[row]
        return CellVulnerability(row, (np.asarray(fall, float).copy(), np.asarray(rise, float).copy()))
    out = []
    for d in (FALL, RISE):
        tp = profile.mechanism.thresholds[d]
        u = kernels.uniforms(profile.master_seed, row, int(d), profile.columns_per_row)
        thr = np.full(u.shape, np.inf)
        vul = u < tp.p
        if tp.p > 0:
            thr[vul] = np.exp(tp.mu + tp.sigma * ndtri(u[vul] / tp.p))
        out.append(thr)
    return CellVulnerability(row, (out[0], out[1]))


def count_flips_at(profile: ChipProfile, row: int, direction: int, doses_even, doses_odd):
    """Cells of each parity class flipping at each dose (doses ascending)."""
    doses_even = np.asarray(doses_even, dtype=np.float64)
    doses_odd = np.asarray(doses_odd, dtype=np.float64)
    if row in profile.threshold_overrides:
        thr = np.asarray(profile.threshold_overrides[row][direction], float)
        ce = np.searchsorted(np.sort(thr[0::2]), doses_even, side="right")
        co = np.searchsorted(np.sort(thr[1::2]), doses_odd, side="right")
        return ce.astype(np.int64), co.astype(np.int64)
    return kernels.count_below(
        profile.master_seed, row, int(direction), profile.columns_per_row,
        rank_cutoff(profile, direction, doses_even), rank_cutoff(profile, direction, doses_odd),
    )


def logical_to_direction(profile: ChipProfile, row: int, logical_from: int) -> Direction:
    """Disturbance direction of a logical ``logical_from -> 1-logical_from`` flip."""
    high = disturb_polarity(profile, row).charged(1)  # logical value of the high state
    return FALL if logical_from == high else RISE


def retention_direction(profile: ChipProfile, row: int) -> Direction:
    """Direction retention leakage pushes in the disturbance frame of ``row``."""
    return FALL if disturb_polarity(profile, row) is encoding_of(profile, row) else RISE


# -- state updates -------------------------------------------------------------

def _flip_mask(profile: ChipProfile, row: int, st: RowState, cls: int, direction: int) -> np.ndarray | None:
    """Cells of ``cls`` whose ``direction`` threshold is reached (None if none can be)."""
    dose = st.acc[cls, direction]
    if dose <= 0:
        return None
    ncols = profile.columns_per_row
    if row in profile.threshold_overrides:
        thr = np.asarray(profile.threshold_overrides[row][direction], float)
        mask = thr <= dose
    else:
        q = float(rank_cutoff(profile, direction, dose))
        mins = st.minu.get(direction)
        if mins is None:
            mins = kernels.class_min(profile.master_seed, row, int(direction), ncols)
            st.minu[direction] = mins
        if q <= mins[cls]:
            return None
        mask = kernels.uniforms(profile.master_seed, row, int(direction), ncols) < q
    sel = np.zeros(ncols, dtype=bool)
    sel[cls::2] = True
    return mask & sel


def settle(array: CellArray, row: int) -> list[Flip]:
    """Latch every flip the current accumulators imply for ``row``."""
    st = array._rows.get(row)
    if st is None or not st.acc.any():
        return []
    profile = array.profile
    high = disturb_polarity(profile, row).charged(1)
    state_high = st.seg_bits == high
    fresh = st.bits == st.seg_bits
    flips: list[Flip] = []
    for d in (FALL, RISE):
        in_state = state_high if d == FALL else ~state_high
        for cls in (EVEN, ODD):
            mask = _flip_mask(profile, row, st, cls, d)
            if mask is None:
                continue
            new = mask & in_state & fresh
            if new.any():
                cols = np.flatnonzero(new)
                st.bits[cols] ^= 1
                fresh[cols] = False
                flips.extend(Flip(row, int(c), d) for c in cols)
    return flips


def _victims(profile: ChipProfile, aggressor: int):
    lower, upper = physical_neighbors(profile, aggressor)
    # the aggressor is the upper neighbour of the row below it and vice versa
    if lower is not None:
        yield lower, "upper"
    if upper is not None:
        yield upper, "lower"


def apply_event(array: CellArray, event: DisturbanceEvent) -> list[Flip]:
    """Apply one disturbance event; return the bitflips it causes."""
    profile = array.profile
    profile._check(event.aggressor)
    mech = profile.mechanism
    t = event.temperature
    if event.kind is EventKind.ELAPSED:
        return retention_tick(array, event.amount, t, rows=[event.aggressor])
    flips: list[Flip] = []
    for victim, side in _victims(profile, event.aggressor):
        st = array.row(victim)
        nwl = NWL_CLASS[side]
        pwl = 1 - nwl
        if event.kind is EventKind.ACTIVATION:
            n = event.amount
            boosted = st.last_side is not None and st.last_side != side
            st.sides.add(side)
            if len(st.sides) == 2:
                st.paired = True
            if boosted:
                fall, _ = class_doses(mech, t, 1, n - 1, 0, 0.0, 0.0, st.paired)
            else:
                fall, _ = class_doses(mech, t, 0, n, 0, 0.0, 0.0, st.paired)
            _, rise = class_doses(mech, t, 0, 0, n, 0.0, 0.0, st.paired)
            st.acc[nwl, FALL] += fall
            st.acc[pwl, RISE] += rise
            st.last_side = side
        else:
            _, rise = class_doses(mech, t, 0, 0, 0, event.amount, 0.0, st.paired)
            fall, _ = class_doses(mech, t, 0, 0, 0, 0.0, event.amount, st.paired)
            st.acc[nwl, RISE] += rise
            st.acc[pwl, FALL] += fall
        flips.extend(settle(array, victim))
    return flips


def retention_tick(array: CellArray, elapsed: float, temperature: float, rows=None) -> list[Flip]:
    """Leak charge from physically charged cells for ``elapsed`` ns."""
    if elapsed <= 0:
        raise ValueError("elapsed must be positive")
    profile = array.profile
    dose = profile.mechanism.retention.at(temperature) * elapsed
    array.now_ps += int(round(elapsed * 1000))
    if dose <= 0:
        return []
    flips: list[Flip] = []
    for row in (array.materialized() if rows is None else rows):
        st = array.row(row)
        st.acc[:, retention_direction(profile, row)] += dose
        flips.extend(settle(array, row))
    return flips


def physical_flip_direction(encoding: CellEncoding, logical_from: int) -> Direction:
    """Physical direction of a logical flip in a row with ``encoding``."""
    return FALL if encoding.charged(logical_from) == 1 else RISE


def no_flip_possible(mech: MechanismParams) -> bool:
    return all(
        m.strength == 0 for m in (mech.nwl_hammer, mech.pwl_hammer, mech.nwl_press, mech.pwl_press, mech.retention)
    ) or all(t.p == 0 for t in mech.thresholds)


__all__ = [
    "Direction", "FALL", "RISE", "EventKind", "DisturbanceEvent", "CellVulnerability", "Flip",
    "class_doses", "rank_cutoff", "sample_vulnerabilities", "count_flips_at", "apply_event",
    "retention_tick", "settle", "logical_to_direction", "retention_direction", "physical_flip_direction",
]

