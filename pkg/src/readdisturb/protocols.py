"""Experiment procedures: HC_first, max bitflips, HC exceeds, RowPress,
retention, and the two array-layout reverse-engineering procedures.

Every per-row measurement exists in two forms. ``simulate`` builds the
actual command programs and runs them through the command engine on a fresh
CellArray per trial. ``analytic`` evaluates the same trials in closed form:
the per-class accumulator totals a program produces are known exactly, so
they are fed through the engine's own dose function and counted with a
single kernel pass per direction. The two agree bit for bit.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from readdisturb import __version__, commands, disturb, kernels
from readdisturb.disturb import EVEN, LOWER, ODD, UPPER, count_flips_at, logical_to_direction, rank_cutoff
from readdisturb.mechanisms import Mode
from readdisturb.model import (
    CellArray,
    CellEncoding,
    ChipProfile,
    encoding_of,
    init_row,
    physical_neighbors,
)

NOT_FOUND = "NotFound"
DIRECTIONS = ("0to1", "1to0")  # logical
PATTERN_FOR = {"0to1": 0x00, "1to0": 0xFF}

SKIP_REMAPPED = "remapped"
SKIP_BOUNDARY = "subarray_boundary"
SKIP_REMAPPED_NEIGHBOR = "remapped_neighbor"

EXPERIMENTS = ("hcfirst", "maxflips", "hcexceeds", "rowpress")


class SkippedRow(Exception):
    def __init__(self, row, reason):
        super().__init__(f"row {row} skipped: {reason}")
        self.row = row
        self.reason = reason


class UndetectableNeighbor(Exception):
    pass


class Inconclusive(Exception):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    rows_to_test: int = 2048
    bank: int = 1
    temperature: float = 50.0
    victim_pattern: int | None = None  # None: derived from the direction
    hc_lo: int = 0
    hc_hi: int = 500_000
    hc_step: int = 1000
    hammer_open_ns: float = commands.T_RAS / 1000
    rowpress_open_ns: float = 7800.0
    rowpress_count: int = 7500
    rowpress_temperature: float = 80.0
    reveng_count: int = 500_000
    retention_wait_ns: float = 2.0e9
    retention_temperature: float = 80.0
    first_row: int = 0
    method: str = "analytic"

    def __post_init__(self):
        if self.hc_step <= 0:
            raise ValueError("sweep step must be positive")
        if self.hc_hi < self.hc_lo or self.hc_lo < 0:
            raise ValueError("sweep bounds must satisfy 0 <= lo <= hi")
        if self.rows_to_test < 0:
            raise ValueError("rows_to_test must be >= 0")
        if self.method not in ("analytic", "simulate"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.victim_pattern not in (None, 0x00, 0xFF):
            raise ValueError("victim pattern must be 0x00 or 0xFF")

    def grid(self) -> np.ndarray:
        return np.arange(self.hc_lo, self.hc_hi + 1, self.hc_step, dtype=np.int64)

    def overrides(self) -> dict:
        base = ExperimentConfig()
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) != getattr(base, f.name)}


@dataclass
class RowResult:
    row: int
    skipped: bool = False
    reason: str = ""
    hc_first_0to1: int | str | None = None
    hc_first_1to0: int | str | None = None
    maxflips_0to1: int | None = None
    maxflips_1to0: int | None = None
    hc_exceeds: int | str | None = None
    rp_upper_0to1: int | None = None
    rp_upper_1to0: int | None = None
    rp_lower_0to1: int | None = None
    rp_lower_1to0: int | None = None


CSV_FIELDS = [f.name for f in fields(RowResult)]


@dataclass
class ExperimentResult:
    profile: str
    profile_sha256: str
    seed: int
    experiments: tuple
    rows: list = field(default_factory=list)
    mode: str = "empirical"
    config: dict = field(default_factory=dict)

    def measured(self):
        return [r for r in self.rows if not r.skipped]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(
            f"# readdisturb {__version__} profile={self.profile} sha256={self.profile_sha256} "
            f"seed={self.seed} mode={self.mode} experiments={'+'.join(self.experiments)}\n"
        )
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, k)) for k in CSV_FIELDS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ExperimentResult":
        lines = text.splitlines()
        meta = {}
        if lines and lines[0].startswith("#"):
            for tok in lines[0][1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k] = v
            lines = lines[1:]
        rows = []
        for rec in csv.DictReader(lines):
            r = RowResult(row=int(rec["row"]), skipped=rec["skipped"] == "1", reason=rec["reason"])
            for k in CSV_FIELDS[3:]:
                setattr(r, k, _parse(rec.get(k, "")))
            rows.append(r)
        return cls(
            profile=meta.get("profile", "?"),
            profile_sha256=meta.get("sha256", ""),
            seed=int(meta.get("seed", 0)),
            experiments=tuple(meta.get("experiments", "").split("+")) if meta.get("experiments") else (),
            rows=rows,
            mode=meta.get("mode", "empirical"),
        )


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    return str(v)


def _parse(s: str):
    if s == "":
        return None
    if s == NOT_FOUND:
        return NOT_FOUND
    return int(s)


# -- row selection ------------------------------------------------------------

def skip_reason(profile: ChipProfile, logical: int) -> str | None:
    phys = profile.physical(logical)
    if phys in profile.remapped_rows:
        return SKIP_REMAPPED
    lower, upper = physical_neighbors(profile, phys)
    if lower is not None and upper is not None:
        return None
    S = profile.subarray_size
    for nb, alive in ((phys - 1, lower), (phys + 1, upper)):
        if alive is None and 0 <= nb < profile.rows_per_bank and nb // S == phys // S and nb in profile.remapped_rows:
            return SKIP_REMAPPED_NEIGHBOR
    return SKIP_BOUNDARY


def select_rows(profile: ChipProfile, n: int, first: int = 0) -> list[tuple[int, str | None]]:
    """First ``n`` measurable logical rows from ``first``, plus the skipped ones met on the way."""
    out = []
    found = 0
    r = first
    while found < n and r < profile.rows_per_bank:
        reason = skip_reason(profile, r)
        out.append((r, reason))
        if reason is None:
            found += 1
        r += 1
    return out


def aggressors_of(profile: ChipProfile, victim: int) -> tuple[int, int]:
    """Logical addresses of the (physically lower, physically upper) neighbours."""
    reason = skip_reason(profile, victim)
    if reason is not None:
        raise SkippedRow(victim, reason)
    phys = profile.physical(victim)
    return profile.logical(phys - 1), profile.logical(phys + 1)


# -- closed-form trial doses ----------------------------------------------------

def double_sided_acc(profile: ChipProfile, victim: int, counts, temperature: float, open_ps: int = commands.T_RAS):
    """Victim accumulators after a fresh double-sided program, per count."""
    lo_l, up_l = aggressors_of(profile, victim)
    first = LOWER if lo_l < up_l else UPPER  # alternation starts at the lower address
    second = 1 - first
    n = np.asarray(counts, dtype=np.int64)
    one = np.minimum(n, 1)
    device = profile.mechanism.mode is Mode.DEVICE
    open_all = (n * open_ps) / 1000.0
    per_side = [None, None]
    per_side[first] = (
        np.maximum(n - 1, 0), one, one if device else n,
        open_all, (one * open_ps) / 1000.0 if device else open_all,
    )
    zero = np.zeros_like(n)
    per_side[second] = (n, zero, zero if device else n, open_all, zero / 1000.0 if device else open_all)
    return disturb.segment_increment(profile.mechanism, temperature, per_side)


def single_sided_acc(profile: ChipProfile, side: int, counts, temperature: float, open_ps: int):
    n = np.asarray(counts, dtype=np.int64)
    zero = np.zeros_like(n)
    open_all = (n * open_ps) / 1000.0
    per_side = [None, None]
    per_side[side] = (zero, n, n, open_all, open_all)
    per_side[1 - side] = (zero, zero, zero, zero / 1000.0, zero / 1000.0)
    return disturb.segment_increment(profile.mechanism, temperature, per_side)


def _counts(profile, phys, direction, acc_blocks):
    """Flip counts for several accumulator blocks sharing one kernel pass."""
    qe = np.concatenate([rank_cutoff(profile, direction, a[..., EVEN, direction]).ravel() for a in acc_blocks])
    qo = np.concatenate([rank_cutoff(profile, direction, a[..., ODD, direction]).ravel() for a in acc_blocks])
    if phys in profile.threshold_overrides:
        de = np.concatenate([a[..., EVEN, direction].ravel() for a in acc_blocks])
        do = np.concatenate([a[..., ODD, direction].ravel() for a in acc_blocks])
        oe, oo = np.argsort(de, kind="stable"), np.argsort(do, kind="stable")
        ce, co = count_flips_at(profile, phys, direction, de[oe], do[oo])
    else:
        oe, oo = np.argsort(qe, kind="stable"), np.argsort(qo, kind="stable")
        ce, co = kernels.count_below(profile.master_seed, phys, int(direction), profile.columns_per_row, qe[oe], qo[oo])
    tot = np.empty(len(qe), dtype=np.int64)
    te = np.empty_like(tot)
    to = np.empty_like(tot)
    te[oe] = ce
    to[oo] = co
    tot = te + to
    out, k = [], 0
    for a in acc_blocks:
        m = int(np.prod(a.shape[:-2]))
        out.append(tot[k:k + m].reshape(a.shape[:-2]))
        k += m
    return out


def analytic_row(profile: ChipProfile, victim: int, config: ExperimentConfig, experiments) -> RowResult:
    """Closed-form evaluation of the requested experiments on one row."""
    res = RowResult(row=victim)
    phys = profile.physical(victim)
    grid = config.grid()
    want_ds = bool({"hcfirst", "maxflips", "hcexceeds"} & set(experiments))
    want_rp = "rowpress" in experiments
    ds = double_sided_acc(profile, victim, grid, config.temperature, commands._ps(config.hammer_open_ns)) if want_ds else None
    rp_open = commands._ps(config.rowpress_open_ns)
    rp = None
    if want_rp:
        rp = np.stack([
            single_sided_acc(profile, s, config.rowpress_count, config.rowpress_temperature, rp_open) for s in (UPPER, LOWER)
        ])
    curves = {}
    rpc = {}
    for ld in DIRECTIONS:
        d = logical_to_direction(profile, phys, 1 if ld == "1to0" else 0)
        blocks = [b for b in (ds, rp) if b is not None]
        got = _counts(profile, phys, d, blocks)
        if ds is not None:
            curves[ld] = got[0]
        if rp is not None:
            rpc[ld] = got[-1]
    if want_ds:
        _fill_double_sided(res, grid, curves, experiments)
    if want_rp:
        for s, name in ((UPPER, "upper"), (LOWER, "lower")):
            for ld in DIRECTIONS:
                setattr(res, f"rp_{name}_{ld}", int(rpc[ld][s]))
    return res


def _fill_double_sided(res: RowResult, grid, curves, experiments):
    hcf = {}
    for ld in DIRECTIONS:
        hit = np.flatnonzero(curves[ld] > 0)
        hcf[ld] = int(grid[hit[0]]) if hit.size else NOT_FOUND
    if "hcfirst" in experiments:
        res.hc_first_0to1, res.hc_first_1to0 = hcf["0to1"], hcf["1to0"]
    if "maxflips" in experiments:
        res.maxflips_0to1, res.maxflips_1to0 = int(curves["0to1"][-1]), int(curves["1to0"][-1])
    if "hcexceeds" in experiments:
        res.hc_first_0to1 = hcf["0to1"]
        res.hc_exceeds = NOT_FOUND
        if hcf["0to1"] != NOT_FOUND:
            start = int(np.searchsorted(grid, hcf["0to1"]))
            hit = np.flatnonzero(curves["1to0"][start:] > curves["0to1"][start:])
            if hit.size:
                res.hc_exceeds = int(grid[start + hit[0]])


# -- simulated trials -----------------------------------------------------------

def _trial_double_sided(profile, victim, ld, count, config) -> int:
    lo_l, up_l = aggressors_of(profile, victim)
    pattern = config.victim_pattern if config.victim_pattern is not None else PATTERN_FOR[ld]
    arr = CellArray(profile)
    _init(arr, profile, victim, pattern, (lo_l, up_l))
    if count == 0:
        return 0
    prog = commands.build_hammer_program(sorted((lo_l, up_l)), count, config.hammer_open_ns)
    commands.execute(arr, prog, config.temperature, check_window=False)
    return _count_logical(arr, profile, victim, pattern)


def _init(arr, profile, victim, pattern, aggressors):
    init_row(arr, profile.physical(victim), pattern)
    for a in aggressors:  # aggressors hold the opposite data of the victim
        init_row(arr, profile.physical(a), 0xFF ^ pattern)


def _count_logical(arr, profile, victim, pattern) -> int:
    bit = 1 if pattern == 0xFF else 0
    return int(np.count_nonzero(arr.logical_bits(profile.physical(victim)) != bit))


def simulate_row(profile: ChipProfile, victim: int, config: ExperimentConfig, experiments) -> RowResult:
    res = RowResult(row=victim)
    grid = config.grid()
    want = set(experiments)
    if want & {"hcfirst", "hcexceeds"}:
        hcf = {}
        for ld in DIRECTIONS if "hcfirst" in want else ("0to1",):
            hcf[ld] = run_hc_first(profile, victim, ld, config)
        res.hc_first_0to1 = hcf["0to1"]
        if "hcfirst" in want:
            res.hc_first_1to0 = hcf["1to0"]
        if "hcexceeds" in want:
            res.hc_exceeds = _exceeds_from(profile, victim, config, hcf["0to1"], grid)
    if "maxflips" in want:
        res.maxflips_0to1 = run_max_bitflips(profile, victim, "0to1", config)
        res.maxflips_1to0 = run_max_bitflips(profile, victim, "1to0", config)
    if "rowpress" in want:
        for side in ("upper", "lower"):
            for ld in DIRECTIONS:
                setattr(res, f"rp_{side}_{ld}", run_rowpress(profile, victim, side, ld, config))
    return res


# -- public per-row operations -------------------------------------------------

def run_hc_first(profile: ChipProfile, victim: int, direction: str, config: ExperimentConfig = ExperimentConfig()):
    """Smallest swept per-aggressor count that flips at least one victim cell."""
    _check_dir(direction)
    if config.method == "analytic":
        r = analytic_row(profile, victim, config, ("hcfirst",))
        return getattr(r, f"hc_first_{direction}")
    for n in config.grid():
        if _trial_double_sided(profile, victim, direction, int(n), config) > 0:
            return int(n)
    return NOT_FOUND


def run_max_bitflips(profile: ChipProfile, victim: int, direction: str, config: ExperimentConfig = ExperimentConfig()) -> int:
    _check_dir(direction)
    if config.method == "analytic":
        r = analytic_row(profile, victim, config, ("maxflips",))
        return getattr(r, f"maxflips_{direction}")
    return _trial_double_sided(profile, victim, direction, config.hc_hi, config)


def run_hc_exceeds(profile: ChipProfile, victim: int, config: ExperimentConfig = ExperimentConfig()):
    if config.method == "analytic":
        return analytic_row(profile, victim, config, ("hcexceeds",)).hc_exceeds
    start = run_hc_first(profile, victim, "0to1", config)
    return _exceeds_from(profile, victim, config, start, config.grid())


def _exceeds_from(profile, victim, config, start, grid):
    if start == NOT_FOUND:
        return NOT_FOUND
    for n in grid[grid >= start]:
        n = int(n)
        if _trial_double_sided(profile, victim, "1to0", n, config) > _trial_double_sided(profile, victim, "0to1", n, config):
            return n
    return NOT_FOUND


def run_rowpress(profile: ChipProfile, victim: int, side: str, direction: str, config: ExperimentConfig = ExperimentConfig()) -> int:
    """Single-sided long-open hammering from the ``side`` neighbour."""
    _check_dir(direction)
    if side not in ("upper", "lower"):
        raise ValueError("side must be 'upper' or 'lower'")
    if config.method == "analytic":
        return getattr(analytic_row(profile, victim, config, ("rowpress",)), f"rp_{side}_{direction}")
    lo_l, up_l = aggressors_of(profile, victim)
    agg = up_l if side == "upper" else lo_l
    pattern = config.victim_pattern if config.victim_pattern is not None else PATTERN_FOR[direction]
    arr = CellArray(profile)
    _init(arr, profile, victim, pattern, (agg,))
    prog = commands.build_hammer_program([agg], config.rowpress_count, config.rowpress_open_ns)
    commands.execute(arr, prog, config.rowpress_temperature)
    return _count_logical(arr, profile, victim, pattern)


def run_retention(profile: ChipProfile, row: int, pattern: int, config: ExperimentConfig = ExperimentConfig()) -> int:
    """Cells of logical ``row`` that fail after the retention wait."""
    arr = CellArray(profile)
    init_row(arr, profile.physical(row), pattern)
    disturb.retention_tick(arr, config.retention_wait_ns, config.retention_temperature, rows=[profile.physical(row)])
    return _count_logical(arr, profile, row, pattern)


def _check_dir(direction):
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")


# -- experiment runner -----------------------------------------------------------

def run_experiment(profile: ChipProfile, experiments, config: ExperimentConfig = ExperimentConfig(), threads: int = 1) -> ExperimentResult:
    """Measure the configured row set; output order is row order for any ``threads``."""
    experiments = tuple(e for e in EXPERIMENTS if e in set(experiments))
    if not experiments:
        raise ValueError("no experiments requested")
    plan = select_rows(profile, config.rows_to_test, config.first_row)
    fn = analytic_row if config.method == "analytic" else simulate_row

    def work(chunk):
        out = []
        for row, reason in chunk:
            if reason is not None:
                out.append(RowResult(row=row, skipped=True, reason=reason))
            else:
                out.append(fn(profile, row, config, experiments))
        return out

    rows: list[RowResult] = []
    if threads <= 1 or len(plan) < 2:
        rows = work(plan)
    else:
        size = max(1, math.ceil(len(plan) / (threads * 4)))
        chunks = [plan[i:i + size] for i in range(0, len(plan), size)]
        with ThreadPoolExecutor(max_workers=threads) as ex:
            for part in ex.map(work, chunks):
                rows.extend(part)
    return ExperimentResult(
        profile=profile.name,
        profile_sha256=profile.sha256(),
        seed=profile.master_seed,
        experiments=experiments,
        rows=rows,
        mode=profile.mechanism.mode.value,
        config=config.overrides(),
    )


# -- reverse engineering -----------------------------------------------------------

@dataclass
class RowMapping:
    neighbors: dict  # logical row -> tuple of logical rows that flipped
    status: dict  # logical row -> "ok" | "undetectable"

    def undetectable(self):
        return sorted(r for r, s in self.status.items() if s == "undetectable")


def _hammer_single_flips(profile, arr_fill, agg_phys, count, temperature, open_ps, method) -> set[int]:
    """Physical rows with flips after single-sided hammering of ``agg_phys``."""
    if method == "simulate":
        arr = CellArray(profile, arr_fill)
        prog = commands.build_hammer_program([profile.logical(agg_phys)], count, open_ps / 1000)
        commands.execute(arr, prog, temperature, check_window=False)
        return {r for r in arr.materialized() if r != agg_phys and arr.flipped(r).any()}
    hit = set()
    lower, upper = physical_neighbors(profile, agg_phys)
    # the aggressor is the upper neighbour of the row below it and vice versa
    for victim, side in ((lower, UPPER), (upper, LOWER)):
        if victim is None:
            continue
        acc = single_sided_acc(profile, side, count, temperature, open_ps)
        fill_bit = 1 if arr_fill == 0xFF else 0
        d = logical_to_direction(profile, victim, fill_bit)
        (n,) = _counts(profile, victim, d, [acc[None]])
        if n[0] > 0:
            hit.add(victim)
    return hit


def reveng_row_mapping(profile: ChipProfile, config: ExperimentConfig = ExperimentConfig(), rows=None) -> RowMapping:
    """Hammer each logical row single-sided and record which rows flip."""
    if rows is None:
        rows = range(config.first_row, min(profile.rows_per_bank, config.first_row + config.rows_to_test))
    open_ps = commands._ps(config.hammer_open_ns)
    nb, status = {}, {}
    for r in rows:
        agg = profile.physical(r)
        hit: set[int] = set()
        for fill in (0x00, 0xFF):
            hit |= _hammer_single_flips(profile, fill, agg, config.reveng_count, config.temperature, open_ps, config.method)
        nb[r] = tuple(sorted(profile.logical(x) for x in hit))
        status[r] = "ok" if hit else "undetectable"
    return RowMapping(nb, status)


INCONCLUSIVE = "Inconclusive"


def reveng_true_anti(profile: ChipProfile, config: ExperimentConfig = ExperimentConfig(), subarrays=None) -> dict:
    """Per-subarray encoding from retention failures under 0xFF and 0x00.

    A row failing only under 0xFF holds its ones as charge (true cells),
    only under 0x00 its zeros (anti cells). A subarray with any row failing
    under neither or both patterns, or rows that disagree, is Inconclusive.
    Remapped rows are ignored.
    """
    S = profile.subarray_size
    if subarrays is None:
        last = min(profile.rows_per_bank, config.first_row + max(config.rows_to_test, 1)) - 1
        subarrays = range(config.first_row // S, last // S + 1)
    out = {}
    for sa in subarrays:
        rows = [r for r in range(sa * S, (sa + 1) * S) if r not in profile.remapped_rows]
        failed = {}
        for pattern in (0xFF, 0x00):
            arr = CellArray(profile, pattern)
            for r in rows:
                init_row(arr, r, pattern)
            disturb.retention_tick(arr, config.retention_wait_ns, config.retention_temperature, rows=rows)
            failed[pattern] = {r for r in rows if arr.flipped(r).any()}
        verdicts = set()
        for r in rows:
            ff, f0 = r in failed[0xFF], r in failed[0x00]
            if ff == f0:
                verdicts.add(INCONCLUSIVE)
            else:
                verdicts.add(CellEncoding.TRUE_CELL.value if ff else CellEncoding.ANTI_CELL.value)
        out[sa] = verdicts.pop() if len(verdicts) == 1 else INCONCLUSIVE
    return out


def ground_truth_encodings(profile: ChipProfile, subarrays) -> dict:
    return {sa: encoding_of(profile, sa * profile.subarray_size).value for sa in subarrays}


def ground_truth_neighbors(profile: ChipProfile, row: int) -> tuple:
    lower, upper = physical_neighbors(profile, profile.physical(row))
    return tuple(sorted(profile.logical(x) for x in (lower, upper) if x is not None))


def with_method(config: ExperimentConfig, method: str) -> ExperimentConfig:
    return replace(config, method=method)
