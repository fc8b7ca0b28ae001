"""Timed DRAM command programs and their execution against a CellArray.

Programs are held as parallel numpy arrays (times in integer picoseconds)
so million-command hammer programs validate and execute in vectorized form.
Execution is exact with respect to the per-event model in ``disturb``:
a victim's flips depend only on its accumulators at each restore, and the
accumulators only on the ordered list of neighbour activations between
restores.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from readdisturb import disturb
from readdisturb.disturb import Flip, segment_increment
from readdisturb.mechanisms import Mode
from readdisturb.model import CellArray

# timing constants, ps
T_RC = 46_160
T_RAS = 32_000
T_RP = 14_160
T_OPEN_MAX = 7_800_000
T_REFW = 64_000_000_000

_UPPER, _LOWER, _SIDE_NAME = disturb.UPPER, disturb.LOWER, disturb.SIDE_NAME


class CommandError(Exception):
    """Base class of program rejections."""


class IllegalCommand(CommandError):
    pass


class TimingViolation(CommandError):
    pass


class RefreshWindowExceeded(TimingViolation):
    pass


class WindowWarning(UserWarning):
    pass


class Opcode(IntEnum):
    ACT = 0
    PRE = 1
    RD = 2
    WR = 3
    REF = 4


@dataclass(frozen=True)
class TimedCommand:
    opcode: Opcode
    issue_time: float  # ns
    row: int | None = None  # ACT (required), REF (optional: all rows if None)
    column: int | None = None  # RD / WR
    data: int | None = None  # WR: bit value written

    def __str__(self):
        arg = ""
        if self.opcode in (Opcode.ACT, Opcode.REF) and self.row is not None:
            arg = f" {self.row}"
        elif self.opcode in (Opcode.RD, Opcode.WR):
            arg = f" {self.column}"
            if self.opcode is Opcode.WR:
                arg += f" {self.data}"
        return f"{_fmt_ns(_ps(self.issue_time))} {self.opcode.name}{arg}"


def _ps(ns) -> int:
    return int(round(float(ns) * 1000))


def _fmt_ns(ps: int) -> str:
    s = f"{ps / 1000:.3f}".rstrip("0").rstrip(".")
    return s


class Program:
    """Immutable command sequence in columnar form."""

    def __init__(self, opcodes, times_ps, args=None, data=None):
        self.opcodes = np.asarray(opcodes, dtype=np.int8)
        self.times_ps = np.asarray(times_ps, dtype=np.int64)
        n = len(self.opcodes)
        self.args = np.full(n, -1, dtype=np.int64) if args is None else np.asarray(args, dtype=np.int64)
        self.data = np.full(n, -1, dtype=np.int8) if data is None else np.asarray(data, dtype=np.int8)
        if not (len(self.times_ps) == len(self.args) == len(self.data) == n):
            raise ValueError("program columns differ in length")
        for a in (self.opcodes, self.times_ps, self.args, self.data):
            a.flags.writeable = False

    @classmethod
    def from_commands(cls, commands) -> "Program":
        commands = list(commands)
        ops, ts, args, data = [], [], [], []
        for c in commands:
            op = Opcode(c.opcode)
            ops.append(int(op))
            ts.append(_ps(c.issue_time))
            if op in (Opcode.ACT, Opcode.REF):
                args.append(-1 if c.row is None else int(c.row))
            elif op in (Opcode.RD, Opcode.WR):
                args.append(-1 if c.column is None else int(c.column))
            else:
                args.append(-1)
            data.append(-1 if c.data is None else int(c.data))
        return cls(ops, ts, args, data)

    def __len__(self):
        return len(self.opcodes)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i) -> TimedCommand:
        op = Opcode(int(self.opcodes[i]))
        a = int(self.args[i])
        t = int(self.times_ps[i]) / 1000.0
        if op is Opcode.ACT or op is Opcode.REF:
            return TimedCommand(op, t, row=None if a < 0 else a)
        if op is Opcode.WR:
            return TimedCommand(op, t, column=a, data=int(self.data[i]))
        if op is Opcode.RD:
            return TimedCommand(op, t, column=a)
        return TimedCommand(op, t)

    def span_ps(self) -> int:
        if len(self) == 0:
            return 0
        return int(self.times_ps[-1]) + (T_RP if self.opcodes[-1] == Opcode.PRE else 0)

    def span_ns(self) -> float:
        return self.span_ps() / 1000.0

    def dump(self, fh=None) -> str | None:
        """One command per line: ``<issue_time_ns> <OPCODE> [row|col]``."""
        lines = "".join(f"{c}\n" for c in self)
        if fh is None:
            return lines
        fh.write(lines)
        return None

    @classmethod
    def parse(cls, text: str) -> "Program":
        cmds = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            t, op = float(parts[0]), Opcode[parts[1].upper()]
            rest = [int(x) for x in parts[2:]]
            if op in (Opcode.ACT, Opcode.REF):
                cmds.append(TimedCommand(op, t, row=rest[0] if rest else None))
            elif op is Opcode.RD:
                cmds.append(TimedCommand(op, t, column=rest[0]))
            elif op is Opcode.WR:
                cmds.append(TimedCommand(op, t, column=rest[0], data=rest[1] if len(rest) > 1 else 1))
            else:
                cmds.append(TimedCommand(op, t))
        return cls.from_commands(cmds)


def build_hammer_program(aggressors, count: int, open_time: float = T_RAS / 1000, start: float = 0.0) -> Program:
    """ACT/PRE pairs alternating over ``aggressors`` at minimum legal spacing.

    ``open_time`` (ns) is the ACT-to-PRE interval of every activation.
    """
    aggressors = [int(a) for a in aggressors]
    if len(aggressors) not in (1, 2):
        raise ValueError("one or two aggressor rows")
    if count < 0:
        raise ValueError("count must be >= 0")
    open_ps = _ps(open_time)
    if not T_RAS <= open_ps <= T_OPEN_MAX:
        raise ValueError(f"open_time {open_time} ns outside [{T_RAS / 1000}, {T_OPEN_MAX / 1000}] ns")
    n = count * len(aggressors)
    period = max(open_ps + T_RP, T_RC)
    act_t = _ps(start) + np.arange(n, dtype=np.int64) * period
    times = np.empty(2 * n, dtype=np.int64)
    times[0::2] = act_t
    times[1::2] = act_t + open_ps
    ops = np.empty(2 * n, dtype=np.int8)
    ops[0::2] = Opcode.ACT
    ops[1::2] = Opcode.PRE
    args = np.full(2 * n, -1, dtype=np.int64)
    args[0::2] = np.tile(np.asarray(aggressors, dtype=np.int64), count)
    return Program(ops, times, args)


@dataclass
class ProgramTrace:
    activations: dict = field(default_factory=dict)  # logical row -> ACT count
    open_ns: dict = field(default_factory=dict)  # logical row -> cumulative open time
    span_ns: float = 0.0
    open_total_ns: float = 0.0
    violations: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    flips: list = field(default_factory=list)
    reads: list = field(default_factory=list)  # (time_ns, logical row, column, bit)

    @property
    def closed_total_ns(self) -> float:
        return self.span_ns - self.open_total_ns


# -- validation ---------------------------------------------------------------

def validate(profile, program: Program, bank_open: bool = False, bank_open_since_ps=None, last_act_ps=None, last_pre_ps=None):
    """Check legality and timing; raise on the first problem.

    Returns per-command arrays ``(is_open_before, interval_start_ps)``.
    """
    ops, t, args = program.opcodes, program.times_ps, program.args
    n = len(ops)
    if n == 0:
        return
    if np.any(t < 0):
        raise IllegalCommand("negative issue time")
    dec = np.flatnonzero(np.diff(t) < 0)
    if dec.size:
        raise IllegalCommand(f"issue time decreases at command {dec[0] + 1}")
    bad_op = np.flatnonzero((ops < 0) | (ops > Opcode.REF))
    if bad_op.size:
        raise IllegalCommand(f"unknown opcode at command {bad_op[0]}")

    is_act = ops == Opcode.ACT
    is_pre = ops == Opcode.PRE
    rows = profile.rows_per_bank
    bad = np.flatnonzero(is_act & ((args < 0) | (args >= rows)))
    if bad.size:
        raise IllegalCommand(f"ACT row out of range at command {bad[0]}")
    is_ref = ops == Opcode.REF
    bad = np.flatnonzero(is_ref & (args >= rows))
    if bad.size:
        raise IllegalCommand(f"REF row out of range at command {bad[0]}")
    col = (ops == Opcode.RD) | (ops == Opcode.WR)
    bad = np.flatnonzero(col & ((args < 0) | (args >= profile.columns_per_row)))
    if bad.size:
        raise IllegalCommand(f"column out of range at command {bad[0]}")
    bad = np.flatnonzero((ops == Opcode.WR) & ((program.data < 0) | (program.data > 1)))
    if bad.size:
        raise IllegalCommand(f"WR data must be a bit at command {bad[0]}")

    # bank state before each command: value set by the latest ACT/PRE
    setter = np.where(is_act | is_pre, np.arange(n), -1)
    last = np.maximum.accumulate(setter)
    prev = np.concatenate(([-1], last[:-1]))
    open_before = np.where(prev >= 0, is_act[np.maximum(prev, 0)], bank_open)
    bad = np.flatnonzero(is_act & open_before)
    if bad.size:
        raise IllegalCommand(f"ACT on open bank at command {bad[0]}")
    bad = np.flatnonzero((is_pre | col) & ~open_before)
    if bad.size:
        what = "PRE" if is_pre[bad[0]] else Opcode(int(ops[bad[0]])).name
        raise IllegalCommand(f"{what} on closed bank at command {bad[0]}")
    bad = np.flatnonzero(is_ref & open_before)
    if bad.size:
        raise IllegalCommand(f"REF on open bank at command {bad[0]}")

    # ACT-to-ACT and PRE-to-ACT spacing
    act_t = t[is_act]
    if last_act_ps is not None:
        act_t = np.concatenate(([last_act_ps], act_t))
    gaps = np.diff(act_t)
    bad = np.flatnonzero(gaps < T_RC)
    if bad.size:
        raise TimingViolation(f"ACT-to-ACT interval {gaps[bad[0]] / 1000} ns < tRC {T_RC / 1000} ns")
    act_idx = np.flatnonzero(is_act)
    prev_pre = _prev_index(is_pre, act_idx)
    has = prev_pre >= 0
    pre_t = np.where(has, t[np.maximum(prev_pre, 0)], -1)
    if last_pre_ps is not None:
        pre_t = np.where(has, pre_t, last_pre_ps)
        has = np.ones_like(has)
    d = t[act_idx] - pre_t
    bad = np.flatnonzero(has & (d < T_RP))
    if bad.size:
        raise TimingViolation(f"PRE-to-ACT interval {d[bad[0]] / 1000} ns < tRP {T_RP / 1000} ns")

    # open intervals
    pre_idx = np.flatnonzero(is_pre)
    start_idx = _prev_index(is_act, pre_idx)
    starts = np.where(start_idx >= 0, t[np.maximum(start_idx, 0)], -1 if bank_open_since_ps is None else bank_open_since_ps)
    open_ps = t[pre_idx] - starts
    bad = np.flatnonzero(open_ps > T_OPEN_MAX)
    if bad.size:
        raise TimingViolation(f"open interval {open_ps[bad[0]] / 1000} ns exceeds {T_OPEN_MAX / 1000} ns")
    bad = np.flatnonzero(open_ps < T_RAS)
    if bad.size:
        raise TimingViolation(f"open interval {open_ps[bad[0]] / 1000} ns shorter than tRAS {T_RAS / 1000} ns")


def _prev_index(mask: np.ndarray, at: np.ndarray) -> np.ndarray:
    """For each index in ``at``, the latest index < it where ``mask`` holds (or -1)."""
    # running max of marked positions; entry j holds the latest marked index <= j
    latest = np.maximum.accumulate(np.where(mask, np.arange(len(mask)), -1)) if len(mask) else np.empty(0, np.int64)
    at = np.asarray(at, dtype=np.int64)
    return np.where(at > 0, latest[np.maximum(at - 1, 0)], -1)


# -- execution ----------------------------------------------------------------

def execute(array: CellArray, program, temperature: float = 50.0, strict_timing: bool = False, check_window: bool = True) -> ProgramTrace:
    """Run ``program`` against ``array``; rows in commands are logical addresses."""
    if not isinstance(program, Program):
        program = Program.from_commands(program)
    profile = array.profile
    bank = array.bank
    base = array.now_ps
    since = None if bank.row_open_since_ps is None else bank.row_open_since_ps - base
    validate(
        profile, program,
        bank_open=bank.open_row is not None,
        bank_open_since_ps=since,
        last_act_ps=None if bank.last_act_ps is None else bank.last_act_ps - base,
        last_pre_ps=None if bank.last_pre_ps is None else bank.last_pre_ps - base,
    )
    trace = ProgramTrace()
    n = len(program)
    if n == 0:
        return trace
    ops, t, args = program.opcodes, program.times_ps, program.args
    span = program.span_ps()
    trace.span_ns = span / 1000.0

    has_ref = bool(np.any(ops == Opcode.REF))
    if check_window and span > T_REFW and not has_ref:
        msg = f"program span {span / 1e9:.3f} ms exceeds the 64 ms refresh window with refresh disabled"
        if strict_timing:
            raise RefreshWindowExceeded(msg)
        trace.warnings.append(msg)
        warnings.warn(msg, WindowWarning, stacklevel=2)

    is_act = ops == Opcode.ACT
    is_pre = ops == Opcode.PRE
    l2p = None if profile.logical_to_physical is None else np.asarray(profile.logical_to_physical, dtype=np.int64)

    # physical row open at every command (the row an RD/WR/PRE refers to)
    act_idx = np.flatnonzero(is_act)
    act_phys = args[act_idx] if l2p is None else l2p[args[act_idx]]
    open_row_at = np.full(n, -1, dtype=np.int64)
    src = _prev_index(is_act, np.arange(n) + 1)  # latest ACT at or before i
    has = src >= 0
    pos = np.searchsorted(act_idx, src[has])
    open_row_at[has] = act_phys[pos]
    if bank.open_row is not None:
        open_row_at[~has] = bank.open_row
    # ACT followed by its PRE: PRE gets the row of the preceding ACT
    pre_idx = np.flatnonzero(is_pre)
    pre_phys = open_row_at[pre_idx]
    pre_start = _prev_index(is_act, pre_idx)
    pre_start_t = np.where(pre_start >= 0, t[np.maximum(pre_start, 0)], since if since is not None else 0)
    pre_open_ps = t[pre_idx] - pre_start_t

    # trace bookkeeping
    rows_l, cnt = np.unique(args[act_idx], return_counts=True)
    trace.activations = {int(r): int(c) for r, c in zip(rows_l, cnt)}
    open_by: dict[int, int] = {}
    if pre_idx.size:
        ur, inv = np.unique(pre_phys, return_inverse=True)
        isums = np.zeros(len(ur), dtype=np.int64)
        np.add.at(isums, inv, pre_open_ps)
        open_by = {int(r): int(x) for r, x in zip(ur, isums)}
    trace.open_ns = {profile.logical(r): x / 1000.0 for r, x in sorted(open_by.items())}
    trace.open_total_ns = float(sum(open_by.values())) / 1000.0
    # a trailing unclosed interval is open until the end of the span
    last_setter = np.flatnonzero(is_act | is_pre)
    if last_setter.size and is_act[last_setter[-1]]:
        trace.open_total_ns += (span - int(t[last_setter[-1]])) / 1000.0

    # neighbour events per victim: activations (at ACT) and open time (at PRE)
    ev = _neighbour_events(profile, act_idx, act_phys, pre_idx, pre_phys, pre_open_ps)
    markers = _row_markers(profile, program, open_row_at, act_idx, act_phys)
    refresh_all = markers.pop(-1, None)
    rows = set(ev.keys()) | set(markers.keys())
    if refresh_all is not None:
        rows |= set(array.materialized())
        for r in rows:
            markers[r] = _merge_markers(markers.get(r), refresh_all)
    mech = profile.mechanism
    for v in sorted(rows):
        st = array.row(v)
        trace.flips.extend(_run_row(array, v, st, ev.get(v), markers.get(v, _NO_MARKERS), mech, temperature, base, trace))

    # bank state and clock
    last_act = int(t[act_idx[-1]]) + base if act_idx.size else bank.last_act_ps
    last_pre = int(t[pre_idx[-1]]) + base if pre_idx.size else bank.last_pre_ps
    bank.last_act_ps, bank.last_pre_ps = last_act, last_pre
    if last_setter.size:
        if is_act[last_setter[-1]]:
            bank.open_row = int(act_phys[-1])
            bank.row_open_since_ps = last_act
        else:
            bank.open_row = None
            bank.row_open_since_ps = None
    array.now_ps = base + span
    return trace


def _neighbour_events(profile, act_idx, act_phys, pre_idx, pre_phys, pre_open_ps):
    """victim -> (cmd index, is_activation, side, open_ps), sorted by cmd index."""
    R, S = profile.rows_per_bank, profile.subarray_size
    remapped = np.fromiter(profile.remapped_rows, dtype=np.int64) if profile.remapped_rows else np.empty(0, np.int64)

    def split(idx, phys, is_act, amount):
        out = []
        ok_agg = ~np.isin(phys, remapped)
        for delta, side in ((-1, _UPPER), (1, _LOWER)):
            vic = phys + delta
            ok = ok_agg & (vic >= 0) & (vic < R)
            ok &= (vic // S) == (phys // S)
            ok &= ~np.isin(vic, remapped)
            out.append((vic[ok], idx[ok], np.full(int(ok.sum()), is_act), np.full(int(ok.sum()), side, dtype=np.int8), amount[ok]))
        return out

    parts = split(act_idx, act_phys, True, np.zeros(len(act_idx), dtype=np.int64))
    parts += split(pre_idx, pre_phys, False, pre_open_ps)
    vic = np.concatenate([p[0] for p in parts])
    if vic.size == 0:
        return {}
    cmd = np.concatenate([p[1] for p in parts])
    isact = np.concatenate([p[2] for p in parts])
    side = np.concatenate([p[3] for p in parts])
    amt = np.concatenate([p[4] for p in parts])
    order = np.lexsort((cmd, vic))
    vic, cmd, isact, side, amt = vic[order], cmd[order], isact[order], side[order], amt[order]
    bounds = np.flatnonzero(np.diff(vic)) + 1
    out = {}
    for lo, hi in zip(np.concatenate(([0], bounds)), np.concatenate((bounds, [len(vic)]))):
        out[int(vic[lo])] = (cmd[lo:hi], isact[lo:hi], side[lo:hi], amt[lo:hi])
    return out


_NO_MARKERS = tuple(np.empty(0, np.int64) for _ in range(5))


def _row_markers(profile, program, open_row_at, act_idx, act_phys):
    """physical row -> marker arrays (cmd index, opcode, arg, data, time_ps) ordered by
    cmd index; key -1 holds REF commands that refresh every row."""
    ops, args, t = program.opcodes, program.args, program.times_ps
    other = np.flatnonzero((ops == Opcode.RD) | (ops == Opcode.WR) | (ops == Opcode.REF))
    o_row = open_row_at[other].copy()
    is_ref = ops[other] == Opcode.REF
    for k in np.flatnonzero(is_ref).tolist():
        a = int(args[other[k]])
        o_row[k] = -1 if a < 0 else profile.physical(a)
    idx = np.concatenate((act_idx, other)).astype(np.int64)
    row = np.concatenate((act_phys, o_row)).astype(np.int64)
    arg = np.concatenate((np.full(len(act_idx), -1, np.int64), args[other].astype(np.int64)))
    data = np.concatenate((np.full(len(act_idx), -1, np.int64), np.asarray(program.data)[other].astype(np.int64)))
    op = ops[idx].astype(np.int64)
    order = np.lexsort((idx, row))
    idx, row, op, arg, data = idx[order], row[order], op[order], arg[order], data[order]
    tm = t[idx].astype(np.int64)
    bounds = np.flatnonzero(np.diff(row)) + 1
    out = {}
    for lo, hi in zip(np.concatenate(([0], bounds)).tolist(), np.concatenate((bounds, [len(row)])).tolist()):
        if hi > lo:
            out[int(row[lo])] = (idx[lo:hi], op[lo:hi], arg[lo:hi], data[lo:hi], tm[lo:hi])
    return out


def _merge_markers(a, b):
    if a is None:
        return b
    cat = [np.concatenate((x, y)) for x, y in zip(a, b)]
    order = np.argsort(cat[0], kind="stable")
    return tuple(x[order] for x in cat)


def _segment_acc(mech, temperature, st, cmd, isact, side, amt):
    """Accumulator increments (2x2) of one segment, updating st's side bookkeeping."""
    if cmd.size == 0:
        return np.zeros((2, 2))
    a_side = side[isact]
    a_cmd = cmd[isact]
    prev = np.concatenate(([-1 if st.last_side is None else (_UPPER if st.last_side == "upper" else _LOWER)], a_side[:-1]))
    boosted = (prev >= 0) & (prev != a_side)

    # index (cmd) at which the victim first saw both sides
    seen = {_UPPER if s == "upper" else _LOWER for s in st.sides}
    pair_cmd = -1 if len(seen) == 2 else None
    if pair_cmd is None and a_side.size:
        if len(seen) == 1:
            (s0,) = seen
            k = np.flatnonzero(a_side != s0)
        else:
            k = np.flatnonzero(a_side != a_side[0])
        if k.size:
            pair_cmd = int(a_cmd[k[0]])
    device = mech.mode is Mode.DEVICE
    o_side = side[~isact]
    o_cmd = cmd[~isact]
    o_amt = amt[~isact]
    per_side = []
    for s in (_UPPER, _LOWER):
        m = a_side == s
        nb = int(np.count_nonzero(boosted & m))
        npl = int(np.count_nonzero(m)) - nb
        om = o_side == s
        if device and pair_cmd is not None:
            live_a = m & (a_cmd < pair_cmd)
            live_o = om & (o_cmd < pair_cmd)
        else:
            live_a, live_o = m, om
        per_side.append((
            nb, npl, int(np.count_nonzero(live_a)),
            int(o_amt[om].sum()) / 1000.0, int(o_amt[live_o].sum()) / 1000.0,
        ))
    acc = segment_increment(mech, temperature, per_side)

    if a_side.size:
        st.last_side = _SIDE_NAME[int(a_side[-1])]
        st.sides |= {_SIDE_NAME[int(s)] for s in np.unique(a_side)}
        st.paired = len(st.sides) == 2
    return acc


def _run_row(array, v, st, events, markers, mech, temperature, base, trace):
    flips: list[Flip] = []
    if events is None:
        events = (np.empty(0, np.int64), np.empty(0, bool), np.empty(0, np.int8), np.empty(0, np.int64))
    cmd, isact, side, amt = events
    m_idx, m_op, m_arg, m_data, m_t = markers
    cuts = np.searchsorted(cmd, m_idx)
    # back-to-back restores with no disturbance between them: only the last one matters
    restore = (m_op == Opcode.ACT) | (m_op == Opcode.REF)
    ri = np.flatnonzero(restore)
    keep = ~restore
    if ri.size:
        cr = cuts[ri]
        keep[ri] = np.concatenate((cr[1:] != cr[:-1], [True]))
    sel = np.flatnonzero(keep)
    lo = 0
    for op, arg, data, tm, hi in zip(m_op[sel].tolist(), m_arg[sel].tolist(), m_data[sel].tolist(), m_t[sel].tolist(), cuts[sel].tolist()):
        if hi > lo:
            st.acc += _segment_acc(mech, temperature, st, cmd[lo:hi], isact[lo:hi], side[lo:hi], amt[lo:hi])
            flips.extend(disturb.settle(array, v))
        lo = hi
        if op == Opcode.ACT or op == Opcode.REF:
            st.restore(base + tm)
        elif op == Opcode.WR:
            st.bits[arg] = data
            st.seg_bits[arg] = data
        elif op == Opcode.RD:
            trace.reads.append((tm / 1000.0, array.profile.logical(v), arg, int(st.bits[arg])))
    if lo < len(cmd):
        st.acc += _segment_acc(mech, temperature, st, cmd[lo:], isact[lo:], side[lo:], amt[lo:])
        flips.extend(disturb.settle(array, v))
    return flips
