"""Logical and physical organization of one simulated DRAM bank."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np

from readdisturb.mechanisms import Frame, Mechanism, MechanismParams, Mode, ThresholdParams

PATTERNS = (0x00, 0xFF)


class CellEncoding(str, Enum):
    TRUE_CELL = "TrueCell"
    ANTI_CELL = "AntiCell"

    def charged(self, logical_bit):
        """Physical charge state for a logical value (works on arrays)."""
        if self is CellEncoding.TRUE_CELL:
            return logical_bit
        return 1 - logical_bit

    decode = charged  # the mapping is an involution

    @property
    def other(self) -> "CellEncoding":
        return CellEncoding.ANTI_CELL if self is CellEncoding.TRUE_CELL else CellEncoding.TRUE_CELL


class EncodingPolicy(str, Enum):
    ALL_TRUE = "AllTrue"
    ALL_ANTI = "AllAnti"
    INTERLEAVED = "InterleavedBySubarray"
    EXPLICIT = "Explicit"


class Role(str, Enum):
    NWL = "NWL"
    PWL = "PWL"


@dataclass(frozen=True)
class ChipProfile:
    name: str
    manufacturer: str
    die_density_gb: int
    die_revision: str
    rows_per_bank: int
    columns_per_row: int
    subarray_size: int
    mechanism: MechanismParams
    master_seed: int
    encoding_policy: EncodingPolicy = EncodingPolicy.ALL_TRUE
    # InterleavedBySubarray: encoding of even-indexed subarrays.
    # Explicit: one entry per subarray.
    subarray_encodings: tuple[CellEncoding, ...] = (CellEncoding.TRUE_CELL,)
    logical_to_physical: tuple[int, ...] | None = None
    remapped_rows: frozenset[int] = frozenset()
    threshold_overrides: dict = field(default_factory=dict, compare=False, repr=False)
    calibration: dict | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.manufacturer not in ("S", "H", "M"):
            raise ValueError(f"unknown manufacturer {self.manufacturer!r}")
        if self.rows_per_bank <= 0 or self.columns_per_row <= 0:
            raise ValueError("geometry must be positive")
        if self.subarray_size <= 0 or self.rows_per_bank % self.subarray_size:
            raise ValueError("subarray_size must divide rows_per_bank")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        if self.logical_to_physical is not None:
            m = self.logical_to_physical
            if len(m) != self.rows_per_bank or sorted(m) != list(range(self.rows_per_bank)):
                raise ValueError("logical_to_physical must be a bijection over the bank rows")
        if any(not 0 <= r < self.rows_per_bank for r in self.remapped_rows):
            raise ValueError("remapped row out of range")
        if self.encoding_policy is EncodingPolicy.EXPLICIT and len(self.subarray_encodings) != self.n_subarrays:
            raise ValueError("Explicit policy needs one encoding per subarray")
        for row, (fall, rise) in self.threshold_overrides.items():
            if len(fall) != self.columns_per_row or len(rise) != self.columns_per_row:
                raise ValueError(f"threshold override for row {row} has wrong width")
        # inverse map cache; bypass frozen
        if self.logical_to_physical is not None:
            inv = [0] * self.rows_per_bank
            for lg, ph in enumerate(self.logical_to_physical):
                inv[ph] = lg
            object.__setattr__(self, "_inverse", tuple(inv))

    @property
    def n_subarrays(self) -> int:
        return self.rows_per_bank // self.subarray_size

    def physical(self, logical: int) -> int:
        self._check(logical)
        return logical if self.logical_to_physical is None else self.logical_to_physical[logical]

    def logical(self, physical: int) -> int:
        self._check(physical)
        return physical if self.logical_to_physical is None else self._inverse[physical]

    def _check(self, row: int):
        if not 0 <= row < self.rows_per_bank:
            raise IndexError(f"row {row} out of range [0, {self.rows_per_bank})")

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "manufacturer_id": self.manufacturer,
            "die_density_gb": self.die_density_gb,
            "die_revision": self.die_revision,
            "rows_per_bank": self.rows_per_bank,
            "columns_per_row": self.columns_per_row,
            "subarray_size": self.subarray_size,
            "cell_encoding_policy": self.encoding_policy.value,
            "subarray_encodings": [e.value for e in self.subarray_encodings],
            "logical_to_physical_map": None if self.logical_to_physical is None else list(self.logical_to_physical),
            "remapped_rows": sorted(self.remapped_rows),
            "master_seed": self.master_seed,
            "mechanism_params": self.mechanism.to_dict(),
        }
        if self.threshold_overrides:
            d["threshold_overrides"] = {
                str(r): [[None if math.isinf(x) else x for x in arr] for arr in pair]
                for r, pair in sorted(self.threshold_overrides.items())
            }
        if self.calibration is not None:
            d["calibration"] = self.calibration
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ChipProfile":
        overrides = {}
        for r, pair in d.get("threshold_overrides", {}).items():
            overrides[int(r)] = tuple(
                np.array([math.inf if x is None else float(x) for x in arr]) for arr in pair
            )
        m = d.get("logical_to_physical_map")
        return cls(
            name=d["name"],
            manufacturer=d["manufacturer_id"],
            die_density_gb=int(d["die_density_gb"]),
            die_revision=str(d["die_revision"]),
            rows_per_bank=int(d["rows_per_bank"]),
            columns_per_row=int(d["columns_per_row"]),
            subarray_size=int(d["subarray_size"]),
            encoding_policy=EncodingPolicy(d.get("cell_encoding_policy", "AllTrue")),
            subarray_encodings=tuple(CellEncoding(e) for e in d.get("subarray_encodings", ["TrueCell"])),
            logical_to_physical=None if m is None else tuple(int(x) for x in m),
            remapped_rows=frozenset(int(x) for x in d.get("remapped_rows", ())),
            mechanism=MechanismParams.from_dict(d["mechanism_params"]),
            master_seed=int(d["master_seed"]),
            threshold_overrides=overrides,
            calibration=d.get("calibration"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def sha256(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    # -- variants ------------------------------------------------------
    def with_seed(self, seed: int) -> "ChipProfile":
        return replace(self, master_seed=seed)

    def with_mechanism(self, mechanism: MechanismParams) -> "ChipProfile":
        return replace(self, mechanism=mechanism)

    def device_mode(self) -> "ChipProfile":
        return replace(self, name=self.name, mechanism=self.mechanism.device_variant())


def shipped_profile_names() -> list[str]:
    pkg = resources.files("readdisturb") / "profiles"
    return sorted(p.name[:-5] for p in pkg.iterdir() if p.name.endswith(".json"))


def load_profile(path_or_name) -> ChipProfile:
    """Load a profile from a JSON path or by shipped name (e.g. ``S-8Gb-B``)."""
    p = Path(path_or_name)
    if p.is_file():
        return ChipProfile.from_dict(json.loads(p.read_text()))
    stem = p.name[:-5] if p.name.endswith(".json") else p.name
    res = resources.files("readdisturb") / "profiles" / f"{stem}.json"
    if not res.is_file():
        raise FileNotFoundError(f"no profile file or shipped profile named {path_or_name!r}")
    return ChipProfile.from_dict(json.loads(res.read_text()))


# -- adjacency and encoding ------------------------------------------------

@dataclass(frozen=True)
class Adjacency:
    """Physical neighbours of a victim row; ``None`` marks a boundary.

    Roles use a checkerboard over columns: the upper wordline is the NWL of
    even-column cells and the PWL of odd-column cells, the lower wordline
    the reverse.
    """

    victim: int
    lower: int | None
    upper: int | None

    upper_role_for_even_cells = Role.NWL
    lower_role_for_even_cells = Role.PWL

    def role(self, side: str, column: int) -> Role:
        even = column % 2 == 0
        if side == "upper":
            return Role.NWL if even else Role.PWL
        if side == "lower":
            return Role.PWL if even else Role.NWL
        raise ValueError(side)

    @property
    def complete(self) -> bool:
        return self.lower is not None and self.upper is not None


def physical_neighbors(profile: ChipProfile, phys: int) -> tuple[int | None, int | None]:
    profile._check(phys)
    if phys in profile.remapped_rows:
        return None, None
    sa = phys // profile.subarray_size
    lower = phys - 1 if phys - 1 >= 0 and (phys - 1) // profile.subarray_size == sa else None
    upper = phys + 1 if phys + 1 < profile.rows_per_bank and (phys + 1) // profile.subarray_size == sa else None
    if lower in profile.remapped_rows:
        lower = None
    if upper in profile.remapped_rows:
        upper = None
    return lower, upper


def neighbors(profile: ChipProfile, victim: int) -> Adjacency:
    """Adjacency of a victim given by its logical address."""
    phys = profile.physical(victim)
    lower, upper = physical_neighbors(profile, phys)
    return Adjacency(phys, lower, upper)


def encoding_of(profile: ChipProfile, row: int) -> CellEncoding:
    """Cell encoding of a physical row."""
    profile._check(row)
    pol = profile.encoding_policy
    if pol is EncodingPolicy.ALL_TRUE:
        return CellEncoding.TRUE_CELL
    if pol is EncodingPolicy.ALL_ANTI:
        return CellEncoding.ANTI_CELL
    sa = row // profile.subarray_size
    if pol is EncodingPolicy.INTERLEAVED:
        first = profile.subarray_encodings[0]
        return first if sa % 2 == 0 else first.other
    return profile.subarray_encodings[sa]


def disturb_polarity(profile: ChipProfile, row: int) -> CellEncoding:
    """Encoding that read disturbance sees for a physical row."""
    if profile.mechanism.frame is Frame.LOGICAL:
        return CellEncoding.TRUE_CELL
    return encoding_of(profile, row)


# -- cell state -------------------------------------------------------------

class RowState:
    """Mutable state of one materialized row.

    Accumulators are kept per (column-parity class, direction): every cell of
    a class sees the same disturbance, so per-cell arrays are views of these.
    ``seg_bits`` is the data at the last restore; a cell is flipped iff it
    differs from it.
    """

    __slots__ = ("bits", "seg_bits", "acc", "last_side", "sides", "paired", "restored_ps", "minu")

    def __init__(self, bits: np.ndarray, now_ps: int):
        self.bits = bits
        self.seg_bits = bits.copy()
        self.acc = np.zeros((2, 2))
        self.last_side: str | None = None
        self.sides: set[str] = set()
        self.paired = False
        self.restored_ps = now_ps
        self.minu: dict[int, tuple[float, float]] = {}

    def restore(self, now_ps: int):
        self.seg_bits = self.bits.copy()
        self.acc[:] = 0.0
        self.last_side = None
        self.sides = set()
        self.paired = False
        self.restored_ps = now_ps


@dataclass
class BankState:
    open_row: int | None = None  # physical
    row_open_since_ps: int | None = None
    last_act_ps: int | None = None
    last_pre_ps: int | None = None


class CellArray:
    """Cell contents plus disturbance state of one bank, materialized lazily.

    Rows never touched read back as ``fill`` (all-zeros if not given).
    """

    def __init__(self, profile: ChipProfile, fill: int = 0x00):
        if fill not in PATTERNS:
            raise ValueError(f"unsupported pattern {fill:#x}")
        self.profile = profile
        self.fill = fill
        self.now_ps = 0
        self.bank = BankState()
        self._rows: dict[int, RowState] = {}

    def row(self, phys: int) -> RowState:
        st = self._rows.get(phys)
        if st is None:
            self.profile._check(phys)
            bit = 1 if self.fill == 0xFF else 0
            st = RowState(np.full(self.profile.columns_per_row, bit, dtype=np.uint8), self.now_ps)
            self._rows[phys] = st
        return st

    def materialized(self) -> list[int]:
        return sorted(self._rows)

    def logical_bits(self, phys: int) -> np.ndarray:
        return self.row(phys).bits

    def flipped(self, phys: int) -> np.ndarray:
        """Mask of cells whose value changed since the row was last restored."""
        st = self._rows.get(phys)
        if st is None:
            return np.zeros(self.profile.columns_per_row, dtype=bool)
        return st.bits != st.seg_bits

    def accumulators(self, phys: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-cell (charged->discharged, discharged->charged) accumulators."""
        st = self.row(phys)
        n = self.profile.columns_per_row
        parity = np.arange(n) % 2
        return st.acc[parity, 0].copy(), st.acc[parity, 1].copy()

    def retention_clock_ns(self, phys: int) -> float:
        return (self.now_ps - self.row(phys).restored_ps) / 1000.0


def init_row(array: CellArray, row: int, pattern: int) -> None:
    """Write ``pattern`` to every cell of physical ``row`` and restore it."""
    if pattern not in PATTERNS:
        raise ValueError(f"unsupported pattern {pattern:#x}; only 0x00 and 0xFF")
    st = array.row(row)
    st.bits[:] = 1 if pattern == 0xFF else 0
    st.restore(array.now_ps)


def synthetic_profile(
    seed: int,
    rows: int = 64,
    subarray_size: int = 16,
    columns: int = 512,
    permute: bool = True,
    random_encodings: bool = True,
    n_remapped: int = 0,
    mechanism: MechanismParams | None = None,
    name: str | None = None,
) -> ChipProfile:
    """Small randomized profile with a known ground truth layout."""
    rng = np.random.default_rng(seed)
    perm = tuple(int(x) for x in rng.permutation(rows)) if permute else None
    n_sa = rows // subarray_size
    if random_encodings:
        encs = tuple(CellEncoding.ANTI_CELL if b else CellEncoding.TRUE_CELL for b in rng.integers(0, 2, n_sa))
        policy = EncodingPolicy.EXPLICIT
    else:
        encs, policy = (CellEncoding.TRUE_CELL,), EncodingPolicy.ALL_TRUE
    remapped = frozenset(int(x) for x in rng.choice(rows, size=n_remapped, replace=False)) if n_remapped else frozenset()
    if mechanism is None:
        mechanism = default_mechanism(
            fall=ThresholdParams(mu=math.log(60_000.0), sigma=0.5, p=0.8),
            rise=ThresholdParams(mu=math.log(40_000.0), sigma=0.6, p=0.5),
        )
    return ChipProfile(
        name=name or f"synthetic-{seed}",
        manufacturer="M",
        die_density_gb=8,
        die_revision="X",
        rows_per_bank=rows,
        columns_per_row=columns,
        subarray_size=subarray_size,
        encoding_policy=policy,
        subarray_encodings=encs,
        logical_to_physical=perm,
        remapped_rows=remapped,
        mechanism=mechanism,
        master_seed=int(rng.integers(0, 2**63)),
    )


def default_mechanism(fall: ThresholdParams, rise: ThresholdParams, mode=Mode.EMPIRICAL, frame=Frame.LOGICAL) -> MechanismParams:
    """Mechanism strengths shared by every shipped profile.

    Only the threshold populations differ between chips; scaling all
    strengths and thresholds together leaves every protocol outcome unchanged.
    """
    return MechanismParams(
        nwl_hammer=Mechanism(1.0, 1.0),
        pwl_hammer=Mechanism(1.0, 1.0),
        double_sided_boost=2.0,
        nwl_press=Mechanism(5.0e-7, 1.01),
        pwl_press=Mechanism(5.0e-3, 1.01),
        retention=Mechanism(1.2e-4, 1.05),
        thresholds=(fall, rise),
        mode=mode,
        frame=frame,
    )


def iter_subarray_rows(profile: ChipProfile, subarray: int) -> Iterable[int]:
    start = subarray * profile.subarray_size
    return range(start, start + profile.subarray_size)
