"""Published per-chip means used as calibration and acceptance targets."""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ChipTargets:
    manufacturer: str
    density_gb: int
    revision: str
    hc_first_0to1: float
    hc_first_1to0: float
    maxflips_0to1: float
    maxflips_1to0: float
    hc_exceeds: float

    @property
    def name(self) -> str:
        return f"{self.manufacturer}-{self.density_gb}Gb-{self.revision}"

    def as_dict(self) -> dict:
        return {
            "hc_first_0to1": self.hc_first_0to1,
            "hc_first_1to0": self.hc_first_1to0,
            "maxflips_0to1": self.maxflips_0to1,
            "maxflips_1to0": self.maxflips_1to0,
            "hc_exceeds": self.hc_exceeds,
        }


CHIPS = (
    ChipTargets("S", 8, "B", 43840, 59368, 1769, 3162, 241740),
    ChipTargets("S", 8, "D", 15398, 18041, 8617, 18803, 63198),
    ChipTargets("S", 8, "E", 9684, 11623, 10414, 25722, 31927),
    ChipTargets("S", 16, "M", 16732, 19946, 6235, 13631, 72188),
    ChipTargets("S", 16, "A", 16981, 20942, 6070, 13833, 78820),
    ChipTargets("S", 16, "B", 26415, 38774, 2496, 5564, 153826),
    ChipTargets("S", 16, "C", 11355, 13346, 9621, 23849, 36751),
    ChipTargets("H", 8, "C", 26500, 38440, 2461, 5417, 156087),
    ChipTargets("H", 8, "D", 22069, 33489, 2619, 5226, 141656),
    ChipTargets("H", 16, "A", 29825, 43326, 2295, 4807, 175674),
    ChipTargets("H", 16, "C", 18042, 28041, 3586, 6320, 154951),
    ChipTargets("M", 8, "E", 44468, 55605, 3555, 4593, 235454),
)

BY_NAME = {c.name: c for c in CHIPS}

# printed per-chip differences (percent) and their geometric means
TABLE2_DIFF = (26.2, 14.7, 16.7, 16.1, 18.9, 31.9, 14.9, 31.1, 34.1, 31.2, 35.7, 20.0)
TABLE3_DIFF = (78.7, 118.2, 147.0, 118.6, 127.9, 122.8, 147.9, 120.1, 99.5, 109.4, 76.2, 29.2)
TABLE4_DIFF = (451.4, 310.4, 229.7, 331.4, 364.2, 482.3, 223.6, 489.0, 541.9, 489.0, 758.8, 429.5)
GEOMEAN = {2: 24.7, 3: 105.1, 4: 406.5}
GEOMEAN_TOLERANCE_PP = {2: 3.0, 3: 10.0, 4: 30.0}
MEAN_TOLERANCE = {2: 0.10, 3: 0.10, 4: 0.15}

ROWPRESS_UPPER_LOWER_GAP = 3.1  # percent


def targets_for(name: str) -> ChipTargets:
    stem = name[:-5] if name.endswith(".json") else name
    try:
        return BY_NAME[stem]
    except KeyError:
        raise KeyError(f"no published targets for {name!r}") from None


def table_pairs(table: int, chips=CHIPS) -> list[tuple[float, float]]:
    """(a, b) pairs in the order the difference formula expects."""
    if table == 2:
        return [(c.hc_first_0to1, c.hc_first_1to0) for c in chips]
    if table == 3:
        return [(c.maxflips_0to1, c.maxflips_1to0) for c in chips]
    if table == 4:
        return [(c.hc_first_0to1, c.hc_exceeds) for c in chips]
    raise ValueError(f"no table {table}")
