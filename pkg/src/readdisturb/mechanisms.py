"""Mechanism strengths and per-cell threshold populations.

Strengths are in arbitrary disturbance units: per activation for the two
hammer mechanisms, per ns of aggressor open time for the two press
mechanisms, per ns elapsed for retention leakage.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

REFERENCE_TEMP_C = 50.0


class Mode(str, Enum):
    DEVICE = "device"
    EMPIRICAL = "empirical"


class Frame(str, Enum):
    """Which cell state read disturbance pushes around.

    ``physical``: charge on the storage node, so anti-cell rows see the
    mirror image of true-cell rows. ``logical``: every row responds as if it
    were built from true cells (what the measured chips look like).
    Retention always acts on physical charge.
    """

    PHYSICAL = "physical"
    LOGICAL = "logical"


MECHANISMS = ("nwl_hammer", "pwl_hammer", "double_sided_boost", "nwl_press", "pwl_press", "retention")


@dataclass(frozen=True)
class Mechanism:
    strength: float
    temp_coeff: float = 1.0

    def __post_init__(self):
        if not (self.strength >= 0 and math.isfinite(self.strength)):
            raise ValueError(f"strength must be finite and >= 0, got {self.strength}")
        if not self.temp_coeff > 0:
            raise ValueError("temp_coeff must be > 0")

    def at(self, temperature: float) -> float:
        if self.temp_coeff == 1.0:
            return self.strength
        return self.strength * self.temp_coeff ** (temperature - REFERENCE_TEMP_C)


@dataclass(frozen=True)
class ThresholdParams:
    """Log-normal threshold population; a cell is vulnerable with probability ``p``."""

    mu: float
    sigma: float
    p: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")


@dataclass(frozen=True)
class MechanismParams:
    nwl_hammer: Mechanism
    pwl_hammer: Mechanism
    double_sided_boost: float
    nwl_press: Mechanism
    pwl_press: Mechanism
    retention: Mechanism
    # index 0: charged -> discharged, index 1: discharged -> charged
    thresholds: tuple[ThresholdParams, ThresholdParams]
    mode: Mode = Mode.EMPIRICAL
    frame: Frame = Frame.PHYSICAL
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.double_sided_boost >= 1.0:
            raise ValueError("double_sided_boost must be >= 1")
        if len(self.thresholds) != 2:
            raise ValueError("need one threshold population per direction")

    def to_dict(self) -> dict:
        def mech(m: Mechanism):
            return {"strength": m.strength, "temp_coeff": m.temp_coeff}

        return {
            "mode": self.mode.value,
            "frame": self.frame.value,
            "reference_temp_c": REFERENCE_TEMP_C,
            "nwl_hammer": mech(self.nwl_hammer),
            "pwl_hammer": mech(self.pwl_hammer),
            "double_sided_boost": self.double_sided_boost,
            "nwl_press": mech(self.nwl_press),
            "pwl_press": mech(self.pwl_press),
            "retention": mech(self.retention),
            "thresholds": {
                "charged_to_discharged": _tp(self.thresholds[0]),
                "discharged_to_charged": _tp(self.thresholds[1]),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MechanismParams":
        def mech(x):
            return Mechanism(float(x["strength"]), float(x.get("temp_coeff", 1.0)))

        th = d["thresholds"]
        return cls(
            nwl_hammer=mech(d["nwl_hammer"]),
            pwl_hammer=mech(d["pwl_hammer"]),
            double_sided_boost=float(d["double_sided_boost"]),
            nwl_press=mech(d["nwl_press"]),
            pwl_press=mech(d["pwl_press"]),
            retention=mech(d["retention"]),
            thresholds=(
                ThresholdParams(**th["charged_to_discharged"]),
                ThresholdParams(**th["discharged_to_charged"]),
            ),
            mode=Mode(d.get("mode", "empirical")),
            frame=Frame(d.get("frame", "physical")),
        )

    def device_variant(self) -> "MechanismParams":
        """Parameters encoding the device-level characteristics.

        Physical frame, no discharged->charged disturbance under double-sided
        alternation, and NWL press as strong as PWL press.
        """
        return replace(self, mode=Mode.DEVICE, frame=Frame.PHYSICAL, nwl_press=self.pwl_press)

    def zeroed(self) -> "MechanismParams":
        z = Mechanism(0.0)
        return replace(self, nwl_hammer=z, pwl_hammer=z, nwl_press=z, pwl_press=z, retention=z)


def _tp(t: ThresholdParams) -> dict:
    return {"mu": t.mu, "sigma": t.sigma, "p": t.p}
