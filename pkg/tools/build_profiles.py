"""Regenerate the shipped chip profiles by calibrating against the published means."""
import argparse
import sys
import time
from pathlib import Path

from readdisturb.calibration import CalibrationFailed, base_profile, calibrate
from readdisturb.tables import CHIPS

OUT = Path(__file__).resolve().parents[1] / "src" / "readdisturb" / "profiles"


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("chips", nargs="*", help="chip names (default: all)")
    ap.add_argument("--out", type=Path, default=OUT)
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    status = 0
    for chip in CHIPS:
        if args.chips and chip.name not in args.chips:
            continue
        t0 = time.time()
        try:
            prof = calibrate(base_profile(chip), chip)
        except CalibrationFailed as e:
            print(f"{chip.name}: FAILED {e} {e.errors}", flush=True)
            status = 1
            continue
        prof.save(args.out / f"{chip.name}.json")
        errs = prof.calibration["relative_errors"]
        print(f"{chip.name}: max err {max(errs.values()):.4f} in {time.time() - t0:.0f}s {errs}", flush=True)
    return status


if __name__ == "__main__":
    sys.exit(main())
