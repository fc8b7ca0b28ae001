"""Command-line entry point: ``readdisturb <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from readdisturb import __version__, analysis, calibration, commands, protocols
from readdisturb.model import ChipProfile, load_profile, shipped_profile_names

EXIT_OK, EXIT_INVALID, EXIT_TIMING = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit status 2 is reserved for timing violations
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _common(p, experiment=True):
    p.add_argument("--profile", required=True, help="profile JSON path or shipped name, e.g. S-8Gb-B")
    p.add_argument("--out", type=Path, default=Path("out"), help="results directory")
    p.add_argument("--seed", type=int, help="override the profile's master seed")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--mode", choices=("empirical", "device"), default="empirical",
                   help="device: run the device-level mechanism variant of the profile")
    if experiment:
        p.add_argument("--rows", type=int, default=2048, help="number of measurable victim rows")
        p.add_argument("--first-row", type=int, default=0)
        p.add_argument("--temp", type=float, help="temperature override in C")
        p.add_argument("--strict-timing", action="store_true", help="refresh-window overrun is an error")
        p.add_argument("--method", choices=("analytic", "simulate"), default="analytic")
        p.add_argument("--hc-max", type=int, default=500_000)
        p.add_argument("--hc-step", type=int, default=1000)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="readdisturb", description="Simulated DRAM read-disturbance characterization")
    ap.add_argument("--version", action="version", version=f"readdisturb {__version__}")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    for name, help_ in (
        ("hcfirst", "HC_first of both directions under double-sided hammering"),
        ("maxflips", "bitflip counts at the maximum hammer count"),
        ("hcexceeds", "count at which 1->0 bitflips outnumber 0->1"),
        ("rowpress", "single-sided RowPress bitflips from each neighbour"),
        ("retention", "retention failures under both data patterns"),
        ("reveng-map", "recover physical row adjacency by single-sided hammering"),
        ("reveng-cells", "recover per-subarray true/anti-cell layout from retention failures"),
        ("all", "hcfirst, maxflips, hcexceeds and rowpress in one pass"),
    ):
        _common(sub.add_parser(name, help=help_))
    c = sub.add_parser("calibrate", help="fit a profile's threshold populations to published means")
    c.add_argument("--profile", required=True)
    c.add_argument("--targets", help="chip name whose published means to fit (default: profile name)")
    c.add_argument("--budget", type=int, default=600)
    c.add_argument("--rows", type=int, default=2048)
    c.add_argument("--out", type=Path, required=True, help="output profile path or directory")
    r = sub.add_parser("report", help="reproduce a table from a results directory")
    r.add_argument("--table", type=int, choices=(2, 3, 4), required=True)
    r.add_argument("--results", type=Path, required=True)
    r.add_argument("--json", type=Path, help="also write the machine-readable report here")
    r.add_argument("--plot-data", type=Path, help="write distribution summaries as CSV here")
    k = sub.add_parser("check", help="compare results against a prediction set")
    k.add_argument("--results", type=Path, required=True)
    k.add_argument("--mode", choices=("device", "empirical"), default="device", help="prediction set")
    k.add_argument("--json", type=Path)
    sub.add_parser("profiles", help="list shipped profiles")
    return ap


# -- helpers -----------------------------------------------------------------------

def _load(args) -> ChipProfile:
    try:
        prof = load_profile(args.profile)
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise UsageError(f"cannot load profile {args.profile!r}: {e}") from e
    if getattr(args, "seed", None) is not None:
        prof = prof.with_seed(args.seed)
    if getattr(args, "mode", "empirical") == "device":
        prof = prof.device_mode()
    return prof


def _config(args) -> protocols.ExperimentConfig:
    kw = {
        "rows_to_test": args.rows,
        "first_row": args.first_row,
        "method": args.method,
        "hc_hi": args.hc_max,
        "hc_step": args.hc_step,
    }
    if args.temp is not None:
        kw["temperature"] = args.temp
        kw["rowpress_temperature"] = args.temp
        kw["retention_temperature"] = args.temp
    try:
        return protocols.ExperimentConfig(**kw)
    except ValueError as e:
        raise UsageError(str(e)) from e


def _timing_preflight(cfg: protocols.ExperimentConfig, experiments, strict: bool) -> list[str]:
    """Validate the longest program each experiment issues."""
    progs = []
    if {"hcfirst", "maxflips", "hcexceeds"} & set(experiments):
        progs.append(commands.build_hammer_program([0, 2], cfg.hc_hi, cfg.hammer_open_ns))
    if "rowpress" in experiments:
        progs.append(commands.build_hammer_program([0], cfg.rowpress_count, cfg.rowpress_open_ns))
    if "reveng-map" in experiments:
        progs.append(commands.build_hammer_program([0], cfg.reveng_count, cfg.hammer_open_ns))
    notes = []
    for prog in progs:
        span = prog.span_ps()
        if span > commands.T_REFW:
            msg = f"program span {span / 1e9:.3f} ms exceeds the 64 ms refresh window with refresh disabled"
            if strict:
                raise commands.RefreshWindowExceeded(msg)
            notes.append(msg)
    return notes


def _outdir(args, prof: ChipProfile) -> Path:
    d = args.out / prof.name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_manifest(d: Path, args, prof: ChipProfile, experiment: str, cfg, notes):
    path = d / "manifest.json"
    data = json.loads(path.read_text()) if path.is_file() else {}
    data.update({
        "tool": "readdisturb",
        "version": __version__,
        "profile": str(args.profile),
        "profile_name": prof.name,
        "profile_sha256": prof.sha256(),
        "seed": prof.master_seed,
        "mode": prof.mechanism.mode.value,
    })
    runs = data.setdefault("runs", {})
    runs[experiment] = {
        "config_overrides": cfg.overrides() if cfg is not None else {},
        "output_dir": str(args.out),
        "threads": args.threads,
        "strict_timing": bool(getattr(args, "strict_timing", False)),
        "warnings": notes,
    }
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    (d / "profile.json").write_text(prof.to_json())


def _header(prof: ChipProfile) -> str:
    return f"# readdisturb {__version__} profile={prof.name} sha256={prof.sha256()} seed={prof.master_seed} mode={prof.mechanism.mode.value}\n"


# -- subcommands -----------------------------------------------------------------

def cmd_experiment(args) -> int:
    prof = _load(args)
    cfg = _config(args)
    exps = protocols.EXPERIMENTS if args.cmd == "all" else (args.cmd,)
    notes = _timing_preflight(cfg, exps, args.strict_timing)
    for n in notes:
        print(f"warning: {n}", file=sys.stderr)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", commands.WindowWarning)
        res = protocols.run_experiment(prof, exps, cfg, threads=args.threads)
    d = _outdir(args, prof)
    (d / f"{args.cmd}.csv").write_text(res.to_csv())
    _write_manifest(d, args, prof, args.cmd, cfg, notes)
    measured = len(res.measured())
    print(f"{prof.name}: {measured} rows measured, {len(res.rows) - measured} skipped -> {d / (args.cmd + '.csv')}")
    return EXIT_OK


def cmd_retention(args) -> int:
    prof = _load(args)
    cfg = _config(args)
    d = _outdir(args, prof)
    lines = [_header(prof), "row,skipped,reason,flips_0x00,flips_0xFF\n"]
    count = 0
    r = cfg.first_row
    while count < cfg.rows_to_test and r < prof.rows_per_bank:
        if prof.physical(r) in prof.remapped_rows:
            lines.append(f"{r},1,{protocols.SKIP_REMAPPED},,\n")
        else:
            a = protocols.run_retention(prof, r, 0x00, cfg)
            b = protocols.run_retention(prof, r, 0xFF, cfg)
            lines.append(f"{r},0,,{a},{b}\n")
            count += 1
        r += 1
    (d / "retention.csv").write_text("".join(lines))
    _write_manifest(d, args, prof, "retention", cfg, [])
    print(f"{prof.name}: retention measured on {count} rows -> {d / 'retention.csv'}")
    return EXIT_OK


def cmd_reveng_map(args) -> int:
    prof = _load(args)
    cfg = _config(args)
    notes = _timing_preflight(cfg, ("reveng-map",), args.strict_timing)
    rows = range(cfg.first_row, min(prof.rows_per_bank, cfg.first_row + cfg.rows_to_test))
    m = protocols.reveng_row_mapping(prof, cfg, rows)
    d = _outdir(args, prof)
    lines = [_header(prof), "row,status,neighbors\n"]
    for r in rows:
        lines.append(f"{r},{m.status[r]},{';'.join(str(x) for x in m.neighbors[r])}\n")
    (d / "reveng-map.csv").write_text("".join(lines))
    _write_manifest(d, args, prof, "reveng-map", cfg, notes)
    ok = sum(m.neighbors[r] == protocols.ground_truth_neighbors(prof, r) for r in rows)
    print(f"{prof.name}: {len(rows)} rows mapped, {len(m.undetectable())} undetectable; "
          f"agreement with profile layout {ok}/{len(rows)}")
    return EXIT_OK


def cmd_reveng_cells(args) -> int:
    prof = _load(args)
    cfg = _config(args)
    enc = protocols.reveng_true_anti(prof, cfg)
    d = _outdir(args, prof)
    lines = [_header(prof), "subarray,encoding\n"]
    lines += [f"{sa},{e}\n" for sa, e in sorted(enc.items())]
    (d / "reveng-cells.csv").write_text("".join(lines))
    _write_manifest(d, args, prof, "reveng-cells", cfg, [])
    truth = protocols.ground_truth_encodings(prof, enc)
    ok = sum(enc[sa] == truth[sa] for sa in enc)
    print(f"{prof.name}: {len(enc)} subarrays classified; agreement with profile layout {ok}/{len(enc)}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    try:
        prof = load_profile(args.profile)
    except (OSError, ValueError, KeyError) as e:
        raise UsageError(f"cannot load profile {args.profile!r}: {e}") from e
    from readdisturb.tables import targets_for

    try:
        targets = targets_for(args.targets or prof.name)
    except KeyError as e:
        raise UsageError(str(e)) from e
    try:
        fitted = calibration.calibrate(prof, targets, budget=args.budget, rows=args.rows)
    except calibration.CalibrationFailed as e:
        print(f"calibration failed: {e}", file=sys.stderr)
        for k, v in e.errors.items():
            print(f"  {k}: relative error {v:.4f}", file=sys.stderr)
        return EXIT_INVALID
    out = args.out / f"{fitted.name}.json" if args.out.is_dir() or args.out.suffix != ".json" else args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    fitted.save(out)
    errs = fitted.calibration["relative_errors"]
    print(f"{fitted.name}: fitted, max relative error {max(errs.values()):.4f} -> {out}")
    return EXIT_OK


def load_results(path: Path) -> list[tuple[ChipProfile | None, protocols.ExperimentResult]]:
    """Merge every experiment CSV of each profile directory under ``path``."""
    dirs = [path] if any(path.glob("*.csv")) else sorted(p for p in path.iterdir() if p.is_dir())
    out = []
    for d in dirs:
        merged: dict[int, protocols.RowResult] = {}
        meta = None
        exps: list[str] = []
        for f in sorted(d.glob("*.csv")):
            if f.stem not in protocols.EXPERIMENTS and f.stem != "all":
                continue
            res = protocols.ExperimentResult.from_csv(f.read_text())
            meta = meta or res
            exps += [e for e in res.experiments if e not in exps]
            for row in res.rows:
                cur = merged.setdefault(row.row, protocols.RowResult(row=row.row, skipped=row.skipped, reason=row.reason))
                for k in protocols.CSV_FIELDS[3:]:
                    v = getattr(row, k)
                    if v is not None:
                        setattr(cur, k, v)
        if meta is None:
            continue
        prof = load_profile(d / "profile.json") if (d / "profile.json").is_file() else None
        res = protocols.ExperimentResult(
            profile=meta.profile, profile_sha256=meta.profile_sha256, seed=meta.seed,
            experiments=tuple(exps), rows=[merged[k] for k in sorted(merged)], mode=meta.mode,
        )
        out.append((prof, res))
    return out


def cmd_report(args) -> int:
    if not args.results.is_dir():
        raise UsageError(f"no results directory {args.results}")
    loaded = load_results(args.results)
    if not loaded:
        raise UsageError(f"no result CSVs under {args.results}")
    results = {res.profile: res for _, res in loaded}
    rep = analysis.table_report(args.table, results)
    sys.stdout.write(analysis.format_table(rep))
    if args.json:
        args.json.write_text(analysis.report_json(rep))
    if args.plot_data:
        args.plot_data.write_text(analysis.plot_data_csv(results))
    return EXIT_OK


def cmd_check(args) -> int:
    if not args.results.is_dir():
        raise UsageError(f"no results directory {args.results}")
    loaded = load_results(args.results)
    pairs = []
    for prof, res in loaded:
        if prof is None:
            raise UsageError(f"{res.profile}: profile.json missing next to the results")
        pairs.append((prof, res))
    try:
        rep = analysis.check_consistency(pairs, args.mode)
    except analysis.InsufficientData as e:
        print(f"insufficient data: {e}", file=sys.stderr)
        return EXIT_INVALID
    sys.stdout.write(rep.format())
    if args.json:
        args.json.write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_profiles(args) -> int:
    for n in shipped_profile_names():
        print(n)
    return EXIT_OK


HANDLERS = {
    "hcfirst": cmd_experiment,
    "maxflips": cmd_experiment,
    "hcexceeds": cmd_experiment,
    "rowpress": cmd_experiment,
    "all": cmd_experiment,
    "retention": cmd_retention,
    "reveng-map": cmd_reveng_map,
    "reveng-cells": cmd_reveng_cells,
    "calibrate": cmd_calibrate,
    "report": cmd_report,
    "check": cmd_check,
    "profiles": cmd_profiles,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # usage errors, --help, --version
        return e.code if isinstance(e.code, int) else EXIT_INVALID
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return HANDLERS[args.cmd](args)
    except commands.TimingViolation as e:
        print(f"timing violation: {e}", file=sys.stderr)
        return EXIT_TIMING
    except (UsageError, commands.IllegalCommand, protocols.SkippedRow) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
