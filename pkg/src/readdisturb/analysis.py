"""Per-chip statistics, table reports and the model-vs-measurement checker."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from readdisturb import __version__
from readdisturb.model import CellEncoding, ChipProfile, encoding_of
from readdisturb.protocols import ExperimentResult, RowResult
from readdisturb.tables import CHIPS, ChipTargets


class InsufficientData(Exception):
    pass


# -- distributions ---------------------------------------------------------------

@dataclass(frozen=True)
class DistributionSummary:
    min: float
    q1: float
    median: float
    q3: float
    max: float
    iqr: float
    whisker_low: float
    whisker_high: float
    fliers: tuple = ()
    n: int = 0


def _median(xs) -> float:
    n = len(xs)
    m = n // 2
    return float(xs[m]) if n % 2 else (xs[m - 1] + xs[m]) / 2


def summarize(values) -> DistributionSummary:
    """Box-plot statistics with quartiles as medians of the lower/upper halves.

    For an odd count the median belongs to both halves.
    """
    xs = sorted(float(v) for v in values)
    if not xs:
        raise ValueError("summarize needs at least one value")
    n = len(xs)
    half = (n + 1) // 2
    q1, med, q3 = _median(xs[:half]), _median(xs), _median(xs[n - half:])
    iqr = q3 - q1
    lo = max(q1 - 1.5 * iqr, xs[0])
    hi = min(q3 + 1.5 * iqr, xs[-1])
    fliers = tuple(x for x in xs if x < lo or x > hi)
    return DistributionSummary(xs[0], q1, med, q3, xs[-1], iqr, lo, hi, fliers, n)


# -- differences -------------------------------------------------------------------

def difference(a: float, b: float, convention: str = "table2") -> float:
    """Relative difference of one chip's pair, as a fraction."""
    if not (a > 0 and b > 0):
        raise ValueError("difference needs positive inputs")
    if convention == "table2":
        return (b - a) / b
    if convention == "ratio":
        return (b - a) / a
    raise ValueError(f"unknown convention {convention!r}")


def geomean_difference(pairs, convention: str = "table2") -> float:
    """Geometric mean of per-chip differences, in percent."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no pairs")
    ds = [difference(a, b, convention) for a, b in pairs]
    if any(d < 0 for d in ds):
        raise ValueError("geometric mean needs non-negative differences")
    if any(d == 0 for d in ds):
        return 0.0
    return 100.0 * math.exp(sum(math.log(d) for d in ds) / len(ds))


TABLE_CONVENTION = {2: "table2", 3: "ratio", 4: "ratio"}
TABLE_COLUMNS = {
    2: ("hc_first_0to1", "hc_first_1to0"),
    3: ("maxflips_0to1", "maxflips_1to0"),
    4: ("hc_first_0to1", "hc_exceeds"),
}
TABLE_TITLES = {
    2: ("Average HC_first", "0 to 1", "1 to 0"),
    3: ("Average bitflip count", "0 to 1", "1 to 0"),
    4: ("Aggressor row activation count", "HC_first 0->1", "HC 1->0 exceeds 0->1"),
}


def found_values(rows, key) -> list:
    return [getattr(r, key) for r in rows if not r.skipped and isinstance(getattr(r, key), int)]


def chip_means(result: ExperimentResult) -> dict:
    """Per-chip means; NotFound rows are excluded and counted separately."""
    rows = result.measured()
    out = {}
    for key in ("hc_first_0to1", "hc_first_1to0", "maxflips_0to1", "maxflips_1to0", "hc_exceeds"):
        vals = found_values(rows, key)
        out[key] = float(np.mean(vals)) if vals else None
        out[f"{key}_not_found"] = sum(1 for r in rows if getattr(r, key) == "NotFound")
    return out


def provenance(results) -> dict:
    """Tool version plus hash, seed and mode of every profile behind ``results``."""
    items = results.values() if isinstance(results, dict) else results
    src = {
        r.profile: {"sha256": r.profile_sha256, "seed": r.seed, "mode": r.mode}
        for r in items if isinstance(r, ExperimentResult)
    }
    return {"tool": "readdisturb", "version": __version__, "profiles": dict(sorted(src.items()))}


def _chip_label(name: str):
    for c in CHIPS:
        if c.name == name:
            return c.manufacturer, f"{c.density_gb} Gb", c.revision
    parts = name.split("-")
    if len(parts) == 3:
        return parts[0], parts[1].replace("Gb", " Gb"), parts[2]
    return name, "", ""


def table_report(table: int, results: dict) -> dict:
    """Machine-readable reproduction of one table from per-chip results.

    ``results`` maps chip name to ExperimentResult (or to a dict of means).
    """
    if table not in TABLE_COLUMNS:
        raise ValueError(f"no table {table}")
    ka, kb = TABLE_COLUMNS[table]
    conv = TABLE_CONVENTION[table]
    order = {c.name: i for i, c in enumerate(CHIPS)}
    rows = []
    for name in sorted(results, key=lambda n: (order.get(n, len(order)), n)):
        r = results[name]
        means = chip_means(r) if isinstance(r, ExperimentResult) else r
        a, b = means.get(ka), means.get(kb)
        d = difference(a, b, conv) * 100 if a and b else None
        rows.append({"chip": name, "label": _chip_label(name), ka: a, kb: b, "difference_pct": d})
    pairs = [(r[ka], r[kb]) for r in rows if r[ka] and r[kb]]
    try:
        gm = geomean_difference(pairs, conv) if pairs else None
    except ValueError:
        gm = None
    return {
        "table": table, "columns": [ka, kb], "convention": conv, "rows": rows,
        "geomean_difference_pct": gm, "provenance": provenance(results),
    }


def format_table(report: dict) -> str:
    """Aligned text rendering in the published column layout."""
    t = report["table"]
    title, ca, cb = TABLE_TITLES[t]
    ka, kb = report["columns"]
    head = ["Mfr.", "Die Density", "Die Revision", ca, cb, "Difference", "Avg. Difference (Geo. Mean)"]
    body = []
    gm = report["geomean_difference_pct"]
    for i, r in enumerate(report["rows"]):
        m, dens, rev = r["label"]
        body.append([
            m, dens, rev,
            _num(r[ka]), _num(r[kb]),
            "-" if r["difference_pct"] is None else f"{r['difference_pct']:.1f}%",
            (f"{gm:.1f}%" if gm is not None else "-") if i == 0 else "",
        ])
    widths = [max(len(h), *(len(row[j]) for row in body)) if body else len(h) for j, h in enumerate(head)]
    lines = [f"Table {t}: {title}", "  ".join(h.ljust(w) for h, w in zip(head, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def _num(v) -> str:
    return "-" if v is None else f"{v:.0f}"


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


PLOT_METRICS = (
    "hc_first_0to1", "hc_first_1to0", "maxflips_0to1", "maxflips_1to0", "hc_exceeds",
    "rp_upper_0to1", "rp_upper_1to0", "rp_lower_0to1", "rp_lower_1to0",
)


def plot_data_csv(results: dict) -> str:
    """DistributionSummary fields per chip and metric."""
    buf = io.StringIO()
    prov = provenance(results)
    buf.write(f"# readdisturb {prov['version']}")
    for name, p in prov["profiles"].items():
        buf.write(f" {name}:sha256={p['sha256']}:seed={p['seed']}")
    buf.write("\n")
    w = csv.writer(buf, lineterminator="\n")
    cols = ["chip", "metric", "n", "min", "q1", "median", "q3", "max", "iqr", "whisker_low", "whisker_high", "n_fliers"]
    w.writerow(cols)
    for name in sorted(results):
        rows = results[name].measured()
        for m in PLOT_METRICS:
            vals = found_values(rows, m)
            if not vals:
                continue
            s = summarize(vals)
            w.writerow([name, m, s.n, *(_g(getattr(s, k)) for k in cols[3:11]), len(s.fliers)])
    return buf.getvalue()


def _g(x: float) -> str:
    return f"{x:.6g}" if not float(x).is_integer() else str(int(x))


# -- consistency checker --------------------------------------------------------------

CONSISTENT, INCONSISTENT, INSUFFICIENT = "Consistent", "Inconsistent", "InsufficientData"

# what each prediction set says, and the narrative code a violation gets
PREDICTIONS = {
    "device": {
        "INC1": "double-sided RowHammer induces only charged-to-discharged bitflips",
        "INC2": "the charged-to-discharged mechanism is the stronger one (lower mean HC_first)",
        "INC3": "single-sided RowPress induces bitflips in both directions",
    },
    "empirical": {
        "INC1": "double-sided RowHammer induces both 0->1 and 1->0 bitflips",
        "INC2": "0->1 bitflips have the lower mean HC_first",
        "INC3": "single-sided RowPress bitflips are overwhelmingly 1->0",
    },
}
ROWPRESS_SKEW = 0.99


@dataclass
class Finding:
    characteristic: str
    predicted: str
    observed: str
    verdict: str
    code: str | None = None


@dataclass
class ConsistencyReport:
    prediction: str
    findings: list = field(default_factory=list)
    per_profile: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def codes(self) -> set:
        return {f.code for f in self.findings if f.verdict == INCONSISTENT}

    def to_dict(self) -> dict:
        return {
            "prediction": self.prediction,
            "inconsistencies": sorted(self.codes),
            "findings": [asdict(f) for f in self.findings],
            "per_profile": {k: [asdict(f) for f in v] for k, v in sorted(self.per_profile.items())},
            "provenance": self.provenance,
        }

    def format(self) -> str:
        lines = [f"Consistency check against {self.prediction}-mode predictions"]
        for f in self.findings:
            tag = f.code if f.verdict == INCONSISTENT else "none"
            lines.append(f"  [{tag}] {f.verdict}: predicted {f.predicted}; observed: {f.observed}")
        codes = sorted(self.codes)
        lines.append("Inconsistencies: " + (", ".join(codes) if codes else "none"))
        return "\n".join(lines) + "\n"


@dataclass
class _Tally:
    # keys: "c2d"/"d2c" (physical) and "0to1"/"1to0" (logical)
    ds_flips: dict = field(default_factory=lambda: {"c2d": 0, "d2c": 0, "0to1": 0, "1to0": 0})
    hcf: dict = field(default_factory=lambda: {"c2d": [], "d2c": [], "0to1": [], "1to0": []})
    rp: dict = field(default_factory=lambda: {"c2d": 0, "d2c": 0, "0to1": 0, "1to0": 0})
    ds_rows: int = 0
    rp_rows: int = 0

    def add(self, row: RowResult, enc: CellEncoding):
        # a logical 1->0 flip discharges a true cell and charges an anti cell
        phys = {"1to0": "c2d", "0to1": "d2c"} if enc is CellEncoding.TRUE_CELL else {"1to0": "d2c", "0to1": "c2d"}
        seen_ds = False
        for ld in ("0to1", "1to0"):
            mf = getattr(row, f"maxflips_{ld}")
            h = getattr(row, f"hc_first_{ld}")
            if isinstance(mf, int):
                seen_ds = True
                self.ds_flips[ld] += mf
                self.ds_flips[phys[ld]] += mf
            if h is not None:
                seen_ds = True
                if isinstance(h, int):
                    self.hcf[ld].append(h)
                    self.hcf[phys[ld]].append(h)
                    if not isinstance(mf, int):
                        # a found HC_first is itself an observed flip
                        self.ds_flips[ld] += 1
                        self.ds_flips[phys[ld]] += 1
        self.ds_rows += seen_ds
        seen_rp = False
        for side in ("upper", "lower"):
            for ld in ("0to1", "1to0"):
                v = getattr(row, f"rp_{side}_{ld}")
                if isinstance(v, int):
                    seen_rp = True
                    self.rp[ld] += v
                    self.rp[phys[ld]] += v
        self.rp_rows += seen_rp


def _mean(xs):
    return float(np.mean(xs)) if xs else None


def _judge(t: _Tally, prediction: str) -> list[Finding]:
    pred = PREDICTIONS[prediction]
    out = []
    device = prediction == "device"
    a, b = ("d2c", "c2d") if device else ("0to1", "1to0")  # the direction pair in this frame

    # INC1: direction set under double-sided hammering
    if t.ds_rows == 0:
        out.append(Finding("double_sided_direction", pred["INC1"], "no double-sided data", INSUFFICIENT))
    else:
        obs = f"{t.ds_flips[b]} {_label(b)} and {t.ds_flips[a]} {_label(a)} bitflips"
        bad = t.ds_flips[a] > 0 if device else (t.ds_flips[a] == 0 or t.ds_flips[b] == 0)
        out.append(Finding("double_sided_direction", pred["INC1"], obs, INCONSISTENT if bad else CONSISTENT, "INC1" if bad else None))

    # INC2: which mechanism reaches its first bitflip sooner
    ma, mb = _mean(t.hcf[a]), _mean(t.hcf[b])
    if ma is None and mb is None:
        out.append(Finding("double_sided_dominance", pred["INC2"], "no HC_first data", INSUFFICIENT))
    else:
        obs = f"mean HC_first {_label(a)} {_fmtm(ma)}, {_label(b)} {_fmtm(mb)}"
        if device:
            bad = ma is not None and (mb is None or ma < mb)
        else:
            bad = ma is None or (mb is not None and ma >= mb)
        out.append(Finding("double_sided_dominance", pred["INC2"], obs, INCONSISTENT if bad else CONSISTENT, "INC2" if bad else None))

    # INC3: RowPress direction mix
    total = t.rp[a] + t.rp[b]
    if t.rp_rows == 0 or total == 0:
        out.append(Finding("rowpress_direction", pred["INC3"], "no RowPress bitflips", INSUFFICIENT))
    else:
        share = max(t.rp[a], t.rp[b]) / total
        obs = f"{t.rp[b]} {_label(b)} and {t.rp[a]} {_label(a)} bitflips ({100 * t.rp[b] / total:.2f}% {_label(b)})"
        bad = share > ROWPRESS_SKEW if device else t.rp[b] / total < ROWPRESS_SKEW
        out.append(Finding("rowpress_direction", pred["INC3"], obs, INCONSISTENT if bad else CONSISTENT, "INC3" if bad else None))
    return out


def _label(k: str) -> str:
    return {"c2d": "charged-to-discharged", "d2c": "discharged-to-charged", "0to1": "0->1", "1to0": "1->0"}[k]


def _fmtm(m):
    return "n/a" if m is None else f"{m:.0f}"


def check_consistency(results, prediction: str = "device") -> ConsistencyReport:
    """Compare measured behaviour against a prediction set.

    ``results`` is an iterable of ``(ChipProfile, ExperimentResult)``; the
    profile supplies each row's cell encoding so logical bitflips can be
    read as physical charge transitions. Verdicts are formed per profile and
    aggregated: a characteristic is inconsistent if any profile violates it.
    """
    if prediction not in PREDICTIONS:
        raise ValueError(f"unknown prediction set {prediction!r}")
    results = list(results)
    if not results:
        raise InsufficientData("no results")
    report = ConsistencyReport(prediction, provenance=provenance([r for _, r in results]))
    per = []
    for profile, res in results:
        t = _Tally()
        for row in res.measured():
            t.add(row, encoding_of(profile, profile.physical(row.row)))
        f = _judge(t, prediction)
        report.per_profile[res.profile] = f
        per.append(f)
    if all(x.verdict == INSUFFICIENT for fs in per for x in fs):
        raise InsufficientData("results hold neither double-sided nor RowPress measurements")
    for i in range(3):
        col = [fs[i] for fs in per]
        bad = [f for f in col if f.verdict == INCONSISTENT]
        ok = [f for f in col if f.verdict == CONSISTENT]
        base = col[0]
        if bad:
            names = sorted(r.profile for (_, r), fs in zip(results, per) if fs[i].verdict == INCONSISTENT)
            report.findings.append(Finding(base.characteristic, base.predicted, f"violated by {len(bad)}/{len(col)} profiles ({', '.join(names)})", INCONSISTENT, bad[0].code))
        elif ok:
            report.findings.append(Finding(base.characteristic, base.predicted, f"holds for {len(ok)}/{len(col)} profiles", CONSISTENT))
        else:
            report.findings.append(Finding(base.characteristic, base.predicted, "no data", INSUFFICIENT))
    return report


def targets_table(table: int, chips=CHIPS) -> dict:
    """Published means arranged like ``table_report`` input."""
    out = {}
    for c in chips:
        out[c.name] = c.as_dict()
    return out


__all__ = [
    "DistributionSummary", "summarize", "difference", "geomean_difference", "chip_means", "table_report",
    "format_table", "plot_data_csv", "check_consistency", "ConsistencyReport", "Finding", "InsufficientData",
    "ChipProfile", "ChipTargets",
]
