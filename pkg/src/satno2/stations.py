"""Ground-station NO2 records: parsing EEA-style exports, the validity /
verification filter and per-period mean targets."""

import csv
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import CoverageError, FormatError
from .periods import STUDY_SPAN, parse_period, periods_in_span

COLUMNS = ("station_id", "latitude", "longitude", "timestamp", "no2", "validity", "verification")
MIN_COVERAGE = 0.25

# EEA download headers mapped onto the canonical column names
ALIASES = {
    "airqualitystation": "station_id",
    "airqualitystationeoicode": "station_id",
    "station": "station_id",
    "lat": "latitude",
    "lon": "longitude",
    "datetimebegin": "timestamp",
    "datetime": "timestamp",
    "concentration": "no2",
    "value": "no2",
}


@dataclass(frozen=True)
class TargetValue:
    station_id: str
    period: str
    mean_no2: float
    n_measurements: int


def _canonical(name):
    key = name.strip().lower()
    return key if key in COLUMNS else ALIASES.get(key, key)


def _sniff_delimiter(path):
    with open(path, newline="") as fh:
        head = fh.readline()
    try:
        return csv.Sniffer().sniff(head, delimiters=",;\t|").delimiter
    except csv.Error:
        return ","


def parse_station_file(path):
    """Read a delimiter-separated station export.

    Returns ``(records, rejects)``: ``records`` is a DataFrame with the
    canonical ``COLUMNS`` (timestamps as UTC), ``rejects`` lists malformed
    rows with their 1-based file line and the offending column.
    """
    raw = pd.read_csv(path, sep=_sniff_delimiter(path), dtype=str, keep_default_na=False)
    raw.columns = [_canonical(c) for c in raw.columns]
    raw = raw.loc[:, ~raw.columns.duplicated()]
    missing = [c for c in COLUMNS if c not in raw.columns]
    if missing:
        raise FormatError(f"{path}: missing mandatory column(s) {missing}")

    out = pd.DataFrame({"station_id": raw["station_id"].str.strip()})
    out["timestamp"] = pd.to_datetime(raw["timestamp"].str.strip(), utc=True,
                                      errors="coerce", format="ISO8601")
    for col in ("latitude", "longitude", "no2"):
        out[col] = pd.to_numeric(raw[col], errors="coerce")
    for col in ("validity", "verification"):
        out[col] = pd.to_numeric(raw[col], errors="coerce")

    bad = pd.Series("", index=out.index)
    bad[out["station_id"] == ""] = "station_id"
    for col in ("timestamp", "latitude", "longitude", "no2", "validity", "verification"):
        bad[(bad == "") & out[col].isna()] = col
    for col in ("validity", "verification"):
        frac = out[col].notna() & (out[col] % 1 != 0)
        bad[(bad == "") & frac] = col
    rejected = bad != ""
    rejects = pd.DataFrame({"line": out.index[rejected] + 2, "column": bad[rejected],
                            "raw": [",".join(row) for row in raw[rejected].astype(str).to_numpy()]})
    records = out[~rejected].reset_index(drop=True)
    records = records.astype({"validity": int, "verification": int})
    return records[list(COLUMNS)], rejects.reset_index(drop=True)


def filter_quality(records):
    """Keep exactly the records with validity == 1 and verification == 1."""
    keep = (records["validity"] == 1) & (records["verification"] == 1)
    return records[keep].reset_index(drop=True)


def drop_negative(records):
    """Negative concentrations are baseline artifacts and are treated as invalid."""
    return records[records["no2"] >= 0].reset_index(drop=True)


def required_measurements(period, min_coverage=MIN_COVERAGE):
    return max(1, math.ceil(min_coverage * period.hours))


def aggregate_target(records, station_id, period, min_coverage=MIN_COVERAGE, span=STUDY_SPAN):
    """Mean NO2 of one station over ``period`` (a ``Period`` or its label)."""
    period = parse_period(period, span)
    ts = records["timestamp"]
    sel = (records["station_id"] == station_id) & (ts >= period.start) & (ts < period.end)
    values = records.loc[sel, "no2"].to_numpy(dtype=np.float64)
    need = required_measurements(period, min_coverage)
    if values.size < need:
        raise CoverageError(f"station {station_id}, period {period.label}: "
                            f"{values.size} measurements, {need} required")
    return TargetValue(station_id, period.label, float(np.mean(values)), int(values.size))


def aggregate_targets(records, regime="full", span=STUDY_SPAN, min_coverage=MIN_COVERAGE):
    """Targets for every station and period of ``regime`` meeting the coverage floor."""
    rows = []
    for period in periods_in_span(regime, span):
        ts = records["timestamp"]
        in_period = records[(ts >= period.start) & (ts < period.end)]
        need = required_measurements(period, min_coverage)
        for sid, grp in in_period.groupby("station_id", sort=True):
            if len(grp) >= need:
                rows.append(TargetValue(sid, period.label, float(grp["no2"].mean()), len(grp)))
    return rows


def station_locations(records):
    """Median reported position per station."""
    pos = records.groupby("station_id", sort=True)[["latitude", "longitude"]].median()
    return {sid: (float(r.latitude), float(r.longitude)) for sid, r in pos.iterrows()}


def write_targets(path, targets):
    frame = pd.DataFrame([t.__dict__ for t in targets],
                         columns=["station_id", "period", "mean_no2", "n_measurements"])
    frame.to_csv(path, sep="\t", index=False, float_format="%.6f")


def read_targets(path):
    frame = pd.read_csv(path, sep="\t", dtype={"station_id": str, "period": str})
    return [TargetValue(r.station_id, r.period, float(r.mean_no2), int(r.n_measurements))
            for r in frame.itertuples()]
