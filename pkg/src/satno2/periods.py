"""Time periods used as aggregation keys: the full study span, calendar
quarters and calendar months."""

import re
from dataclasses import dataclass, field
from datetime import datetime, timezone

import pandas as pd

UTC = timezone.utc
STUDY_SPAN = (datetime(2018, 1, 1, tzinfo=UTC), datetime(2021, 1, 1, tzinfo=UTC))
REGIMES = ("full", "quarterly", "monthly")

_QUARTER = re.compile(r"^(\d{4})-Q([1-4])$")
_MONTH = re.compile(r"^(\d{4})-(\d{2})$")


@dataclass(frozen=True, order=True)
class Period:
    start: datetime
    end: datetime  # exclusive
    label: str = field(compare=False)

    def __contains__(self, t):
        return self.start <= _utc(t) < self.end

    @property
    def hours(self):
        return int((self.end - self.start).total_seconds() // 3600)

    def __str__(self):
        return self.label


def _utc(t):
    if isinstance(t, pd.Timestamp):
        t = t.to_pydatetime()
    elif not isinstance(t, datetime):
        t = datetime(t.year, t.month, t.day)
    return t.replace(tzinfo=UTC) if t.tzinfo is None else t.astimezone(UTC)


def month_period(year, month):
    start = datetime(year, month, 1, tzinfo=UTC)
    end = datetime(year + month // 12, month % 12 + 1, 1, tzinfo=UTC)
    return Period(start, end, f"{year:04d}-{month:02d}")


def quarter_period(year, quarter):
    m = 3 * (quarter - 1) + 1
    return Period(month_period(year, m).start, month_period(year, m + 2).end,
                  f"{year:04d}-Q{quarter}")


def full_period(span=STUDY_SPAN):
    return Period(_utc(span[0]), _utc(span[1]), "full")


def parse_period(label, span=STUDY_SPAN):
    """Turn ``"full"``, ``"2019-Q2"`` or ``"2019-03"`` into a ``Period``."""
    if isinstance(label, Period):
        return label
    if label == "full":
        return full_period(span)
    m = _QUARTER.match(label)
    if m:
        return quarter_period(int(m.group(1)), int(m.group(2)))
    m = _MONTH.match(label)
    if m and 1 <= int(m.group(2)) <= 12:
        return month_period(int(m.group(1)), int(m.group(2)))
    raise ValueError(f"unrecognized period label {label!r}")


def period_of(t, regime, span=STUDY_SPAN):
    t = _utc(t)
    if regime == "full":
        return full_period(span)
    if regime == "quarterly":
        return quarter_period(t.year, (t.month - 1) // 3 + 1)
    if regime == "monthly":
        return month_period(t.year, t.month)
    raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")


def periods_in_span(regime, span=STUDY_SPAN):
    span = full_period(span)
    if regime == "full":
        return [span]
    out, t = [], span.start
    while t < span.end:
        p = period_of(t, regime)
        out.append(p)
        t = p.end
    return out
