"""
Daily price ingestion and weekly loss returns.

Weekly losses are negative log-returns of weekly *average* prices:
``loss_w = -log(P_w / P_{w-1})``.  Weeks without observations are skipped and
the following loss is flagged as spanning a gap.
"""

from __future__ import annotations

import csv
import datetime as dt
import enum
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import DataError, DomainError


class WeekConvention(str, enum.Enum):
    ANCHORED_SUNDAY = "AnchoredSunday"
    ISO_WEEK = "ISOWeek"


@dataclass(frozen=True)
class PriceSeries:
    dates: tuple[dt.date, ...]
    prices: np.ndarray

    def __post_init__(self):
        if len(self.dates) != len(self.prices):
            raise DataError("dates and prices differ in length")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise DataError("dates must be strictly increasing")
        if np.any(~(np.asarray(self.prices) > 0)):
            raise DataError("prices must be positive")

    def __len__(self):
        return len(self.dates)

    def __eq__(self, other):
        return (isinstance(other, PriceSeries) and self.dates == other.dates
                and np.array_equal(self.prices, other.prices))


@dataclass(frozen=True)
class LossReturnSeries:
    week_starts: tuple[dt.date, ...]
    losses: np.ndarray
    gap: np.ndarray          # True when the loss spans one or more empty weeks
    convention: WeekConvention = WeekConvention.ANCHORED_SUNDAY

    def __len__(self):
        return len(self.week_starts)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["week_start", "loss", "gap"])
        for d, v, g in zip(self.week_starts, self.losses, self.gap):
            w.writerow([d.isoformat(), repr(float(v)), int(g)])
        return buf.getvalue()


def load_price_csv(path: Union[str, Path], date_column: str = "date", price_column: str = "close",
                   date_format: str = "%Y-%m-%d") -> PriceSeries:
    """Read a headed UTF-8 CSV of daily prices.

    Rows are validated as they are read (errors carry the 1-based file line),
    then sorted by date; duplicate dates are rejected.
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError("file is empty; a header row is required")
        missing = [c for c in (date_column, price_column) if c not in reader.fieldnames]
        if missing:
            raise DataError(f"missing column(s) {', '.join(missing)}", line=1)
        for row in reader:
            line = reader.line_num
            raw_d, raw_p = row.get(date_column), row.get(price_column)
            if raw_d is None or raw_p is None or raw_d.strip() == "" or raw_p.strip() == "":
                raise DataError("missing field", line=line)
            try:
                d = dt.datetime.strptime(raw_d.strip(), date_format).date()
            except ValueError:
                raise DataError(f"cannot parse date {raw_d!r} with format {date_format!r}", line=line) from None
            try:
                p = float(raw_p)
            except ValueError:
                raise DataError(f"cannot parse price {raw_p!r}", line=line) from None
            if not (math.isfinite(p) and p > 0):
                raise DataError(f"price must be positive, got {raw_p.strip()}", line=line)
            rows.append((d, p, line))
    rows.sort(key=lambda r: r[0])
    for (d0, _, l0), (d1, _, l1) in zip(rows, rows[1:]):
        if d0 == d1:
            raise DataError(f"duplicate date {d1.isoformat()} (also on line {l0})", line=l1)
    return PriceSeries(tuple(r[0] for r in rows), np.array([r[1] for r in rows], dtype=float))


def week_start(d: dt.date, convention=WeekConvention.ANCHORED_SUNDAY) -> dt.date:
    convention = WeekConvention(convention)
    if convention is WeekConvention.ANCHORED_SUNDAY:
        return d - dt.timedelta(days=(d.weekday() + 1) % 7)
    return d - dt.timedelta(days=d.weekday())


def weekly_loss_returns(prices: PriceSeries,
                        week_convention=WeekConvention.ANCHORED_SUNDAY) -> LossReturnSeries:
    conv = WeekConvention(week_convention)
    starts: list[dt.date] = []
    sums: list[float] = []
    counts: list[int] = []
    for d, p in zip(prices.dates, prices.prices):
        w = week_start(d, conv)
        if starts and starts[-1] == w:
            sums[-1] += p
            counts[-1] += 1
        else:
            starts.append(w)
            sums.append(float(p))
            counts.append(1)
    if len(starts) < 2:
        raise DomainError("need at least two nonempty weeks")
    avg = np.array(sums) / np.array(counts)
    logp = np.log(avg)
    losses = -(logp[1:] - logp[:-1])
    gap = np.array([(b - a).days > 7 for a, b in zip(starts, starts[1:])])
    return LossReturnSeries(tuple(starts[1:]), losses, gap, conv)


def load_series_csv(path: Union[str, Path], column: str = None) -> np.ndarray:
    """Read one numeric column (default: the first, or ``loss`` when present)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("file is empty") from None
        if column is None:
            column = "loss" if "loss" in header else (
                "value" if "value" in header else header[0])
        if column not in header:
            raise DataError(f"missing column {column!r}", line=1)
        idx = header.index(column)
        values = []
        for row in reader:
            if not row:
                continue
            try:
                v = float(row[idx])
            except (ValueError, IndexError):
                raise DataError(f"cannot parse value in column {column!r}", line=reader.line_num) from None
            if not math.isfinite(v):
                raise DataError("non-finite value", line=reader.line_num)
            values.append(v)
    if not values:
        raise DataError("no data rows")
    return np.array(values)


def write_series_csv(values, column: str = "value") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([column])
    for v in np.asarray(values, dtype=float):
        w.writerow([repr(float(v))])
    return buf.getvalue()
