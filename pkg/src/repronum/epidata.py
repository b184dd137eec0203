"""Readers and writers for count tables and territory graphs.

Two on-disk layouts are supported.  The wide layout is a cumulative-count
CSV: four metadata columns (subregion, territory, latitude, longitude)
followed by one column per day with ``m/d/yy`` headers; subregion rows of
one territory are summed before differencing into daily counts.  The long
layout is a tidy ``territory,date,count`` CSV with ISO dates.

Loaders return a (CountMatrix, LoadReport) pair.  The report records every
silent repair (gap fills, missing cells, subregion aggregation, negative
daily counts) so a run manifest can expose them; hard violations raise
FormatError with a 1-based line number.
"""

import csv
import datetime as _dt
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, GraphError
from .model import CountMatrix
from .operators import EpiGraph

LONG_HEADER = ("territory", "date", "count")
WIDE_METADATA_COLS = 4


@dataclass
class LoadReport:
    """What a loader did beyond plain parsing."""

    source: str = ""
    territories: int = 0
    days: int = 0
    filled_days: int = 0
    missing_cells: int = 0
    negative_daily: int = 0
    aggregated: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def warn(self, message):
        self.warnings.append(message)

    def to_dict(self):
        return {
            "source": self.source,
            "territories": self.territories,
            "days": self.days,
            "filled_days": self.filled_days,
            "missing_cells": self.missing_cells,
            "negative_daily": self.negative_daily,
            "aggregated": dict(self.aggregated),
            "warnings": list(self.warnings),
        }


def _parse_mdy(text, line):
    try:
        return _dt.datetime.strptime(text.strip(), "%m/%d/%y").date()
    except ValueError:
        raise FormatError("bad m/d/yy date header %r" % text, line=line)


def _parse_iso(text, line):
    try:
        return _dt.date.fromisoformat(text.strip())
    except ValueError:
        raise FormatError("bad ISO date %r" % text, line=line)


def _parse_number(text, line, what):
    text = text.strip()
    if not text:
        return None
    try:
        return float(text)
    except ValueError:
        raise FormatError("bad %s %r" % (what, text), line=line)


def load_cumulative_wide(path):
    """Load a wide cumulative-count CSV and difference it into daily counts.

    Rows sharing a territory name (second column) are summed before
    differencing, so subregion splits never produce spurious negatives.
    The first day's count is the first cumulative value.  Negative daily
    counts (reporting corrections) are preserved and tallied in the report.
    Date columns must be strictly increasing; interior calendar gaps are
    filled by carrying the cumulative value forward (a zero daily count).

    Returns
    -------
    (CountMatrix, LoadReport)
    """
    report = LoadReport(source=str(path))
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError("empty file", line=1)
    header = rows[0]
    if len(header) < WIDE_METADATA_COLS + 1:
        raise FormatError(
            "wide header needs %d metadata columns plus at least one date"
            % WIDE_METADATA_COLS,
            line=1,
        )
    dates = [_parse_mdy(h, 1) for h in header[WIDE_METADATA_COLS:]]
    for a, b in zip(dates, dates[1:]):
        if b <= a:
            raise FormatError(
                "date columns must be strictly increasing (%s then %s)" % (a, b),
                line=1,
            )

    territories = []
    cumulative = {}
    for i, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise FormatError(
                "expected %d fields, found %d" % (len(header), len(row)), line=i
            )
        name = row[1].strip()
        if not name:
            raise FormatError("empty territory name", line=i)
        vals = np.empty(len(dates))
        for j, cell in enumerate(row[WIDE_METADATA_COLS:]):
            v = _parse_number(cell, i, "count")
            if v is None:
                v = 0.0
                report.missing_cells += 1
            vals[j] = v
        if name not in cumulative:
            territories.append(name)
            cumulative[name] = vals
            report.aggregated[name] = 1
        else:
            cumulative[name] = cumulative[name] + vals
            report.aggregated[name] += 1
    if not territories:
        raise FormatError("no data rows", line=2)
    if report.missing_cells:
        report.warn("%d empty cumulative cells treated as 0" % report.missing_cells)
    report.aggregated = {k: n for k, n in report.aggregated.items() if n > 1}
    for name, n in report.aggregated.items():
        report.warn("summed %d subregion rows for %r" % (n, name))

    # fill interior calendar gaps by carrying the cumulative value forward
    full_dates = [
        dates[0] + _dt.timedelta(days=k)
        for k in range((dates[-1] - dates[0]).days + 1)
    ]
    if len(full_dates) != len(dates):
        report.filled_days = len(full_dates) - len(dates)
        report.warn("filled %d missing calendar days" % report.filled_days)
        index = {d: j for j, d in enumerate(dates)}
        filled = {}
        for name in territories:
            src = cumulative[name]
            out = np.empty(len(full_dates))
            last = 0.0
            for j, d in enumerate(full_dates):
                if d in index:
                    last = src[index[d]]
                out[j] = last
            filled[name] = out
        cumulative = filled

    cum = np.stack([cumulative[name] for name in territories])
    daily = np.empty_like(cum)
    daily[:, 0] = cum[:, 0]
    daily[:, 1:] = np.diff(cum, axis=1)
    report.negative_daily = int((daily < 0).sum())
    if report.negative_daily:
        report.warn(
            "%d negative daily counts preserved from cumulative corrections"
            % report.negative_daily
        )
    matrix = CountMatrix(values=daily, territories=tuple(territories), dates=tuple(full_dates))
    report.territories, report.days = matrix.values.shape
    return matrix, report


def load_daily_long(path):
    """Load a tidy ``territory,date,count`` CSV of daily counts.

    Territory order follows first appearance.  The date axis is the full
    calendar range between the earliest and latest date seen anywhere;
    missing (territory, day) cells become 0 and are tallied in the report.
    A repeated (territory, date) pair is a hard error.

    Returns
    -------
    (CountMatrix, LoadReport)
    """
    report = LoadReport(source=str(path))
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError("empty file", line=1)
    header = tuple(c.strip().lower() for c in rows[0])
    if header != LONG_HEADER:
        raise FormatError(
            "expected header %s, found %r" % (",".join(LONG_HEADER), ",".join(rows[0])),
            line=1,
        )
    territories = []
    seen = set()
    cells = {}
    for i, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise FormatError("expected 3 fields, found %d" % len(row), line=i)
        name = row[0].strip()
        if not name:
            raise FormatError("empty territory name", line=i)
        day = _parse_iso(row[1], i)
        value = _parse_number(row[2], i, "count")
        if value is None:
            raise FormatError("empty count", line=i)
        key = (name, day)
        if key in cells:
            raise FormatError("duplicate entry for %r on %s" % (name, day), line=i)
        if name not in seen:
            seen.add(name)
            territories.append(name)
        cells[key] = value
    if not cells:
        raise FormatError("no data rows", line=2)

    first = min(day for _, day in cells)
    last = max(day for _, day in cells)
    all_days = [first + _dt.timedelta(days=k) for k in range((last - first).days + 1)]
    values = np.zeros((len(territories), len(all_days)))
    missing = 0
    for d, name in enumerate(territories):
        for t, day in enumerate(all_days):
            v = cells.get((name, day))
            if v is None:
                missing += 1
            else:
                values[d, t] = v
    report.missing_cells = missing
    if missing:
        report.warn("%d missing territory-day cells treated as 0" % missing)
    report.negative_daily = int((values < 0).sum())
    matrix = CountMatrix(values=values, territories=tuple(territories), dates=tuple(all_days))
    report.territories, report.days = matrix.values.shape
    return matrix, report


def load_counts(path, format):
    """Dispatch on ``format`` in {"wide", "long"}."""
    if format == "wide":
        return load_cumulative_wide(path)
    if format == "long":
        return load_daily_long(path)
    raise FormatError("unknown input format %r (expected 'wide' or 'long')" % format)


def _format_value(v):
    v = float(v)
    if v.is_integer() and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def write_long(path, matrix, value_name="count"):
    """Write a CountMatrix in the long layout.

    Integer-valued entries are written without a decimal point; other
    values use ``repr`` so a load/write cycle is lossless.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["territory", "date", value_name])
        for d, name in enumerate(matrix.territories):
            for t, day in enumerate(matrix.dates):
                writer.writerow([name, day.isoformat(), _format_value(matrix.values[d, t])])


def load_graph(path, num_vertices=None):
    """Load a territory graph.

    The first line is ``D=<int>``; every following non-empty line is an
    edge ``i,j`` of 1-based vertex indices.  Self loops, repeated edges
    (in either orientation), and out-of-range indices are errors carrying
    the offending line number.  ``num_vertices``, when given, must match
    the header.
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].strip():
        raise GraphError("missing D=<int> header", line=1)
    head = lines[0].strip()
    if not head.startswith("D="):
        raise GraphError("first line must be D=<int>, found %r" % head, line=1)
    try:
        D = int(head[2:])
    except ValueError:
        raise GraphError("bad vertex count %r" % head[2:], line=1)
    if D < 1:
        raise GraphError("vertex count must be positive", line=1)
    if num_vertices is not None and D != num_vertices:
        raise GraphError(
            "graph is over %d vertices but the data has %d territories"
            % (D, num_vertices),
            line=1,
        )
    tails, heads, seen = [], [], set()
    for i, raw in enumerate(lines[1:], start=2):
        text = raw.strip()
        if not text:
            continue
        parts = text.split(",")
        if len(parts) != 2:
            raise GraphError("expected 'i,j', found %r" % raw, line=i)
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError:
            raise GraphError("non-integer vertex in %r" % raw, line=i)
        if not (1 <= a <= D and 1 <= b <= D):
            raise GraphError(
                "vertex out of range 1..%d in %r" % (D, raw), line=i
            )
        if a == b:
            raise GraphError("self loop at vertex %d" % a, line=i)
        key = (min(a, b), max(a, b))
        if key in seen:
            raise GraphError("duplicate edge %d,%d" % (a, b), line=i)
        seen.add(key)
        tails.append(a - 1)
        heads.append(b - 1)
    return EpiGraph(
        num_vertices=D,
        edge_tail=np.asarray(tails, dtype=np.int64),
        edge_head=np.asarray(heads, dtype=np.int64),
    )
