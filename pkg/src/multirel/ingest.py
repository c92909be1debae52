"""Event records -> binned directed edge-count panels, plus the panel file format.

Panel file layout (UTF-8, ``\\n`` line endings)::

    # multirel-panel v1 T=<T> edges=<n> bins=<spec or ->
    <source>,<target>,<count_1>,...,<count_T>

one row per edge, in panel order.
"""
from __future__ import annotations

import bisect
import calendar
import csv
import datetime as dt
import io
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .fileio import atomic_write_text
from .model import EdgeCountPanel


class IngestError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class EventRecord:
    source: str
    target: str
    date: dt.date
    weight: int = 1


@dataclass(frozen=True)
class EventFormat:
    """Column mapping for delimited event files (0-based column indices)."""

    delimiter: str = ","
    source_col: int = 0
    target_col: int = 1
    date_col: int = 2
    date_format: str = "%Y-%m-%d"
    weight_col: int | None = None
    header: bool = False
    max_malformed_rate: float = 0.01


# GDELT 1.0 daily event export: SQLDATE, Actor1CountryCode, Actor2CountryCode.
GDELT_FORMAT = EventFormat(delimiter="\t", source_col=7, target_col=17, date_col=1,
                           date_format="%Y%m%d")


@dataclass
class ParsedEvents:
    records: list[EventRecord] = field(default_factory=list)
    n_lines: int = 0
    malformed: list[tuple[int, str]] = field(default_factory=list)
    self_loops: int = 0
    missing_actor: int = 0

    def summary(self) -> dict:
        return {"lines": self.n_lines, "records": len(self.records),
                "malformed": len(self.malformed), "self_loops": self.self_loops,
                "missing_actor": self.missing_actor}


def parse_events(stream, fmt: EventFormat = EventFormat()) -> ParsedEvents:
    """Parse delimited event lines.

    Self-loops and rows with an empty actor code are dropped and counted.
    Unparseable rows are recorded in ``malformed``; if their share of the
    non-blank lines exceeds ``fmt.max_malformed_rate`` an IngestError is raised.
    """
    out = ParsedEvents()
    reader = csv.reader(stream, delimiter=fmt.delimiter)
    needed = max(c for c in (fmt.source_col, fmt.target_col, fmt.date_col, fmt.weight_col)
                 if c is not None)
    for lineno, row in enumerate(reader, start=1):
        if fmt.header and lineno == 1:
            continue
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        out.n_lines += 1
        if len(row) <= needed:
            out.malformed.append((lineno, f"expected > {needed} columns, got {len(row)}"))
            continue
        try:
            date = dt.datetime.strptime(row[fmt.date_col].strip(), fmt.date_format).date()
        except ValueError:
            out.malformed.append((lineno, f"bad date {row[fmt.date_col]!r}"))
            continue
        weight = 1
        if fmt.weight_col is not None:
            try:
                weight = int(row[fmt.weight_col])
            except ValueError:
                out.malformed.append((lineno, f"bad weight {row[fmt.weight_col]!r}"))
                continue
            if weight < 0:
                out.malformed.append((lineno, f"negative weight {weight}"))
                continue
        source = row[fmt.source_col].strip()
        target = row[fmt.target_col].strip()
        if not source or not target:
            out.missing_actor += 1
            continue
        if source == target:
            out.self_loops += 1
            continue
        out.records.append(EventRecord(source, target, date, weight))
    if out.n_lines and len(out.malformed) / out.n_lines > fmt.max_malformed_rate:
        shown = "; ".join(f"line {n}: {why}" for n, why in out.malformed[:5])
        raise IngestError(
            f"{len(out.malformed)} of {out.n_lines} lines malformed "
            f"(limit {fmt.max_malformed_rate:.2%}): {shown}")
    return out


def _add_months(d: dt.date, months: int) -> dt.date:
    m = d.month - 1 + months
    year, month = d.year + m // 12, m % 12 + 1
    return dt.date(year, month, min(d.day, calendar.monthrange(year, month)[1]))


@dataclass(frozen=True)
class BinningSpec:
    """Time bins over the half-open window ``[start, end)``.

    Weekly bins are 7-day blocks anchored at ``start``; a trailing block
    shorter than 4 days is dropped.  Monthly bins step by calendar month from
    ``start``; a trailing block shorter than 14 days is dropped.
    """

    granularity: str
    start: dt.date
    end: dt.date

    def __post_init__(self):
        if self.granularity not in ("daily", "weekly", "monthly"):
            raise IngestError(f"unknown granularity {self.granularity!r}")
        if not self.start < self.end:
            raise IngestError("binning window must have start < end")

    @classmethod
    def parse(cls, granularity: str, window: str) -> "BinningSpec":
        m = re.fullmatch(r"\s*(\d{4}-\d{2}-\d{2})\s*\.\.\s*(\d{4}-\d{2}-\d{2})\s*", window)
        if not m:
            raise IngestError(f"window must look like YYYY-MM-DD..YYYY-MM-DD, got {window!r}")
        try:
            start, end = (dt.date.fromisoformat(x) for x in m.groups())
        except ValueError as exc:
            raise IngestError(str(exc)) from None
        return cls(granularity, start, end)

    def __str__(self):
        return f"{self.granularity}:{self.start.isoformat()}..{self.end.isoformat()}"

    def bins(self) -> list[tuple[dt.date, dt.date]]:
        if self.granularity == "daily":
            n = (self.end - self.start).days
            return [(self.start + dt.timedelta(i), self.start + dt.timedelta(i + 1))
                    for i in range(n)]
        if self.granularity == "weekly":
            step, min_days = (lambda d, k: d + dt.timedelta(7 * k)), 4
        else:
            step, min_days = _add_months, 14
        out = []
        k = 0
        while True:
            lo, hi = step(self.start, k), step(self.start, k + 1)
            if lo >= self.end:
                break
            if hi > self.end:
                if (self.end - lo).days >= min_days:
                    out.append((lo, self.end))
                break
            out.append((lo, hi))
            k += 1
        return out

    @property
    def T(self) -> int:
        return len(self.bins())


def year_windows(start: dt.date, end: dt.date) -> list[tuple[int, dt.date, dt.date]]:
    """Split ``[start, end)`` at calendar-year boundaries."""
    out = []
    for year in range(start.year, end.year + 1):
        lo = max(start, dt.date(year, 1, 1))
        hi = min(end, dt.date(year + 1, 1, 1))
        if lo < hi:
            out.append((year, lo, hi))
    return out


def aggregate(records, binning: BinningSpec) -> EdgeCountPanel:
    """Count records per directed edge and time bin; edges sorted by (source, target)."""
    bins = binning.bins()
    if not bins:
        raise IngestError("binning window contains no complete bin")
    starts = [b[0] for b in bins]
    last_end = bins[-1][1]
    cells: Counter = Counter()
    for r in records:
        if r.date < binning.start or r.date >= last_end:
            continue
        t = bisect.bisect_right(starts, r.date) - 1
        cells[(r.source, r.target), t] += r.weight
    edges = sorted({e for e, _ in cells})
    row = {e: i for i, e in enumerate(edges)}
    counts = np.zeros((len(edges), len(bins)), dtype=np.int64)
    for (e, t), n in cells.items():
        counts[row[e], t] += n
    keep = counts.sum(axis=1) > 0
    edges = [e for e, k in zip(edges, keep) if k]
    return EdgeCountPanel(edges, counts[keep].reshape(len(edges), len(bins)),
                          bins=str(binning))


def top_k_edges(panel: EdgeCountPanel, k: int) -> EdgeCountPanel:
    """Keep the ``k`` edges with the largest total count.

    Output is ordered by descending total, ties by (source, target).
    """
    if k < 1:
        raise IngestError("top-k needs k >= 1")
    totals = panel.counts.sum(axis=1)
    order = sorted(range(panel.n_edges), key=lambda i: (-int(totals[i]), panel.edges[i]))
    return panel.subset(order[:k])


# -- panel file format ---------------------------------------------------------

_HEADER = re.compile(r"# multirel-panel v1 T=(\d+) edges=(\d+) bins=(\S+)")


def format_panel(panel: EdgeCountPanel) -> str:
    buf = io.StringIO()
    buf.write(f"# multirel-panel v1 T={panel.T} edges={panel.n_edges} "
              f"bins={panel.bins or '-'}\n")
    for (a, b), row in zip(panel.edges, panel.counts):
        buf.write(",".join([a, b, *map(str, row.tolist())]) + "\n")
    return buf.getvalue()


def write_panel(panel: EdgeCountPanel, path):
    for a, b in panel.edges:
        if "," in a or "," in b or "\n" in a + b:
            raise IngestError(f"actor codes may not contain commas or newlines: {a!r}, {b!r}")
    atomic_write_text(path, format_panel(panel))


def parse_panel(text: str) -> EdgeCountPanel:
    lines = text.splitlines()
    if not lines:
        raise IngestError("empty panel file")
    m = _HEADER.fullmatch(lines[0].strip())
    if not m:
        raise IngestError(f"bad panel header: {lines[0]!r}")
    T, n = int(m.group(1)), int(m.group(2))
    bins = None if m.group(3) == "-" else m.group(3)
    rows = [ln for ln in lines[1:] if ln.strip()]
    if len(rows) != n:
        raise IngestError(f"header promises {n} edges, file has {len(rows)}")
    edges, counts = [], np.zeros((n, T), dtype=np.int64)
    for i, ln in enumerate(rows):
        parts = ln.split(",")
        if len(parts) != T + 2:
            raise IngestError(f"panel row {i + 1}: expected {T + 2} fields, got {len(parts)}")
        edges.append((parts[0], parts[1]))
        try:
            counts[i] = [int(x) for x in parts[2:]]
        except ValueError:
            raise IngestError(f"panel row {i + 1}: non-integer count") from None
    return EdgeCountPanel(edges, counts, bins=bins)


def read_panel(path) -> EdgeCountPanel:
    with open(path, encoding="utf-8") as fh:
        return parse_panel(fh.read())
