"""Reading trapping-index series.

Input CSV columns are ``year,season,index`` with season ``spring`` or
``autumn``; the index (voles per hundred trap-nights) is turned into counts
by multiplying by 10 and rounding half-up.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal, InvalidOperation
from pathlib import Path

import numpy as np

SEASONS = ("spring", "autumn")


class ParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class ObservedSeries:
    year: np.ndarray
    season: tuple[str, ...]
    raw_index: np.ndarray
    counts: np.ndarray

    def __len__(self):
        return len(self.counts)

    def times(self, spring: float = 0.45, autumn: float = 0.70) -> np.ndarray:
        frac = {"spring": spring, "autumn": autumn}
        return np.array([y + frac[s] for y, s in zip(self.year, self.season)], dtype=float)


def index_to_count(text: str) -> int:
    """round-half-up(10 * index), computed in decimal so ties are exact."""
    return int((Decimal(text) * 10).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def load_voles_csv(path) -> ObservedSeries:
    years, seasons, raw, counts = [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["year", "season", "index"]:
            raise ParseError("header must be year,season,index", 1)
        prev = None
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", lineno)
            y_txt, s_txt, i_txt = (c.strip() for c in row)
            try:
                year = int(y_txt)
            except ValueError:
                raise ParseError(f"bad year {y_txt!r}", lineno) from None
            season = s_txt.lower()
            if season not in SEASONS:
                raise ParseError(f"season must be spring or autumn, got {s_txt!r}", lineno)
            try:
                value = Decimal(i_txt)
            except InvalidOperation:
                raise ParseError(f"bad index {i_txt!r}", lineno) from None
            if not value.is_finite() or value < 0:
                raise ParseError(f"index must be finite and non-negative, got {i_txt!r}", lineno)
            key = (year, SEASONS.index(season))
            if prev is not None and key <= prev:
                raise ParseError("rows must be ordered by year then season", lineno)
            prev = key
            years.append(year)
            seasons.append(season)
            raw.append(float(value))
            counts.append(index_to_count(i_txt))
    if not counts:
        raise ParseError("no data rows", 2)
    return ObservedSeries(np.array(years), tuple(seasons), np.array(raw), np.array(counts, dtype=np.int64))


def write_voles_csv(path, year, season, index) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "season", "index"])
        for row in zip(year, season, index):
            w.writerow(row)
