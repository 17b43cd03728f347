"""Timestamp literal parsing, year shifting and prose rendering.

Accepted literal shapes: ``1955``, ``1935-01``, ``1935-01-15`` and the
Wikidata form ``+1935-01-15T00:00:00Z``.  Negative years are BCE.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

MONTHS = ("January", "February", "March", "April", "May", "June", "July",
          "August", "September", "October", "November", "December")

_TS = re.compile(r"^([+-]?)(\d{1,9})(?:-(\d{2})(?:-(\d{2}))?)?(T[0-9:]+Z?)?$")


class TimestampError(ValueError):
    pass


@dataclass(frozen=True)
class Timestamp:
    year: int
    month: int | None = None
    day: int | None = None
    # formatting details of the source literal
    width: int = field(default=4, compare=False)
    plus: bool = field(default=False, compare=False)
    suffix: str = field(default="", compare=False)

    def key(self) -> tuple[int, int, int]:
        return (self.year, self.month or 0, self.day or 0)

    def format(self) -> str:
        sign = "-" if self.year < 0 else ("+" if self.plus else "")
        out = f"{sign}{abs(self.year):0{self.width}d}"
        if self.month is not None:
            out += f"-{self.month:02d}"
            if self.day is not None:
                out += f"-{self.day:02d}"
        return out + self.suffix


def parse_timestamp(value: str) -> Timestamp:
    m = _TS.match(value.strip())
    if not m:
        raise TimestampError(f"unparseable timestamp {value!r}")
    sign, digits, month, day, suffix = m.groups()
    year = int(digits) * (-1 if sign == "-" else 1)
    mo = int(month) if month else None
    dy = int(day) if day else None
    if mo is not None and not 0 <= mo <= 12 or dy is not None and not 0 <= dy <= 31:
        raise TimestampError(f"month/day out of range in {value!r}")
    # Wikidata pads unknown month/day with 00
    if mo == 0:
        mo, dy = None, None
    if dy == 0:
        dy = None
    return Timestamp(year, mo, dy, width=len(digits), plus=sign == "+", suffix=suffix or "")


def shift_year(value: str, delta_years: int) -> str:
    """Add ``delta_years`` to the year field; month and day are kept as written."""
    ts = parse_timestamp(value)
    if ts.month is None and ts.day is None and not ts.suffix and not ts.plus and ts.year >= 0:
        # year-only literals shift as plain integers
        return str(ts.year + delta_years)
    shifted = Timestamp(ts.year + delta_years, ts.month, ts.day, ts.width, ts.plus, ts.suffix)
    return shifted.format()


def render_timestamp(value: str) -> str:
    """Prose form: ``15 January 1935``, ``January 1935`` or ``1935``."""
    ts = parse_timestamp(value)
    year = f"{-ts.year} BCE" if ts.year < 0 else str(ts.year)
    if ts.month is None:
        return year
    if ts.day is None:
        return f"{MONTHS[ts.month - 1]} {year}"
    return f"{ts.day} {MONTHS[ts.month - 1]} {year}"


def timestamp_variants(value: str) -> set[str]:
    """Surface forms a reader might use for the same timestamp."""
    ts = parse_timestamp(value)
    out = {render_timestamp(value), ts.format(), ts.format().lstrip("+")}
    year = str(ts.year)
    if ts.month is None:
        out |= {year, f"{year} (year)"}
    elif ts.day is None:
        out |= {f"{ts.year}-{ts.month:02d}"}
    else:
        month = MONTHS[ts.month - 1]
        out |= {f"{month} {ts.day}, {ts.year}", f"{ts.year}-{ts.month:02d}-{ts.day:02d}"}
    return out
