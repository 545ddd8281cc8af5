"""World emissions pathway vs. exponential ICT growth, plus carbon-budget arithmetic.

Emissions are in MtCO2/yr at annual resolution. The default world pathway
(SSP1-1.9, clipped at net zero) ships as ``data/ssp1_19.csv``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from ssdc.errors import DomainError, RangeError

# Transient climate response to cumulative CO2 emissions (degC per GtCO2).
WARMING_PER_GT = 0.45 / 1000.0

# Default ICT base: ~3% of 2010 world CO2 (midpoint of the 2.1-3.9% GHG range).
DEFAULT_BASE_YEAR = 2010
DEFAULT_BASE_VALUE = 1100.0

DATA_DIR = Path(__file__).parent / "data"
DEFAULT_PATHWAY = DATA_DIR / "ssp1_19.csv"


@dataclass(frozen=True)
class PathwayAnchors:
    points: tuple[tuple[int, float], ...]
    name: str = "pathway"

    def __post_init__(self):
        pts = tuple((int(y), float(v)) for y, v in self.points)
        if len(pts) < 2:
            raise DomainError("a pathway needs at least 2 anchor points")
        for (y0, _), (y1, _) in zip(pts, pts[1:]):
            if y1 <= y0:
                raise DomainError(f"anchor years must be strictly increasing ({y0} then {y1})")
        if any(v < 0 for _, v in pts):
            raise DomainError("anchor emissions must be >= 0")
        object.__setattr__(self, "points", pts)

    @property
    def first_year(self) -> int:
        return self.points[0][0]

    @property
    def last_year(self) -> int:
        return self.points[-1][0]


@dataclass(frozen=True)
class TrajectorySeries:
    start_year: int
    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise DomainError("a trajectory series cannot be empty")
        if any(v < 0 for v in vals):
            raise DomainError("trajectory values must be >= 0")
        object.__setattr__(self, "values", vals)

    @property
    def years(self) -> list[int]:
        return [self.start_year + k for k in range(len(self.values))]

    def __len__(self):
        return len(self.values)

    def at(self, year: int) -> float:
        k = year - self.start_year
        if not 0 <= k < len(self.values):
            raise RangeError(f"year {year} outside series")
        return self.values[k]


def load_pathway(path: str | Path = DEFAULT_PATHWAY, name: str | None = None) -> PathwayAnchors:
    """Read a ``year,emissions_Mt`` CSV; a header row and ``#`` comments are skipped."""
    path = Path(path)
    points = []
    with path.open(newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                points.append((int(row[0]), float(row[1])))
            except ValueError:
                if points:
                    raise DomainError(f"{path}: malformed row {row!r}") from None
                continue  # header
    return PathwayAnchors(tuple(points), name=name or path.stem)


def interpolate_pathway(anchors: PathwayAnchors, start_year: int, end_year: int) -> TrajectorySeries:
    """Piecewise-linear values at every integer year in ``[start_year, end_year]``."""
    if start_year < anchors.first_year or end_year > anchors.last_year:
        raise RangeError(
            f"[{start_year}, {end_year}] outside anchors [{anchors.first_year}, {anchors.last_year}]"
        )
    if end_year < start_year:
        raise RangeError("end_year before start_year")
    pts = anchors.points
    values = []
    seg = 0
    for year in range(start_year, end_year + 1):
        while pts[seg + 1][0] < year:
            seg += 1
        (y0, v0), (y1, v1) = pts[seg], pts[seg + 1]
        if year == y0:
            values.append(v0)
        elif year == y1:
            values.append(v1)
        else:
            values.append(v0 + (v1 - v0) * (year - y0) / (y1 - y0))
    return TrajectorySeries(start_year, tuple(values))


def project_ict_emissions(base_year: int, base_value: float, growth_rate: float, n_years: int) -> TrajectorySeries:
    """Compound growth ``base_value * (1 + growth_rate)**k`` for k = 0..n_years."""
    if growth_rate < -1:
        raise DomainError("growth_rate must be >= -1")
    if base_value < 0:
        raise DomainError("base_value must be >= 0")
    if n_years < 0:
        raise DomainError("n_years must be >= 0")
    factor = 1.0 + growth_rate
    return TrajectorySeries(base_year, tuple(base_value * factor**k for k in range(n_years + 1)))


def share_series(world: TrajectorySeries, ict: TrajectorySeries) -> list[float]:
    """ICT as a percentage of world emissions; ``inf`` where the world is at zero.

    Values above 100 are kept: the overshoot is the finding.
    """
    if world.start_year != ict.start_year or len(world) != len(ict):
        raise RangeError("world and ict series must cover the same years")
    out = []
    for w, i in zip(world.values, ict.values):
        out.append(100.0 * i / w if w > 0 else math.inf)
    return out


def budget_exhaustion_years(budget: float, annual: float) -> float:
    """Years until a carbon budget (GtCO2) is spent at a constant annual rate."""
    if annual <= 0:
        raise DomainError("annual emissions must be > 0")
    if budget < 0:
        raise DomainError("budget must be >= 0")
    return budget / annual


def warming_from_emissions(cumulative: float) -> float:
    """Warming in degC for cumulative emissions in GtCO2."""
    if cumulative < 0:
        raise DomainError("cumulative emissions must be >= 0")
    return WARMING_PER_GT * cumulative


def net_zero_year(series: TrajectorySeries) -> int | None:
    for year, v in zip(series.years, series.values):
        if v == 0:
            return year
    return None


def trajectory_table(
    anchors: PathwayAnchors,
    growth_rate: float,
    base_year: int = DEFAULT_BASE_YEAR,
    base_value: float = DEFAULT_BASE_VALUE,
    end_year: int | None = None,
) -> list[tuple[int, float, float, float]]:
    """Rows of ``(year, world_Mt, ict_Mt, share_pct)`` from ``base_year`` on."""
    end_year = anchors.last_year if end_year is None else end_year
    world = interpolate_pathway(anchors, base_year, end_year)
    ict = project_ict_emissions(base_year, base_value, growth_rate, end_year - base_year)
    share = share_series(world, ict)
    return list(zip(world.years, world.values, ict.values, share))


def write_table(rows: Iterable[Sequence], fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["year", "world_Mt", "ict_Mt", "share_pct"])
    for year, w, i, s in rows:
        writer.writerow([year, _fmt(w), _fmt(i), "inf" if math.isinf(s) else _fmt(s)])


def _fmt(x: float) -> str:
    return f"{x:.4f}"
