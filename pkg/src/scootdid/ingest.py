"""Demand-panel and mobility-trace ingestion.

Covers four inputs: the zone-level transit count panel, raw scooter GPS
streams, the census table, and per-person transit trip logs. Everything is
validated on the way in; downstream code can assume clean labels and counts.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from datetime import datetime
from typing import Iterable, Sequence

import numpy as np

from ._util import fmt_float
from .errors import (
    DuplicateKeyError,
    MissingZoneError,
    NegativeCountError,
    UnknownLabelError,
    UnsortedStreamError,
    ZeroPopulationWarning,
)
from .geodata import Trajectory, ZoneSet

# --- categorical vocabularies (canonical orders used everywhere) ---

PERIODS = ("Pre", "Post")
DAY_TYPES = ("MonThu", "Friday", "Saturday", "Sunday")
TIME_BLOCKS = ("MorningPeak", "MorningValley", "Lunch", "AfternoonValley",
               "AfternoonPeak", "NightValley", "Night")
MODES = ("Bus", "Metro", "BusOrMetro")
DIRECTIONS = ("Boarding", "Alighting")

# Inclusive [start, end] bounds in seconds-of-day at 1 s resolution; the last
# block wraps past midnight. Together the blocks tile all 86400 seconds.
_BLOCK_BOUNDS = (
    ("MorningPeak", 6 * 3600 + 60, 9 * 3600 + 59),
    ("MorningValley", 9 * 3600 + 60, 12 * 3600 + 59),
    ("Lunch", 12 * 3600 + 60, 14 * 3600 + 59),
    ("AfternoonValley", 14 * 3600 + 60, 17 * 3600 + 30 * 60 + 59),
    ("AfternoonPeak", 17 * 3600 + 31 * 60, 20 * 3600 + 30 * 60 + 59),
    ("NightValley", 20 * 3600 + 31 * 60, 23 * 3600 + 59),
    ("Night", 23 * 3600 + 60, 6 * 3600 + 59),  # wraps
)

BLOCK_HOURS = (3.0, 3.0, 2.0, 3.5, 3.0, 2.5, 7.0)

_PERIOD_CODE = {s: i for i, s in enumerate(PERIODS)}
_DAY_CODE = {s: i for i, s in enumerate(DAY_TYPES)}
_BLOCK_CODE = {s: i for i, s in enumerate(TIME_BLOCKS)}
_MODE_CODE = {s: i for i, s in enumerate(MODES)}
_DIRECTION_CODE = {s: i for i, s in enumerate(DIRECTIONS)}

PANEL_HEADER = ("zone_id", "period", "day_type", "time_block", "mode",
                "direction", "count")


def block_of_second(second_of_day: float) -> int:
    """Map a time of day (seconds, sub-second floored) to its block code."""
    s = int(second_of_day) % 86400
    for code, (_, lo, hi) in enumerate(_BLOCK_BOUNDS[:-1]):
        if lo <= s <= hi:
            return code
    return len(TIME_BLOCKS) - 1  # Night wraps around midnight


def day_type_of_date(d) -> int:
    """MonThu / Friday / Saturday / Sunday code for a date."""
    wd = d.weekday()
    if wd <= 3:
        return 0
    return wd - 3


def _code(label: str, table: dict, what: str) -> int:
    try:
        return table[label]
    except KeyError:
        raise UnknownLabelError(f"unknown {what} label {label!r}") from None


@dataclass(frozen=True)
class CountRecord:
    """One panel cell; ``count`` is the representative-day boarding or
    alighting total for the cell and divides by ``exposure_hours`` to give
    trips per hour."""

    zone_id: str
    period: str
    day_type: str
    time_block: str
    mode: str
    direction: str
    count: int
    exposure_hours: float


class ObservationPanel:
    """Columnar panel of count cells, canonically sorted and key-unique."""

    def __init__(self, zone_ids: Sequence[str], zone_idx, period, day, block,
                 mode, direction, count):
        self.zone_ids = tuple(str(z) for z in zone_ids)
        arrays = [np.asarray(a) for a in
                  (zone_idx, period, day, block, mode, direction)]
        count = np.asarray(count, dtype=np.int64)
        if np.any(count < 0):
            bad = int(np.argmax(count < 0))
            raise NegativeCountError(f"negative count in record {bad}")
        order = np.lexsort(tuple(reversed([a for a in arrays])))
        self.zone_idx = arrays[0][order].astype(np.int32)
        self.period = arrays[1][order].astype(np.int8)
        self.day = arrays[2][order].astype(np.int8)
        self.block = arrays[3][order].astype(np.int8)
        self.mode = arrays[4][order].astype(np.int8)
        self.direction = arrays[5][order].astype(np.int8)
        self.count = count[order]
        self.gen = None  # synthetic provenance, set by the generator only
        key = np.stack([self.zone_idx, self.period, self.day, self.block,
                        self.mode, self.direction], axis=1)
        if len(key) and len(np.unique(key, axis=0)) != len(key):
            raise DuplicateKeyError("duplicate (zone, period, day, block, mode, "
                                    "direction) cell in panel")

    def __len__(self) -> int:
        return len(self.count)

    @property
    def exposure_hours(self) -> np.ndarray:
        return np.asarray(BLOCK_HOURS, dtype=float)[self.block]

    def records(self) -> Iterable[CountRecord]:
        for t in range(len(self)):
            yield CountRecord(
                zone_id=self.zone_ids[self.zone_idx[t]],
                period=PERIODS[self.period[t]],
                day_type=DAY_TYPES[self.day[t]],
                time_block=TIME_BLOCKS[self.block[t]],
                mode=MODES[self.mode[t]],
                direction=DIRECTIONS[self.direction[t]],
                count=int(self.count[t]),
                exposure_hours=BLOCK_HOURS[self.block[t]],
            )

    def subset(self, mask: np.ndarray) -> "ObservationPanel":
        return ObservationPanel(self.zone_ids, self.zone_idx[mask],
                                self.period[mask], self.day[mask],
                                self.block[mask], self.mode[mask],
                                self.direction[mask], self.count[mask])

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            fh.write(",".join(PANEL_HEADER) + "\n")
            for r in self.records():
                fh.write(f"{r.zone_id},{r.period},{r.day_type},{r.time_block},"
                         f"{r.mode},{r.direction},{r.count}\n")


def panel_from_records(rows: Iterable[tuple]) -> ObservationPanel:
    """Build a panel from (zone_id, period, day, block, mode, direction,
    count) label tuples."""
    zone_ids: list[str] = []
    zone_pos: dict[str, int] = {}
    cols: list[list] = [[], [], [], [], [], [], []]
    for row in rows:
        zid, period, day, block, mode, direction, count = row
        zid = str(zid)
        if zid not in zone_pos:
            zone_pos[zid] = len(zone_ids)
            zone_ids.append(zid)
        cols[0].append(zone_pos[zid])
        cols[1].append(_code(period, _PERIOD_CODE, "period"))
        cols[2].append(_code(day, _DAY_CODE, "day_type"))
        cols[3].append(_code(block, _BLOCK_CODE, "time_block"))
        cols[4].append(_code(mode, _MODE_CODE, "mode"))
        cols[5].append(_code(direction, _DIRECTION_CODE, "direction"))
        try:
            c = int(count)
        except (TypeError, ValueError):
            raise NegativeCountError(f"count {count!r} is not an integer") from None
        cols[6].append(c)
    return ObservationPanel(zone_ids, *cols)


def load_count_panel(path: str) -> ObservationPanel:
    """Read the aggregated demand panel CSV (see PANEL_HEADER for columns)."""
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != PANEL_HEADER:
            raise UnknownLabelError(
                f"panel header must be {','.join(PANEL_HEADER)}")
        return panel_from_records(tuple(row) for row in reader if row)


# --- GPS trip extraction ---


@dataclass(frozen=True)
class ScooterTrip:
    """One extracted scooter trip with its source polyline."""

    device_id: str
    start_ts: float  # seconds since 1970-01-01T00:00:00 (naive clock)
    end_ts: float
    origin: tuple[float, float]
    destination: tuple[float, float]
    distance_m: float
    path: Trajectory

    @property
    def day(self) -> int:
        return int(self.start_ts // 86400)


_EPOCH = datetime(1970, 1, 1)


def parse_iso_ts(s: str) -> float:
    """Naive ISO8601 timestamp to clock seconds (no timezone shifts)."""
    return (datetime.fromisoformat(s) - _EPOCH).total_seconds()


def format_iso_ts(ts: float) -> str:
    days, rem = divmod(int(round(ts)), 86400)
    h, rem = divmod(rem, 3600)
    m, s = divmod(rem, 60)
    d = datetime.fromordinal(_EPOCH.toordinal() + days)
    return f"{d.year:04d}-{d.month:02d}-{d.day:02d}T{h:02d}:{m:02d}:{s:02d}"


def _find_stays(pts: np.ndarray, ts: np.ndarray, stop_gap_s: float,
                min_move_m: float) -> list[tuple[int, int]]:
    """Anchor-based stay detection: a stay is a maximal window that never
    leaves ``min_move_m`` of its anchor and lasts at least ``stop_gap_s``."""
    m = len(ts)
    stays = []
    i = 0
    while i < m - 1:
        j = i + 1
        while j < m and math.hypot(pts[j, 0] - pts[i, 0],
                                   pts[j, 1] - pts[i, 1]) < min_move_m:
            j += 1
        end = j - 1  # last point still inside the anchor radius
        if end > i and ts[end] - ts[i] >= stop_gap_s:
            stays.append((i, end))
            i = j
        else:
            i += 1
    return stays


def extract_trips(points_by_device: dict[str, tuple[np.ndarray, np.ndarray]],
                  stop_gap_s: float = 300.0, min_move_m: float = 50.0,
                  max_speed_mps: float = 8.0) -> list[ScooterTrip]:
    """Segment per-device GPS streams into trips.

    A stay (parked period) is any window that remains within ``min_move_m``
    of its first point for at least ``stop_gap_s``; data gaps while parked
    fall out of the same rule. Trips are the runs between stays; a run only
    counts when it has two or more points and net displacement of at least
    ``min_move_m``. Runs containing any inter-point speed above
    ``max_speed_mps`` are treated as service relocations and dropped.
    """
    trips: list[ScooterTrip] = []
    for device_id in points_by_device:
        pts, ts = points_by_device[device_id]
        pts = np.asarray(pts, dtype=float)
        ts = np.asarray(ts, dtype=float)
        if len(ts) and not np.all(np.diff(ts) > 0):
            raise UnsortedStreamError(
                f"device {device_id}: timestamps must strictly increase")
        if len(ts) < 2:
            continue
        stays = _find_stays(pts, ts, stop_gap_s, min_move_m)
        # candidate runs live between consecutive stays (stay endpoints are
        # the parked locations, so they bound the runs)
        bounds = [0]
        for a, b in stays:
            bounds += [a, b]
        bounds.append(len(ts) - 1)
        for u, v in zip(bounds[0::2], bounds[1::2]):
            if v <= u:
                continue
            seg_pts = pts[u:v + 1]
            seg_ts = ts[u:v + 1]
            net = math.hypot(seg_pts[-1, 0] - seg_pts[0, 0],
                             seg_pts[-1, 1] - seg_pts[0, 1])
            if net < min_move_m:
                continue
            step = np.hypot(*np.diff(seg_pts, axis=0).T)
            speed = step / np.diff(seg_ts)
            if np.any(speed > max_speed_mps):
                continue  # relocation by service staff
            trips.append(ScooterTrip(
                device_id=device_id,
                start_ts=float(seg_ts[0]),
                end_ts=float(seg_ts[-1]),
                origin=(float(seg_pts[0, 0]), float(seg_pts[0, 1])),
                destination=(float(seg_pts[-1, 0]), float(seg_pts[-1, 1])),
                distance_m=float(np.sum(step)),
                path=Trajectory(seg_pts.copy(), seg_ts.copy()),
            ))
    trips.sort(key=lambda t: (t.start_ts, t.device_id, t.end_ts))
    return trips


def load_gps_csv(path: str) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Read device_id,timestamp_iso8601,x_m,y_m rows grouped per device."""
    per_device: dict[str, tuple[list, list]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ("device_id", "timestamp_iso8601", "x_m", "y_m")
        if header is None or tuple(h.strip() for h in header) != expected:
            raise UnknownLabelError(f"gps header must be {','.join(expected)}")
        for row in reader:
            if not row:
                continue
            dev, iso, x, y = row
            slot = per_device.setdefault(dev, ([], []))
            slot[0].append((float(x), float(y)))
            slot[1].append(parse_iso_ts(iso))
    return {dev: (np.array(p, dtype=float), np.array(t, dtype=float))
            for dev, (p, t) in per_device.items()}


# --- scooter flows ---


@dataclass
class FlowTable:
    """Mean daily scooter trip starts/ends per zone, plus out-of-zone tallies."""

    zone_ids: tuple[str, ...]
    origin_mean: np.ndarray
    dest_mean: np.ndarray
    origin_total: np.ndarray
    dest_total: np.ndarray
    outside_origins: int
    outside_destinations: int
    n_days: int
    n_trips: int

    def write_csv(self, path: str) -> None:
        rows = [(zid, fmt_float(self.origin_mean[i]), fmt_float(self.dest_mean[i]),
                 int(self.origin_total[i]), int(self.dest_total[i]))
                for i, zid in enumerate(self.zone_ids)]
        from ._util import write_csv
        write_csv(path, ("zone_id", "origin_mean_per_day", "dest_mean_per_day",
                         "origin_total", "dest_total"), rows)


def scooter_zone_flows(trips: Sequence[ScooterTrip], zones: ZoneSet,
                       n_days: int | None = None) -> FlowTable:
    """Aggregate trip endpoints to per-zone daily means.

    Boundary endpoints go to the lowest zone index; endpoints outside every
    zone are tallied, not dropped silently. ``n_days`` defaults to the number
    of distinct trip dates.
    """
    n = len(zones)
    origin_total = np.zeros(n, dtype=np.int64)
    dest_total = np.zeros(n, dtype=np.int64)
    outside_o = outside_d = 0
    days = set()
    for t in trips:
        days.add(t.day)
        zi = zones.zone_of_point(*t.origin)
        if zi is None:
            outside_o += 1
        else:
            origin_total[zi] += 1
        zi = zones.zone_of_point(*t.destination)
        if zi is None:
            outside_d += 1
        else:
            dest_total[zi] += 1
    if n_days is None:
        n_days = max(len(days), 1)
    if n_days <= 0:
        raise ValueError("n_days must be positive")
    return FlowTable(
        zone_ids=zones.ids,
        origin_mean=origin_total / n_days,
        dest_mean=dest_total / n_days,
        origin_total=origin_total,
        dest_total=dest_total,
        outside_origins=outside_o,
        outside_destinations=outside_d,
        n_days=int(n_days),
        n_trips=len(trips),
    )


# --- zone feature table ---

FEATURE_COLUMNS = (
    "under_age_pop", "working_pop", "retired_pop", "female_pop",
    "avg_educ_years", "bus_stops", "bus_stop_density", "bus_stops_per_1000",
    "pop_density", "avg_trips_per_person", "avg_first_trip_hour",
    "avg_trip_distance_m",
)


@dataclass(frozen=True)
class CensusRow:
    pop_total: float
    pop_under18: float
    pop_18_65: float
    pop_over65: float
    pop_female: float
    avg_educ_years: float


CENSUS_HEADER = ("zone_id", "pop_total", "pop_under18", "pop_18_65",
                 "pop_over65", "pop_female", "avg_educ_years")


def load_census(path: str) -> dict[str, CensusRow]:
    out: dict[str, CensusRow] = {}
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CENSUS_HEADER:
            raise UnknownLabelError(f"census header must be {','.join(CENSUS_HEADER)}")
        for row in reader:
            if not row:
                continue
            zid = row[0]
            if zid in out:
                raise DuplicateKeyError(f"duplicate census row for zone {zid!r}")
            out[zid] = CensusRow(*(float(v) for v in row[1:]))
    return out


@dataclass(frozen=True)
class PersonTrip:
    person_id: str
    date: str  # YYYY-MM-DD
    hour: float  # fractional boarding hour
    origin_zone_id: str
    distance_m: float


PERSON_TRIPS_HEADER = ("person_id", "date", "time", "origin_zone_id", "distance_m")


def load_person_trips(path: str) -> list[PersonTrip]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != PERSON_TRIPS_HEADER:
            raise UnknownLabelError(
                f"person trips header must be {','.join(PERSON_TRIPS_HEADER)}")
        for row in reader:
            if not row:
                continue
            pid, date, time_s, zid, dist = row
            h, m, s = (int(p) for p in time_s.split(":"))
            out.append(PersonTrip(pid, date, h + m / 60 + s / 3600, zid, float(dist)))
    return out


STOPS_HEADER = ("stop_id", "x_m", "y_m")


def load_stops(path: str) -> np.ndarray:
    pts = []
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != STOPS_HEADER:
            raise UnknownLabelError(f"stops header must be {','.join(STOPS_HEADER)}")
        for row in reader:
            if row:
                pts.append((float(row[1]), float(row[2])))
    return np.array(pts, dtype=float).reshape(-1, 2)


METRO_HEADER = ("line", "x_m", "y_m")


def load_metro_stops(path: str) -> list[tuple[str, float, float]]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != METRO_HEADER:
            raise UnknownLabelError(f"metro header must be {','.join(METRO_HEADER)}")
        for row in reader:
            if row:
                out.append((row[0], float(row[1]), float(row[2])))
    return out


class FeatureTable:
    """Per-zone feature matrix in FEATURE_COLUMNS order (NaN = undefined)."""

    def __init__(self, zone_ids: Sequence[str], values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.shape != (len(zone_ids), len(FEATURE_COLUMNS)):
            raise ValueError("feature matrix shape mismatch")
        self.zone_ids = tuple(zone_ids)
        self.values = values

    def column(self, name: str) -> np.ndarray:
        return self.values[:, FEATURE_COLUMNS.index(name)]

    def matrix(self, columns: Sequence[str]) -> np.ndarray:
        idx = [FEATURE_COLUMNS.index(c) for c in columns]
        return self.values[:, idx]

    def valid_rows(self) -> np.ndarray:
        return ~np.any(np.isnan(self.values), axis=1)

    def write_csv(self, path: str) -> None:
        from ._util import write_csv
        rows = [(zid, *(fmt_float(v) for v in self.values[i]))
                for i, zid in enumerate(self.zone_ids)]
        write_csv(path, ("zone_id", *FEATURE_COLUMNS), rows)


def build_features(zones: ZoneSet, census: dict[str, CensusRow],
                   stops: np.ndarray,
                   person_trips: Sequence[PersonTrip]) -> FeatureTable:
    """Assemble the 12 screening features per zone.

    Demographic shares come from the census, stop features from bus stop
    points, and travel-behavior features from per-person transit trip logs
    (each person-day is anchored to the origin zone of its first trip).
    """
    n = len(zones)
    vals = np.full((n, len(FEATURE_COLUMNS)), np.nan)

    stop_count = np.zeros(n)
    for x, y in np.asarray(stops, dtype=float).reshape(-1, 2):
        zi = zones.zone_of_point(x, y)
        if zi is not None:
            stop_count[zi] += 1

    # person-day aggregation keyed by first-trip origin zone
    by_person_day: dict[tuple[str, str], list[PersonTrip]] = {}
    for t in person_trips:
        by_person_day.setdefault((t.person_id, t.date), []).append(t)
    pd_trips = np.zeros(n)
    pd_first = np.zeros(n)
    pd_n = np.zeros(n)
    dist_sum = np.zeros(n)
    dist_n = np.zeros(n)
    for key in sorted(by_person_day):
        day_trips = sorted(by_person_day[key], key=lambda t: t.hour)
        first = day_trips[0]
        if first.origin_zone_id not in zones.index_of:
            raise MissingZoneError(f"person trip references unknown zone "
                                   f"{first.origin_zone_id!r}")
        zi = zones.index_of[first.origin_zone_id]
        pd_trips[zi] += len(day_trips)
        pd_first[zi] += first.hour
        pd_n[zi] += 1
    for t in person_trips:
        zi = zones.index_of[t.origin_zone_id]
        dist_sum[zi] += t.distance_m
        dist_n[zi] += 1

    for i, z in enumerate(zones):
        if z.id not in census:
            raise MissingZoneError(f"census has no row for zone {z.id!r}")
        c = census[z.id]
        pop = c.pop_total
        if pop <= 0:
            warnings.warn(f"zone {z.id} has zero population; per-capita "
                          f"features undefined", ZeroPopulationWarning,
                          stacklevel=2)
            shares = (np.nan, np.nan, np.nan, np.nan)
            per_1000 = np.nan
            density = 0.0
        else:
            shares = (100 * c.pop_under18 / pop, 100 * c.pop_18_65 / pop,
                      100 * c.pop_over65 / pop, 100 * c.pop_female / pop)
            per_1000 = 1000 * stop_count[i] / pop
            density = pop / z.area_km2
        vals[i, 0:4] = shares
        vals[i, 4] = c.avg_educ_years
        vals[i, 5] = stop_count[i]
        vals[i, 6] = stop_count[i] / z.area_km2
        vals[i, 7] = per_1000
        vals[i, 8] = density
        if pd_n[i] > 0:
            vals[i, 9] = pd_trips[i] / pd_n[i]
            vals[i, 10] = pd_first[i] / pd_n[i]
        if dist_n[i] > 0:
            vals[i, 11] = dist_sum[i] / dist_n[i]
    return FeatureTable(zones.ids, vals)


def metro_lines_near(zones: ZoneSet, metro_stops: Sequence[tuple[str, float, float]],
                     radius_m: float = 750.0) -> np.ndarray:
    """Count distinct metro lines with a station within ``radius_m`` of each
    zone polygon."""
    from shapely.geometry import Point

    counts = np.zeros(len(zones), dtype=np.int64)
    for i, z in enumerate(zones):
        lines = set()
        for line, x, y in metro_stops:
            if z.polygon.distance(Point(x, y)) <= radius_m:
                lines.add(line)
        counts[i] = len(lines)
    return counts
