"""Synthetic city generator with known ground truth.

Builds a square zone grid with concentric demographic gradients, a metro
corridor, spatially random bus stops, per-person transit trip logs, chained
scooter trips inside a compact rollout district, and an NB2 count panel whose
treatment effect is injected on the log scale. Every draw comes from a
counter-based stream keyed by (seed, purpose, unit), so any cell can be
regenerated piecewise and thread count never changes output.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict

import numpy as np
from shapely.geometry import Point, Polygon
from shapely.ops import unary_union
from shapely.prepared import prep

from ._util import substream, write_csv, write_json, fmt_float
from .errors import ScootdidError
from .geodata import Trajectory, Zone, ZoneSet, zones_to_geojson
from .ingest import (
    CENSUS_HEADER,
    CensusRow,
    DAY_TYPES,
    DIRECTIONS,
    MODES,
    PERIODS,
    PersonTrip,
    ScooterTrip,
    TIME_BLOCKS,
    BLOCK_HOURS,
    ObservationPanel,
    build_features,
    format_iso_ts,
    metro_lines_near,
    parse_iso_ts,
)

# stream purposes
_P_COUNTS = 1
_P_TRIPS = 2
_P_CENSUS = 3
_P_STOPS = 4
_P_PERSONS = 5


@dataclass
class SynthConfig:
    """Knobs for one synthetic city; defaults give a small reference city."""

    grid_size: int = 12
    cell_m: float = 1000.0
    seed: int = 7

    # count model
    alpha: float = 0.25
    delta: float = 0.30            # treatment-post log effect
    post_shock: float = 0.05       # common post-period log shift
    treat_level: float = -0.10     # treated-zone log level difference
    base_rate_bus: float = 14.0    # boardings per hour at the reference cell
    base_rate_metro: float = 30.0
    alight_shift: float = -0.15
    coef_metro: float = 0.08
    coef_log_wpop: float = 0.35
    coef_educ: float = 0.04

    # scooter rollout district
    district_cx: float = 0.66      # fraction of the grid extent
    district_cy: float = 0.62
    district_radius: float = 0.17
    scooter_days: int = 6
    trips_per_zone_per_day: float = 9.0
    trips_per_device_day: float = 3.5
    trip_length_mean_m: float = 1440.0
    trip_length_shape: float = 4.0
    relocation_rate: float = 0.03
    start_date: str = "2019-03-04"  # a Monday
    gps_dt_s: float = 5.0

    # feature inputs
    persons_per_zone: int = 10
    behavior_days: int = 5
    with_behavior: bool = True
    with_scooters: bool = True  # skip trip generation for count-only studies

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f for f in cls.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise ScootdidError(f"unknown synth config keys: {sorted(bad)}")
        return cls(**d)


@dataclass
class Relocation:
    device_id: str
    start_ts: float
    origin: tuple[float, float]
    destination: tuple[float, float]


@dataclass
class GenMeta:
    """Provenance needed to regenerate panel counts piecewise."""

    seed: int
    alpha: float
    zone_ids: tuple[str, ...]
    zone_idx: np.ndarray
    mode: np.ndarray
    direction: np.ndarray
    period: np.ndarray
    day: np.ndarray
    block: np.ndarray
    mu0: np.ndarray  # cell means before any treatment effect


@dataclass
class SynthCity:
    cfg: SynthConfig
    zones: ZoneSet
    census: dict[str, CensusRow]
    stops: np.ndarray
    metro_stops: list[tuple[str, float, float]]
    metro_750m: np.ndarray
    person_trips: list[PersonTrip]
    trips: list[ScooterTrip]
    relocations: list[Relocation]
    panel: ObservationPanel
    treated_ids: tuple[str, ...]
    features: object = None


def _grid_zones(cfg: SynthConfig) -> ZoneSet:
    zones = []
    c = cfg.cell_m
    for row in range(cfg.grid_size):
        for col in range(cfg.grid_size):
            x0, y0 = col * c, row * c
            ring = [(x0, y0), (x0 + c, y0), (x0 + c, y0 + c), (x0, y0 + c),
                    (x0, y0)]
            poly = Polygon(ring)
            zones.append(Zone(id=f"z{row * cfg.grid_size + col:04d}",
                              polygon=poly,
                              centroid=(x0 + c / 2, y0 + c / 2),
                              area_km2=poly.area / 1e6))
    return ZoneSet(zones)


def _radial(cfg: SynthConfig, zones: ZoneSet) -> np.ndarray:
    """Normalized distance of each zone centroid from the grid center."""
    extent = cfg.grid_size * cfg.cell_m
    pts = zones.centroids()
    d = np.hypot(pts[:, 0] - extent / 2, pts[:, 1] - extent / 2)
    return d / (extent / 2)


def _make_census(cfg: SynthConfig, zones: ZoneSet,
                 rad: np.ndarray) -> dict[str, CensusRow]:
    census = {}
    for i, z in enumerate(zones):
        rng = substream(cfg.seed, _P_CENSUS, i)
        d = rad[i]
        density = 2000 + 9000 * math.exp(-((d / 0.55) ** 2)) \
            + rng.normal(0, 250)
        pop = max(200, int(round(density * z.area_km2)))
        under = min(45.0, max(5.0, 14 + 12 * d + rng.normal(0, 1.0)))
        retired = min(40.0, max(4.0, 22 - 8 * d + rng.normal(0, 1.0)))
        working = 100.0 - under - retired
        female = min(60.0, max(40.0, 53 - 4 * d + rng.normal(0, 0.8)))
        educ = max(7.0, 15.5 - 6.5 * d + rng.normal(0, 0.3))
        census[z.id] = CensusRow(
            pop_total=float(pop),
            pop_under18=round(pop * under / 100, 1),
            pop_18_65=round(pop * working / 100, 1),
            pop_over65=round(pop * retired / 100, 1),
            pop_female=round(pop * female / 100, 1),
            avg_educ_years=round(educ, 3),
        )
    return census


def _make_stops(cfg: SynthConfig, zones: ZoneSet) -> np.ndarray:
    """Bus stops are scattered without spatial structure, so all three
    stop-derived features read as noise to the autocorrelation screen."""
    pts = []
    for i, z in enumerate(zones):
        rng = substream(cfg.seed, _P_STOPS, i)
        count = 1 + int(rng.poisson(5.0))
        minx, miny, maxx, maxy = z.polygon.bounds
        for _ in range(count):
            pts.append((rng.uniform(minx, maxx), rng.uniform(miny, maxy)))
    return np.asarray(pts)


def _make_metro(cfg: SynthConfig) -> list[tuple[str, float, float]]:
    extent = cfg.grid_size * cfg.cell_m
    stations: list[tuple[str, float, float]] = []
    y = extent / 2 + cfg.cell_m / 2
    x = cfg.cell_m * 0.4
    while x < extent * 0.92:
        stations.append(("L1", x, y))
        x += 900.0
    x = extent / 2 + cfg.cell_m / 2
    yv = extent * 0.45
    while yv < extent * 0.95:
        stations.append(("L2", x, yv))
        yv += 900.0
    return stations


def _make_person_trips(cfg: SynthConfig, zones: ZoneSet,
                       rad: np.ndarray) -> list[PersonTrip]:
    trips: list[PersonTrip] = []
    day0 = parse_iso_ts(cfg.start_date + "T00:00:00")
    for i, z in enumerate(zones):
        rng = substream(cfg.seed, _P_PERSONS, i)
        d = rad[i]
        tpp = 1.1 + 1.5 * d
        first_mu = 9.6 + 3.0 * d
        dist_mu = 1800 + 16000 * d
        for p in range(cfg.persons_per_zone):
            pid = f"p{i:04d}_{p:02d}"
            for day in range(cfg.behavior_days):
                date = format_iso_ts(day0 + day * 86400)[:10]
                k = max(1, int(rng.poisson(tpp)))
                hour = min(20.0, max(4.5, first_mu + rng.normal(0, 0.4)))
                for j in range(k):
                    h = int(hour)
                    m = int((hour - h) * 60)
                    dist = max(200.0, dist_mu * (1 + rng.normal(0, 0.15)))
                    trips.append(PersonTrip(pid, date, h + m / 60, z.id,
                                            round(dist, 1)))
                    hour = min(23.0, hour + rng.uniform(1.0, 5.0))
    return trips


def _district_ids(cfg: SynthConfig, zones: ZoneSet) -> tuple[str, ...]:
    extent = cfg.grid_size * cfg.cell_m
    cx, cy = cfg.district_cx * extent, cfg.district_cy * extent
    r = cfg.district_radius * extent
    pts = zones.centroids()
    d = np.hypot(pts[:, 0] - cx, pts[:, 1] - cy)
    return tuple(zones[i].id for i in np.flatnonzero(d <= r))


def _make_scooter_trips(cfg: SynthConfig, zones: ZoneSet,
                        district: tuple[str, ...]):
    """Chained per-device trips whose endpoints stay inside the district."""
    dz = [zones[zones.index_of[z]] for z in district]
    union = unary_union([z.polygon for z in dz])
    prepared = prep(union)
    centroid = union.centroid
    day0 = parse_iso_ts(cfg.start_date + "T00:00:00")
    n_devices = max(3, int(round(len(dz) * cfg.trips_per_zone_per_day
                                 / cfg.trips_per_device_day)))
    shape = cfg.trip_length_shape
    scale = cfg.trip_length_mean_m / shape
    trips: list[ScooterTrip] = []
    relocations: list[Relocation] = []
    for dev in range(n_devices):
        rng = substream(cfg.seed, _P_TRIPS, dev)
        dev_id = f"d{dev:04d}"
        home = dz[int(rng.integers(len(dz)))]
        minx, miny, maxx, maxy = home.polygon.bounds
        pos = (rng.uniform(minx, maxx), rng.uniform(miny, maxy))
        for day in range(cfg.scooter_days):
            t = day0 + day * 86400 + 8 * 3600 + rng.uniform(0, 7200)
            k = 1 + int(rng.poisson(max(cfg.trips_per_device_day - 1, 0.1)))
            for _ in range(k):
                length = max(80.0, rng.gamma(shape, scale))
                dest = None
                for _try in range(30):
                    theta = rng.uniform(0, 2 * math.pi)
                    cand = (pos[0] + length * math.cos(theta),
                            pos[1] + length * math.sin(theta))
                    if prepared.contains(Point(cand)):
                        dest = cand
                        break
                if dest is None:
                    vx, vy = centroid.x - pos[0], centroid.y - pos[1]
                    norm = math.hypot(vx, vy)
                    if norm > 1e-9:
                        cand = (pos[0] + length * vx / norm,
                                pos[1] + length * vy / norm)
                        if prepared.contains(Point(cand)):
                            dest = cand
                if dest is None:
                    dest = (centroid.x, centroid.y)
                dist = math.hypot(dest[0] - pos[0], dest[1] - pos[1])
                if dist < 1.0:
                    continue
                speed = rng.uniform(3.5, 5.5)
                dur = dist / speed
                trips.append(ScooterTrip(
                    device_id=dev_id, start_ts=t, end_ts=t + dur,
                    origin=pos, destination=dest, distance_m=dist,
                    path=Trajectory(np.array([pos, dest]),
                                    np.array([t, t + dur]))))
                pos = dest
                t += dur + rng.uniform(1800, 5400)
                if cfg.relocation_rate > 0 and rng.uniform() < cfg.relocation_rate:
                    home = dz[int(rng.integers(len(dz)))]
                    minx, miny, maxx, maxy = home.polygon.bounds
                    new_pos = (rng.uniform(minx, maxx), rng.uniform(miny, maxy))
                    hop = math.hypot(new_pos[0] - pos[0], new_pos[1] - pos[1])
                    if hop >= 200.0:  # short hops would not read as a van run
                        relocations.append(Relocation(dev_id, t, pos, new_pos))
                        t += hop / 15.0 + 900.0
                        pos = new_pos
                if t - (day0 + day * 86400) > 21.5 * 3600:
                    break
    trips.sort(key=lambda t: (t.start_ts, t.device_id, t.end_ts))
    return trips, relocations


def _cell_grid() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pre-before-Post cell order shared by generation and reinjection."""
    period, day, block = [], [], []
    for p in range(len(PERIODS)):
        for d in range(len(DAY_TYPES)):
            for b in range(len(TIME_BLOCKS)):
                period.append(p)
                day.append(d)
                block.append(b)
    return (np.array(period, dtype=np.int8), np.array(day, dtype=np.int8),
            np.array(block, dtype=np.int8))


def _log_mu_cells(cfg: SynthConfig, base_rate: float, extra: float,
                  period: np.ndarray, day: np.ndarray, block: np.ndarray,
                  treated: bool) -> np.ndarray:
    day_shape = np.array([0.0, 0.05, -0.25, -0.45])
    block_shape = np.array([0.5, 0.0, 0.1, 0.05, 0.55, -0.2, -1.2])
    hours = np.asarray(BLOCK_HOURS)
    lm = (math.log(base_rate) + np.log(hours[block]) + block_shape[block]
          + day_shape[day] + extra)
    lm = lm + cfg.post_shock * (period == 1)
    if treated:
        lm = lm + cfg.treat_level
    return lm


def _build_mu0(cfg: SynthConfig, zones: ZoneSet, census: dict[str, CensusRow],
               metro_750m: np.ndarray, treated: set[str]) -> GenMeta:
    n = len(zones)
    period_c, day_c, block_c = _cell_grid()
    cells = len(period_c)
    wpop = np.array([max(census[z.id].pop_18_65, 1.0) for z in zones])
    educ = np.array([census[z.id].avg_educ_years for z in zones])
    lw = np.log(wpop)
    lw_c = lw - lw.mean()
    educ_c = educ - educ.mean()

    total = n * len(MODES) * len(DIRECTIONS) * cells
    zone_idx = np.empty(total, dtype=np.int32)
    mode_a = np.empty(total, dtype=np.int8)
    dir_a = np.empty(total, dtype=np.int8)
    period_a = np.empty(total, dtype=np.int8)
    day_a = np.empty(total, dtype=np.int8)
    block_a = np.empty(total, dtype=np.int8)
    mu0 = np.empty(total)
    pos = 0
    for zi, z in enumerate(zones):
        zone_extra = (cfg.coef_metro * metro_750m[zi]
                      + cfg.coef_log_wpop * lw_c[zi]
                      + cfg.coef_educ * educ_c[zi])
        is_treated = z.id in treated
        for mi, mode in enumerate(MODES):
            if mode == "Bus":
                rate = cfg.base_rate_bus
            elif mode == "Metro":
                rate = cfg.base_rate_metro if metro_750m[zi] > 0 else 0.0
            else:
                rate = cfg.base_rate_bus + (cfg.base_rate_metro
                                            if metro_750m[zi] > 0 else 0.0)
            for di in range(len(DIRECTIONS)):
                sl = slice(pos, pos + cells)
                zone_idx[sl] = zi
                mode_a[sl] = mi
                dir_a[sl] = di
                period_a[sl] = period_c
                day_a[sl] = day_c
                block_a[sl] = block_c
                if rate == 0.0:
                    mu0[sl] = 0.0
                else:
                    extra = zone_extra + (cfg.alight_shift if di == 1 else 0.0)
                    mu0[sl] = np.exp(_log_mu_cells(
                        cfg, rate, extra, period_c, day_c, block_c, is_treated))
                pos += cells
    return GenMeta(seed=cfg.seed, alpha=cfg.alpha, zone_ids=zones.ids,
                   zone_idx=zone_idx, mode=mode_a, direction=dir_a,
                   period=period_a, day=day_a, block=block_a, mu0=mu0)


def _draw_counts(meta: GenMeta, treated: set[str], delta: float) -> np.ndarray:
    """NB2 draws cell by cell through per-(zone, mode, direction) streams.

    Counts come from the gamma-Poisson mixture; the gamma vector is drawn
    before any Poisson draw and cells are ordered Pre before Post, so
    changing ``delta`` leaves control zones and pre-period treated cells
    bit-identical.
    """
    n_zones = len(meta.zone_ids)
    cells = len(meta.mu0) // (n_zones * len(MODES) * len(DIRECTIONS))
    counts = np.empty(len(meta.mu0), dtype=np.int64)
    treated_mask = np.array([z in treated for z in meta.zone_ids])
    shape = 1.0 / meta.alpha
    pos = 0
    for zi in range(n_zones):
        for mi in range(len(MODES)):
            for di in range(len(DIRECTIONS)):
                sl = slice(pos, pos + cells)
                rng = substream(meta.seed, _P_COUNTS, zi, mi, di)
                g = rng.standard_gamma(shape, size=cells)
                lam = g * meta.alpha * meta.mu0[sl]
                if treated_mask[zi] and delta != 0.0:
                    lam = lam * np.where(meta.period[sl] == 1,
                                         math.exp(delta), 1.0)
                counts[sl] = rng.poisson(lam)
                pos += cells
    return counts


def _panel_from_meta(meta: GenMeta, counts: np.ndarray) -> ObservationPanel:
    panel = ObservationPanel(meta.zone_ids, meta.zone_idx, meta.period,
                             meta.day, meta.block, meta.mode, meta.direction,
                             counts)
    panel.gen = meta
    return panel


def inject_effect(panel: ObservationPanel, treated, delta: float
                  ) -> ObservationPanel:
    """Redraw a generated panel with multiplier exp(delta) on post-period
    treated cell means; all other cells keep their exact counts."""
    if panel.gen is None:
        raise ScootdidError("inject_effect needs a generator-produced panel")
    meta: GenMeta = panel.gen
    counts = _draw_counts(meta, set(treated), delta)
    return _panel_from_meta(meta, counts)


def generate_city(cfg: SynthConfig) -> SynthCity:
    """Build the whole city; see the module docstring for the pieces."""
    zones = _grid_zones(cfg)
    rad = _radial(cfg, zones)
    census = _make_census(cfg, zones, rad)
    stops = _make_stops(cfg, zones)
    metro_stops = _make_metro(cfg)
    metro_750m = metro_lines_near(zones, metro_stops, 750.0)
    district = _district_ids(cfg, zones)
    trips, relocations = ([], [])
    if cfg.with_scooters:
        trips, relocations = _make_scooter_trips(cfg, zones, district)
    meta = _build_mu0(cfg, zones, census, metro_750m, set(district))
    counts = _draw_counts(meta, set(district), cfg.delta)
    panel = _panel_from_meta(meta, counts)
    person_trips = (_make_person_trips(cfg, zones, rad)
                    if cfg.with_behavior else [])
    features = (build_features(zones, census, stops, person_trips)
                if cfg.with_behavior else None)
    return SynthCity(cfg=cfg, zones=zones, census=census, stops=stops,
                     metro_stops=metro_stops, metro_750m=metro_750m,
                     person_trips=person_trips, trips=trips,
                     relocations=relocations, panel=panel,
                     treated_ids=district, features=features)


def gps_rows(city: SynthCity):
    """Yield (device_id, iso_ts, x, y) rows reproducing every trip as a
    sampled trace, with relocation runs emitted at van speed."""
    events: dict[str, list[tuple[float, str, object]]] = {}
    for t in city.trips:
        events.setdefault(t.device_id, []).append((t.start_ts, "trip", t))
    for r in city.relocations:
        events.setdefault(r.device_id, []).append((r.start_ts, "reloc", r))
    dt = city.cfg.gps_dt_s
    for dev in sorted(events):
        for _, kind, ev in sorted(events[dev], key=lambda e: e[0]):
            if kind == "trip":
                x0, y0 = ev.origin
                x1, y1 = ev.destination
                t0, t1 = ev.start_ts, ev.end_ts
            else:
                x0, y0 = ev.origin
                x1, y1 = ev.destination
                t0 = ev.start_ts
                t1 = t0 + math.hypot(x1 - x0, y1 - y0) / 15.0
            steps = max(1, int((t1 - t0) / dt))
            times = [t0 + i * (t1 - t0) / steps for i in range(steps)] + [t1]
            for ts in times:
                f = (ts - t0) / (t1 - t0)
                yield (dev, format_iso_ts(ts),
                       round(x0 + f * (x1 - x0), 3), round(y0 + f * (y1 - y0), 3))


def write_city(city: SynthCity, outdir: str) -> dict[str, str]:
    """Emit the exact input files the ingestion layer reads, plus the ground
    truth and a ready-to-run study config."""
    os.makedirs(outdir, exist_ok=True)
    paths = {}

    def p(name: str) -> str:
        paths[name] = os.path.join(outdir, name)
        return paths[name]

    write_json(p("zones.geojson"), zones_to_geojson(city.zones))
    write_csv(p("census.csv"), CENSUS_HEADER,
              [(zid, fmt_float(c.pop_total), fmt_float(c.pop_under18),
                fmt_float(c.pop_18_65), fmt_float(c.pop_over65),
                fmt_float(c.pop_female), fmt_float(c.avg_educ_years))
               for zid, c in ((z.id, city.census[z.id]) for z in city.zones)])
    write_csv(p("bus_stops.csv"), ("stop_id", "x_m", "y_m"),
              [(f"s{i:05d}", fmt_float(x), fmt_float(y))
               for i, (x, y) in enumerate(city.stops)])
    write_csv(p("metro_stops.csv"), ("line", "x_m", "y_m"),
              [(line, fmt_float(x), fmt_float(y))
               for line, x, y in city.metro_stops])
    write_csv(p("person_trips.csv"),
              ("person_id", "date", "time", "origin_zone_id", "distance_m"),
              [(t.person_id, t.date,
                f"{int(t.hour):02d}:{int((t.hour % 1) * 60):02d}:00",
                t.origin_zone_id, fmt_float(t.distance_m))
               for t in city.person_trips])
    city.panel.write_csv(p("panel.csv"))
    write_csv(p("gps.csv"), ("device_id", "timestamp_iso8601", "x_m", "y_m"),
              gps_rows(city))
    write_json(p("truth.json"), {
        "delta": city.cfg.delta,
        "post_shock": city.cfg.post_shock,
        "alpha": city.cfg.alpha,
        "treated_ids": list(city.treated_ids),
        "seed": city.cfg.seed,
    })
    write_json(p("synth_config.json"), asdict(city.cfg))
    study = {
        "inputs": {
            "zones": "zones.geojson",
            "panel": "panel.csv",
            "gps": "gps.csv",
            "census": "census.csv",
            "bus_stops": "bus_stops.csv",
            "metro_stops": "metro_stops.csv",
            "person_trips": "person_trips.csv",
        },
        "seed": city.cfg.seed,
        "out": "out",
        "scooter_window_days": city.cfg.scooter_days,
    }
    write_json(p("study_config.json"), study)
    return paths
