"""Quasi-experimental design: who is treated, who is excluded, who controls.

A zone is Treated when its scooter activity reaches the daily threshold for
the model's role, Excluded when it touches the trajectory buffer or has any
scooter activity at all, and Control otherwise. Precedence is
Treatment > Excluded > Control, so sub-threshold activity never lands in the
control group.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyCellWarning, MissingZoneError
from .geodata import ZoneSet, buffer_union, zones_intersecting
from .ingest import FlowTable, ObservationPanel, ScooterTrip

ROLES = ("Generation", "Attraction")
STATUS = ("Control", "Treatment", "Excluded")

# Generation models explain boardings (trips produced by a zone) and tie
# treatment to scooter trips ending there; Attraction models explain
# alightings and tie treatment to scooter trips starting there.
ROLE_DIRECTION = {"Generation": "Boarding", "Attraction": "Alighting"}


def role_flow(flows: FlowTable, role: str) -> np.ndarray:
    if role == "Generation":
        return flows.dest_mean
    if role == "Attraction":
        return flows.origin_mean
    raise ValueError(f"role must be one of {ROLES}, got {role!r}")


def assign_treatment(flows: FlowTable, role: str,
                     threshold: float = 5.0) -> set[str]:
    """Zones whose role flow reaches ``threshold`` mean trips/day."""
    f = role_flow(flows, role)
    return {flows.zone_ids[i] for i in np.flatnonzero(f >= threshold)}


def exclusion_ring(zones: ZoneSet, trips: Sequence[ScooterTrip],
                   radius_m: float = 1440.0,
                   endpoints_only: bool = False) -> tuple[set[str], object]:
    """Zones that touch the trajectory buffer but carry no scooter activity.

    Returns the ids plus the buffer polygon itself (for map output). Zones
    with any trip endpoint are left out here; they are treatment candidates
    and handled by status precedence instead.
    """
    paths = [t.path for t in trips]
    buf = buffer_union(paths, radius_m, endpoints_only=endpoints_only)
    touching = set(zones_intersecting(zones, buf))
    active = set()
    for t in trips:
        for pt in (t.origin, t.destination):
            zi = zones.zone_of_point(*pt)
            if zi is not None:
                active.add(zones[zi].id)
    return touching - active, buf


@dataclass
class DesignAssignment:
    """Per-zone treatment status for one role."""

    role: str
    zone_ids: tuple[str, ...]
    status: np.ndarray  # codes into STATUS
    flow_mean: np.ndarray
    threshold: float
    buffer_m: float
    buffer_polygon: object = None

    def ids_with(self, status: str) -> tuple[str, ...]:
        code = STATUS.index(status)
        return tuple(self.zone_ids[i] for i in np.flatnonzero(self.status == code))

    @property
    def treated_ids(self) -> tuple[str, ...]:
        return self.ids_with("Treatment")

    @property
    def excluded_ids(self) -> tuple[str, ...]:
        return self.ids_with("Excluded")

    @property
    def control_ids(self) -> tuple[str, ...]:
        return self.ids_with("Control")

    def status_of(self, zone_id: str) -> str:
        i = self.zone_ids.index(zone_id)
        return STATUS[int(self.status[i])]


def design_assignment(zones: ZoneSet, flows: FlowTable,
                      trips: Sequence[ScooterTrip], role: str,
                      threshold: float = 5.0, buffer_m: float = 1440.0,
                      endpoints_only: bool = False) -> DesignAssignment:
    """Full status assignment for one role.

    Switching the role changes only which flow column feeds the threshold;
    the buffer ring is role-independent.
    """
    if tuple(flows.zone_ids) != zones.ids:
        raise MissingZoneError("flow table and zone set are misaligned")
    f = role_flow(flows, role)
    ring, buf = exclusion_ring(zones, trips, buffer_m, endpoints_only)
    any_activity = (flows.origin_total + flows.dest_total) > 0
    status = np.zeros(len(zones), dtype=np.int8)  # Control
    for i, zid in enumerate(zones.ids):
        if f[i] >= threshold:
            status[i] = 1  # Treatment
        elif any_activity[i] or zid in ring:
            status[i] = 2  # Excluded
    return DesignAssignment(role=role, zone_ids=zones.ids, status=status,
                            flow_mean=np.asarray(f, dtype=float),
                            threshold=threshold, buffer_m=buffer_m,
                            buffer_polygon=buf)


@dataclass
class RegionPanel:
    """Analysis slice for one region: treated + control zones only."""

    region: str
    role: str
    panel: ObservationPanel
    treat_by_zone: np.ndarray  # bool over panel.zone_ids
    region_zone_ids: tuple[str, ...]  # every zone labelled with this region
    treated_zone_ids: tuple[str, ...]
    control_zone_ids: tuple[str, ...]

    @property
    def treat_rows(self) -> np.ndarray:
        return self.treat_by_zone[self.panel.zone_idx]

    @property
    def post_rows(self) -> np.ndarray:
        return self.panel.period == 1


def build_design(panel: ObservationPanel, region_of_zone: dict[str, str],
                 treated: set[str] | Sequence[str],
                 excluded: set[str] | Sequence[str],
                 role: str) -> dict[str, RegionPanel]:
    """Split the panel into per-region treated-vs-control slices.

    Excluded zones are dropped entirely. Regions missing either group are
    skipped with a warning. Panel zones must all carry a region label.
    """
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}, got {role!r}")
    treated = set(treated)
    excluded = set(excluded)
    for zid in panel.zone_ids:
        if zid not in region_of_zone:
            raise MissingZoneError(f"panel zone {zid!r} has no region label")
    regions = sorted(set(region_of_zone.values()))
    out: dict[str, RegionPanel] = {}
    zone_region = np.array([region_of_zone[z] for z in panel.zone_ids])
    zone_treat = np.array([z in treated for z in panel.zone_ids])
    zone_excl = np.array([z in excluded and z not in treated
                          for z in panel.zone_ids])
    for region in regions:
        zmask = zone_region == region
        region_zone_ids = tuple(z for z, keep in zip(panel.zone_ids, zmask) if keep)
        keep_zone = zmask & ~zone_excl
        t_ids = tuple(z for z, k, t in zip(panel.zone_ids, keep_zone, zone_treat)
                      if k and t)
        c_ids = tuple(z for z, k, t in zip(panel.zone_ids, keep_zone, zone_treat)
                      if k and not t)
        if not t_ids or not c_ids:
            lack = "treated" if not t_ids else "control"
            warnings.warn(f"region {region} has no {lack} zones; skipped",
                          EmptyCellWarning, stacklevel=2)
            continue
        rows = keep_zone[panel.zone_idx]
        out[region] = RegionPanel(
            region=region, role=role, panel=panel.subset(rows),
            treat_by_zone=zone_treat,
            region_zone_ids=region_zone_ids,
            treated_zone_ids=t_ids, control_zone_ids=c_ids)
    return out
