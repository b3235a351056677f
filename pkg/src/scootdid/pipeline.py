"""Staged study pipeline.

Wires the ingestion, screening, regionalization, treatment-assignment, and
regression layers into named stages behind a JSON config. Every stage
recomputes its upstream dependencies in memory (results are cached per
invocation, not on disk), so stages differ only in which files they write.
All outputs are deterministic for a fixed config and seed: keyed RNG streams,
canonical orderings, repr float formatting, and no timestamps.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from ._util import fmt_float, parallel_map, sha256_file, write_csv, write_json
from .design import (
    ROLE_DIRECTION,
    ROLES,
    STATUS,
    build_design,
    design_assignment,
)
from .errors import (
    EmptyCellError,
    RankDeficientError,
    ScootdidError,
    StageError,
)
from .geodata import (
    contiguity_weights,
    knn_connectivity,
    load_zones,
    polygon_to_geojson,
    zones_to_geojson,
)
from .ingest import (
    MODES,
    build_features,
    extract_trips,
    format_iso_ts,
    load_census,
    load_count_panel,
    load_gps_csv,
    load_metro_stops,
    load_person_trips,
    load_stops,
    metro_lines_near,
    scooter_zone_flows,
)
from .moran import screen_variables, selected_columns
from .nbdid import (
    DiDEffect,
    FitResult,
    ModelSpec,
    ZoneCovariates,
    cluster_robust_cov,
    compute_baselines,
    did_effect,
    fit_nb,
    build_design_matrix,
)
from .regionalize import name_regions, select_regionalization, standardize

STAGES = ("ingest", "features", "screen", "regionalize", "design", "fit",
          "report", "run")

# (profile name, demographics, clustered standard errors)
PROFILES = (
    ("main", True, False),
    ("robust_basic", False, True),
    ("robust_demog", True, True),
)

_INPUT_KEYS = ("zones", "panel", "gps", "census", "bus_stops", "metro_stops",
               "person_trips")


@dataclass
class StudyConfig:
    """Resolved study configuration; see from_dict for the JSON layout."""

    zones: str
    panel: str
    gps: str
    census: str
    bus_stops: str
    metro_stops: str
    person_trips: str
    out: str = "out"
    seed: int = 0
    threads: int = 1
    scooter_window_days: int | None = None
    # screening
    i_min: float = 0.25
    p_max: float = 0.05
    n_perm: int = 999
    two_sided: bool = False
    # clustering
    k_min: int = 3
    k_max: int = 10
    knn_k: int = 6
    n_restarts: int = 10
    # treatment assignment
    buffer_m: float = 1440.0
    trips_per_day: float = 5.0
    # trip extraction
    stop_gap_s: float = 300.0
    min_move_m: float = 50.0
    max_speed_mps: float = 8.0
    # regression
    exposure_offset: bool = False
    metro_radius_m: float = 750.0

    @classmethod
    def from_dict(cls, doc: dict, base_dir: str = ".") -> "StudyConfig":
        inputs = doc.get("inputs")
        if not isinstance(inputs, dict):
            raise ScootdidError("config needs an 'inputs' object")
        missing = [k for k in _INPUT_KEYS if k not in inputs]
        if missing:
            raise ScootdidError(f"config inputs missing {missing}")
        kw = {k: os.path.normpath(os.path.join(base_dir, inputs[k]))
              for k in _INPUT_KEYS}
        for k in ("out", "seed", "threads", "scooter_window_days"):
            if k in doc and doc[k] is not None:
                kw[k] = doc[k]
        if "out" in kw:
            kw["out"] = os.path.normpath(os.path.join(base_dir, kw["out"]))
        sections = {
            "screening": ("i_min", "p_max", "n_perm", "two_sided"),
            "clustering": ("k_min", "k_max", "knn_k", "n_restarts"),
            "design": ("buffer_m", "trips_per_day"),
            "trip_extraction": ("stop_gap_s", "min_move_m", "max_speed_mps"),
            "model": ("exposure_offset", "metro_radius_m"),
        }
        for section, keys in sections.items():
            sub = doc.get(section, {})
            bad = set(sub) - set(keys)
            if bad:
                raise ScootdidError(f"unknown {section} keys: {sorted(bad)}")
            for k in keys:
                if k in sub:
                    kw[k] = sub[k]
        known_top = {"inputs", "out", "seed", "threads",
                     "scooter_window_days", *sections}
        bad = set(doc) - known_top
        if bad:
            raise ScootdidError(f"unknown config keys: {sorted(bad)}")
        return cls(**kw)

    @classmethod
    def load(cls, path: str) -> "StudyConfig":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls.from_dict(doc, base_dir=os.path.dirname(path) or ".")


@dataclass
class EffectRecord:
    """One fitted (or skipped) model cell."""

    role: str
    region: str
    mode: str
    direction: str
    profile: str
    fit: FitResult | None = None
    cov: np.ndarray | None = None  # covariance actually used for inference
    effect: DiDEffect | None = None
    baseline: float | None = None
    skip_reason: str = ""


class Study:
    """Lazy stage graph over one StudyConfig; every artifact is computed at
    most once per instance."""

    def __init__(self, cfg: StudyConfig):
        self.cfg = cfg
        self._cache: dict[str, object] = {}

    def _get(self, key: str, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    # --- ingestion ---

    def zones(self):
        return self._get("zones", lambda: load_zones(self.cfg.zones))

    def panel(self):
        return self._get("panel", lambda: load_count_panel(self.cfg.panel))

    def census(self):
        return self._get("census", lambda: load_census(self.cfg.census))

    def stops(self):
        return self._get("stops", lambda: load_stops(self.cfg.bus_stops))

    def metro_stops(self):
        return self._get("metro",
                         lambda: load_metro_stops(self.cfg.metro_stops))

    def person_trips(self):
        return self._get("person_trips",
                         lambda: load_person_trips(self.cfg.person_trips))

    def trips(self):
        def build():
            streams = load_gps_csv(self.cfg.gps)
            return extract_trips(streams, stop_gap_s=self.cfg.stop_gap_s,
                                 min_move_m=self.cfg.min_move_m,
                                 max_speed_mps=self.cfg.max_speed_mps)
        return self._get("trips", build)

    def flows(self):
        return self._get("flows", lambda: scooter_zone_flows(
            self.trips(), self.zones(), n_days=self.cfg.scooter_window_days))

    # --- features and screening ---

    def features(self):
        return self._get("features", lambda: build_features(
            self.zones(), self.census(), self.stops(), self.person_trips()))

    def queen_weights(self):
        return self._get("queen", lambda: contiguity_weights(
            self.zones(), rule="queen", row_standardize=True))

    def screen_rows(self):
        return self._get("screen", lambda: screen_variables(
            self.features(), self.queen_weights(), i_min=self.cfg.i_min,
            p_max=self.cfg.p_max, n_perm=self.cfg.n_perm, seed=self.cfg.seed,
            two_sided=self.cfg.two_sided))

    # --- regionalization ---

    def regionalization(self):
        def build():
            cols = selected_columns(self.screen_rows())
            if not cols:
                raise ScootdidError("no feature passed the spatial screen; "
                                    "cannot regionalize")
            raw = self.features().matrix(cols)
            bad = np.flatnonzero(np.any(np.isnan(raw), axis=1))
            if bad.size:
                ids = [self.features().zone_ids[i] for i in bad[:5]]
                raise ScootdidError(
                    f"selected features undefined for zones {ids}")
            X = standardize(raw)
            zones = self.zones()
            knn = knn_connectivity(zones, self.cfg.knn_k)
            queen = contiguity_weights(zones, rule="queen",
                                       row_standardize=False)
            assignment, grid = select_regionalization(
                X, knn_conn=knn, queen_conn=queen, k_min=self.cfg.k_min,
                k_max=self.cfg.k_max, seed=self.cfg.seed,
                n_restarts=self.cfg.n_restarts, threads=self.cfg.threads)
            name_regions(assignment, zones)
            return assignment, grid
        return self._get("regionalization", build)

    def region_of_zone(self) -> dict[str, str]:
        def build():
            assignment, _ = self.regionalization()
            zones = self.zones()
            return {z.id: assignment.name_of(assignment.labels[i])
                    for i, z in enumerate(zones)}
        return self._get("region_of_zone", build)

    # --- treatment assignment ---

    def designs(self):
        def build():
            out = {}
            for role in ROLES:
                out[role] = design_assignment(
                    self.zones(), self.flows(), self.trips(), role,
                    threshold=self.cfg.trips_per_day,
                    buffer_m=self.cfg.buffer_m)
            return out
        return self._get("designs", build)

    # --- regression ---

    def covariates(self) -> dict[str, ZoneCovariates]:
        def build():
            metro = metro_lines_near(self.zones(), self.metro_stops(),
                                     self.cfg.metro_radius_m)
            census = self.census()
            out = {}
            for i, z in enumerate(self.zones()):
                c = census.get(z.id)
                if c is None:
                    raise ScootdidError(f"census has no row for zone {z.id!r}")
                out[z.id] = ZoneCovariates(metro_750m=float(metro[i]),
                                           working_pop=c.pop_18_65,
                                           educ_years=c.avg_educ_years)
            return out
        return self._get("covariates", build)

    def region_panels(self, role: str):
        def build():
            design = self.designs()[role]
            return build_design(self.panel(), self.region_of_zone(),
                                set(design.treated_ids),
                                set(design.excluded_ids), role)
        return self._get(f"rpanels:{role}", build)

    def baselines(self, role: str):
        def build():
            rpanels = self.region_panels(role)
            region_map = {}
            for region, rp in rpanels.items():
                for z in rp.treated_zone_ids:
                    region_map[z] = region
            return compute_baselines(self.panel(), region_map)
        return self._get(f"baselines:{role}", build)

    def effects(self) -> list[EffectRecord]:
        return self._get("effects", lambda: _fit_all(self))


def _drop_constant_extras(X: np.ndarray, names: tuple[str, ...]):
    """Drop non-core covariate columns that are constant in this slice (a
    region where every zone shares the same metro count, say); the four
    design columns always stay."""
    keep = []
    for j in range(X.shape[1]):
        if j <= 3 or X[:, j].min() != X[:, j].max():
            keep.append(j)
    return X[:, keep], tuple(names[j] for j in keep)


def _fit_cell(study: Study, role: str, region: str, mode: str,
              profile: tuple[str, bool, bool]) -> EffectRecord:
    pname, demog, clustered = profile
    direction = ROLE_DIRECTION[role]
    rec = EffectRecord(role=role, region=region, mode=mode,
                       direction=direction, profile=pname)
    rp = study.region_panels(role)[region]
    spec = ModelSpec(mode=mode, direction=direction, demographics=demog,
                     exposure_offset=study.cfg.exposure_offset,
                     clustered_se=clustered, name=pname)
    try:
        X, y, cluster_ids, offset, names = build_design_matrix(
            rp, spec, study.covariates())
    except EmptyCellError as e:
        rec.skip_reason = str(e)
        return rec
    if y.sum() == 0:
        rec.skip_reason = "response identically zero"
        return rec
    # a difference-in-differences contrast needs demand in both arms
    treat_rows = X[:, 1] > 0
    if y[treat_rows].sum() == 0 or y[~treat_rows].sum() == 0:
        arm = "treated" if y[treat_rows].sum() == 0 else "control"
        rec.skip_reason = f"{arm} zones have no {mode} demand"
        return rec
    X, names = _drop_constant_extras(X, names)
    try:
        fit = fit_nb(X, y, offset=offset, column_names=names)
    except (RankDeficientError, np.linalg.LinAlgError) as e:
        rec.skip_reason = str(e)
        return rec
    cov = cluster_robust_cov(fit, cluster_ids) if clustered else fit.cov
    diag = np.diag(cov)
    if (not np.all(np.isfinite(fit.beta)) or np.any(np.abs(fit.beta) > 25)
            or not np.all(np.isfinite(diag)) or np.any(diag <= 0)):
        # structural zeros push a coefficient to the boundary; the cell is
        # not identifiable as specified
        rec.skip_reason = "degenerate fit (quasi-separation)"
        return rec
    rec.fit = fit
    rec.cov = cov
    rec.baseline = study.baselines(role).get(region, mode, direction)
    rec.effect = did_effect(fit, rec.baseline, cov=rec.cov)
    return rec


def _fit_all(study: Study) -> list[EffectRecord]:
    cells = []
    for role in ROLES:
        rpanels = study.region_panels(role)
        # materialize shared state up front so threads only do numerics
        study.baselines(role)
        study.covariates()
        for region in sorted(rpanels):
            for mode in MODES:
                for profile in PROFILES:
                    cells.append((role, region, mode, profile))
    return parallel_map(lambda c: _fit_cell(study, *c), cells,
                        threads=study.cfg.threads)


# --- report writers ---


def _stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


class _Emitter:
    """Collects written files so the manifest can hash them."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.written: list[str] = []

    def path(self, name: str) -> str:
        self.written.append(name)
        return os.path.join(self.out_dir, name)

    def csv(self, name: str, header, rows) -> None:
        write_csv(self.path(name), header, rows)

    def json(self, name: str, doc) -> None:
        write_json(self.path(name), doc)

    def manifest(self) -> None:
        digest = {name: sha256_file(os.path.join(self.out_dir, name))
                  for name in self.written}
        write_json(os.path.join(self.out_dir, "manifest.json"),
                   {"files": digest})


def _write_ingest(study: Study, em: _Emitter) -> None:
    zones = study.zones()
    trips = study.trips()
    flows = study.flows()
    rows = []
    for t in trips:
        zo = zones.zone_of_point(*t.origin)
        zd = zones.zone_of_point(*t.destination)
        rows.append((t.device_id, format_iso_ts(t.start_ts),
                     format_iso_ts(t.end_ts),
                     zones[zo].id if zo is not None else "",
                     zones[zd].id if zd is not None else "",
                     fmt_float(round(t.distance_m, 3))))
    em.csv("trips.csv", ("device_id", "start", "end", "origin_zone_id",
                         "dest_zone_id", "distance_m"), rows)
    em.csv("flows.csv",
           ("zone_id", "origin_per_day", "dest_per_day", "origin_total",
            "dest_total"),
           [(z, fmt_float(flows.origin_mean[i]), fmt_float(flows.dest_mean[i]),
             fmt_float(flows.origin_total[i]), fmt_float(flows.dest_total[i]))
            for i, z in enumerate(flows.zone_ids)])
    em.json("ingest_summary.json", {
        "zones": len(zones),
        "panel_rows": len(study.panel()),
        "trips": len(trips),
        "flow_days": flows.n_days,
        "outside_origins": flows.outside_origins,
        "outside_destinations": flows.outside_destinations,
    })


def _write_features(study: Study, em: _Emitter) -> None:
    study.features().write_csv(em.path("features.csv"))


def _write_screen(study: Study, em: _Emitter) -> None:
    em.csv("screen.csv", ("variable", "morans_i", "p_value", "selected"),
           [(r.variable, fmt_float(r.i), fmt_float(r.p_value),
             "true" if r.selected else "false")
            for r in study.screen_rows()])


def _write_regions(study: Study, em: _Emitter) -> None:
    assignment, grid = study.regionalization()
    em.csv("score_grid.csv", ("method", "k", "calinski_harabasz"),
           [(c.method, str(c.k), fmt_float(c.ch)) for c in grid])
    zones = study.zones()
    region_of = study.region_of_zone()
    em.csv("regions.csv", ("zone_id", "label", "region"),
           [(z.id, str(int(assignment.labels[i])), region_of[z.id])
            for i, z in enumerate(zones)])
    em.json("regions.geojson", zones_to_geojson(
        zones, {z.id: {"region": region_of[z.id]} for z in zones}))
    em.json("regionalization.json", {
        "method": assignment.method,
        "k": assignment.k,
        "calinski_harabasz": assignment.ch_score,
    })


def _write_design(study: Study, em: _Emitter) -> None:
    zones = study.zones()
    buffer_polygon = None
    for role in ROLES:
        d = study.designs()[role]
        buffer_polygon = d.buffer_polygon
        tag = role.lower()
        em.csv(f"design_{tag}.csv", ("zone_id", "status", "flow_per_day"),
               [(z, STATUS[int(d.status[i])], fmt_float(d.flow_mean[i]))
                for i, z in enumerate(d.zone_ids)])
        em.json(f"design_{tag}.geojson", zones_to_geojson(
            zones, {z: {"status": STATUS[int(d.status[i])],
                        "flow_per_day": float(d.flow_mean[i])}
                    for i, z in enumerate(d.zone_ids)}))
    em.json("buffer.geojson", {
        "type": "FeatureCollection",
        "features": [{
            "type": "Feature",
            "geometry": polygon_to_geojson(buffer_polygon),
            "properties": {"radius_m": study.cfg.buffer_m},
        }],
    })


def _write_fit(study: Study, em: _Emitter) -> None:
    effects = study.effects()
    for role in ROLES:
        tag = role.lower()
        coef_rows = []
        eff_rows = []
        for rec in (r for r in effects if r.role == role):
            if rec.fit is None:
                eff_rows.append((rec.region, rec.mode, rec.profile, "0",
                                 "nan", *(["--"] * 7), "false", "false",
                                 rec.skip_reason))
                continue
            fit, eff = rec.fit, rec.effect
            se = np.sqrt(np.diag(rec.cov))
            z = fit.beta / se
            p = 2.0 * norm.sf(np.abs(z))
            for j, term in enumerate(fit.column_names):
                coef_rows.append((rec.region, rec.mode, rec.profile, term,
                                  fmt_float(fit.beta[j]), fmt_float(se[j]),
                                  fmt_float(z[j]), fmt_float(p[j]),
                                  _stars(p[j])))
            coef_rows.append((rec.region, rec.mode, rec.profile, "alpha",
                              fmt_float(fit.alpha), "", "", "", ""))
            eff_rows.append((
                rec.region, rec.mode, rec.profile, str(fit.n_obs),
                fmt_float(fit.alpha), fmt_float(eff.beta),
                fmt_float(eff.se_beta), fmt_float(eff.z_beta),
                fmt_float(eff.p_beta), fmt_float(eff.ame),
                fmt_float(eff.ame_se),
                fmt_float(eff.percent) if eff.percent is not None else "--",
                "true" if eff.significant else "false",
                "true" if fit.converged else "false",
                ""))
        em.csv(f"coefficients_{tag}.csv",
               ("region", "mode", "profile", "term", "estimate", "se", "z",
                "p_value", "stars"), coef_rows)
        em.csv(f"effects_{tag}.csv",
               ("region", "mode", "profile", "n_obs", "alpha", "beta", "se",
                "z", "p_value", "ame", "ame_se", "percent", "significant",
                "converged", "skip_reason"), eff_rows)
    bad = [f"{r.role}/{r.region}/{r.mode}/{r.profile}"
           for r in effects if r.fit is not None and not r.fit.converged]
    em.json("convergence.json", {
        "n_fits": sum(1 for r in effects if r.fit is not None),
        "n_skipped": sum(1 for r in effects if r.fit is None),
        "all_converged": not bad,
        "non_converged": bad,
    })


def _write_report(study: Study, em: _Emitter) -> None:
    effects = study.effects()
    base_rows = []
    for role in ROLES:
        table = study.baselines(role)
        for (region, mode, direction), v in sorted(table.values.items()):
            base_rows.append((role, region, mode, direction, fmt_float(v)))
    em.csv("baselines.csv",
           ("role", "region", "mode", "direction", "baseline"), base_rows)
    for role in ROLES:
        tag = role.lower()
        by_cell = {(r.region, r.mode, r.profile): r
                   for r in effects if r.role == role}
        regions = sorted({r.region for r in effects if r.role == role})
        rows = []
        for region in regions:
            for pname, _, _ in PROFILES:
                cells = []
                for mode in MODES:
                    rec = by_cell.get((region, mode, pname))
                    if rec is None or rec.effect is None \
                            or rec.effect.percent is None:
                        cells.append("--")
                    else:
                        star = "*" if rec.effect.significant else ""
                        cells.append(f"{rec.effect.percent:+.1f}%{star}")
                rows.append((region, pname, *cells))
        em.csv(f"did_summary_{tag}.csv", ("region", "profile", *MODES), rows)


_STAGE_WRITERS = {
    "ingest": (_write_ingest,),
    "features": (_write_features,),
    "screen": (_write_screen,),
    "regionalize": (_write_regions,),
    "design": (_write_design,),
    "fit": (_write_fit,),
    "report": (_write_report,),
    "run": (_write_ingest, _write_features, _write_screen, _write_regions,
            _write_design, _write_fit, _write_report),
}


def run_stage(cfg: StudyConfig, stage: str) -> int:
    """Execute one stage (or the whole study for ``run``) and write its
    artifacts plus a manifest. Returns the process exit code: 0 on success,
    1 when any regression failed to converge."""
    if stage not in _STAGE_WRITERS:
        raise ValueError(f"unknown stage {stage!r}; pick one of {STAGES}")
    study = Study(cfg)
    em = _Emitter(cfg.out)
    try:
        for writer in _STAGE_WRITERS[stage]:
            writer(study, em)
        em.manifest()
    except ScootdidError as e:
        raise StageError(stage, e) from e
    if stage in ("fit", "report", "run"):
        if any(r.fit is not None and not r.fit.converged
               for r in study.effects()):
            return 1
    return 0
