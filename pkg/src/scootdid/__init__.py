"""Quasi-experimental study of shared e-scooter rollouts on zone-level
public-transport demand.

The layers, in pipeline order: geometry and zone handling (``geodata``),
input parsing and feature building (``ingest``), spatial autocorrelation
screening (``moran``), connectivity-aware clustering (``regionalize``),
treatment assignment (``design``), NB2 difference-in-differences estimation
(``nbdid``), the staged runner (``pipeline``), and a ground-truth synthetic
city (``synthetic``).
"""

from .errors import ScootdidError, ScootdidWarning
from .geodata import (
    SpatialWeights,
    Trajectory,
    Zone,
    ZoneSet,
    buffer_union,
    contiguity_weights,
    knn_connectivity,
    load_zones,
)
from .ingest import (
    FeatureTable,
    FlowTable,
    ObservationPanel,
    ScooterTrip,
    build_features,
    extract_trips,
    load_count_panel,
    scooter_zone_flows,
)
from .moran import morans_i, morans_perm_test, screen_variables
from .regionalize import (
    calinski_harabasz,
    kmeans,
    select_regionalization,
    ward_cluster,
)
from .design import DesignAssignment, build_design, design_assignment
from .nbdid import (
    DiDEffect,
    FitResult,
    ModelSpec,
    average_marginal_effect,
    cluster_robust_cov,
    did_effect,
    fit_nb,
)
from .pipeline import Study, StudyConfig, run_stage
from .synthetic import SynthConfig, generate_city, inject_effect, write_city

__version__ = "1.0.0"

__all__ = [
    "ScootdidError", "ScootdidWarning",
    "SpatialWeights", "Trajectory", "Zone", "ZoneSet", "buffer_union",
    "contiguity_weights", "knn_connectivity", "load_zones",
    "FeatureTable", "FlowTable", "ObservationPanel", "ScooterTrip",
    "build_features", "extract_trips", "load_count_panel",
    "scooter_zone_flows",
    "morans_i", "morans_perm_test", "screen_variables",
    "calinski_harabasz", "kmeans", "select_regionalization", "ward_cluster",
    "DesignAssignment", "build_design", "design_assignment",
    "DiDEffect", "FitResult", "ModelSpec", "average_marginal_effect",
    "cluster_robust_cov", "did_effect", "fit_nb",
    "Study", "StudyConfig", "run_stage",
    "SynthConfig", "generate_city", "inject_effect", "write_city",
    "__version__",
]
