"""Spatial autocorrelation screening: Moran's I with permutation inference.

Used to keep only features that vary smoothly over space before clustering;
features indistinguishable from spatial noise carry no regional signal.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from itertools import permutations
from typing import Sequence

import numpy as np

from ._util import substream
from .errors import (
    ConstantColumnWarning,
    DegenerateVarianceError,
    EmptyWeightsError,
)
from .geodata import SpatialWeights
from .ingest import FEATURE_COLUMNS, FeatureTable


def morans_i(values: Sequence[float], w: SpatialWeights) -> float:
    """Global Moran's I of ``values`` under weights ``w``.

    I = (n / S0) * sum_ij w_ij z_i z_j / sum_i z_i^2 with z the deviations
    from the mean. Invariant under affine rescaling of the values.
    """
    x = np.asarray(values, dtype=float)
    n = x.shape[0]
    if n < 3:
        raise ValueError("Moran's I needs at least 3 observations")
    if w.n != n:
        raise ValueError(f"weights are for {w.n} zones, got {n} values")
    s0 = w.s0
    if s0 <= 0:
        raise EmptyWeightsError("weights have no positive entries")
    z = x - x.mean()
    denom = float(z @ z)
    if denom == 0:
        raise DegenerateVarianceError("values are constant; Moran's I undefined")
    num = float(np.sum(w.w * z[w.i] * z[w.j]))
    return (n / s0) * (num / denom)


@dataclass(frozen=True)
class MoranResult:
    i: float
    p_value: float
    n_perm: int
    two_sided: bool


def _perm_stats_random(z: np.ndarray, w: SpatialWeights, n_perm: int,
                       seed: int) -> np.ndarray:
    """Moran numerators under label permutations, one keyed RNG substream per
    permutation so any evaluation order gives identical results."""
    n = z.shape[0]
    out = np.empty(n_perm)
    for p in range(n_perm):
        rng = substream(seed, 101, p)
        zp = z[rng.permutation(n)]
        out[p] = np.sum(w.w * zp[w.i] * zp[w.j])
    return out


def _perm_stats_exhaustive(z: np.ndarray, w: SpatialWeights) -> np.ndarray:
    n = z.shape[0]
    stats = []
    for perm in permutations(range(n)):
        if perm == tuple(range(n)):
            continue  # identity is the observed arrangement
        zp = z[list(perm)]
        stats.append(np.sum(w.w * zp[w.i] * zp[w.j]))
    return np.asarray(stats)


def morans_perm_test(values: Sequence[float], w: SpatialWeights,
                     n_perm: int = 999, seed: int = 0,
                     two_sided: bool = False) -> MoranResult:
    """Permutation test for Moran's I.

    p = (1 + #{permuted I* at least as extreme as observed}) / (n_perm + 1),
    one-sided in the positive direction by default. When ``n_perm`` equals
    n! - 1 (n <= 8) all label permutations are enumerated instead of sampled,
    which makes the p-value exact.
    """
    x = np.asarray(values, dtype=float)
    n = x.shape[0]
    i_obs = morans_i(x, w)  # validates inputs
    z = x - x.mean()
    denom = float(z @ z)
    scale = n / (w.s0 * denom)  # shared by all permutations
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    if n <= 8 and n_perm == math.factorial(n) - 1:
        nums = _perm_stats_exhaustive(z, w)
    else:
        nums = _perm_stats_random(z, w, n_perm, seed)
    i_perm = scale * nums
    # observed value recomputed through the same arithmetic so ties are exact
    i_ref = scale * float(np.sum(w.w * z[w.i] * z[w.j]))
    if two_sided:
        hits = int(np.sum(np.abs(i_perm) >= abs(i_ref)))
    else:
        hits = int(np.sum(i_perm >= i_ref))
    p = (1 + hits) / (len(i_perm) + 1)
    return MoranResult(i=i_obs, p_value=p, n_perm=len(i_perm), two_sided=two_sided)


@dataclass(frozen=True)
class ScreenRow:
    variable: str
    i: float
    p_value: float
    selected: bool


def screen_variables(features: FeatureTable, w: SpatialWeights,
                     i_min: float = 0.25, p_max: float = 0.05,
                     n_perm: int = 999, seed: int = 0,
                     two_sided: bool = False) -> list[ScreenRow]:
    """Score every feature column and keep those with I >= i_min and
    p <= p_max. Constant columns are auto-rejected with a warning. Row order
    follows FEATURE_COLUMNS."""
    rows = []
    for k, name in enumerate(FEATURE_COLUMNS):
        x = features.column(name)
        if np.ptp(x) == 0 or np.any(np.isnan(x)):
            warnings.warn(f"feature {name} is constant or undefined; rejected",
                          ConstantColumnWarning, stacklevel=2)
            rows.append(ScreenRow(name, float("nan"), float("nan"), False))
            continue
        var_seed = int(np.random.SeedSequence(
            entropy=int(seed), spawn_key=(17, k)).generate_state(1, np.uint64)[0])
        res = morans_perm_test(x, w, n_perm=n_perm, seed=var_seed,
                               two_sided=two_sided)
        rows.append(ScreenRow(name, res.i, res.p_value,
                              res.i >= i_min and res.p_value <= p_max))
    return rows


def selected_columns(rows: Sequence[ScreenRow]) -> list[str]:
    return [r.variable for r in rows if r.selected]
