"""Elasticities, individual conditional expectation curves, and spatial
substitution maps for fitted choice models.

Elasticities come from central finite differences of the model's
probabilities, so one code path serves every model kind; perturbations are
applied in original attribute units (inverse-scaled) and re-standardized
before the forward pass.  All interpretation passes run in inference mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ChoiceDataset
from .errors import ConfigError, DataError
from .graph import bfs_distances
from .models import FittedModel

DEFAULT_REL_STEP = 1e-4


def _perturbed_probs(
    model: FittedModel, dataset: ChoiceDataset, n: int, j: int, attr: str, new_value_original: float
) -> np.ndarray:
    """Probability vector of household n with alternative j's attribute set
    to ``new_value_original`` (original units)."""
    d = dataset.column_index(attr)
    feats = dataset.features[n].copy()
    feats[j, d] = dataset.to_model_units(attr, new_value_original)
    return model.predict_probs(feats)


def _perturbed_utilities(
    model: FittedModel, dataset: ChoiceDataset, n: int, j: int, attr: str, new_value_original: float
) -> np.ndarray:
    d = dataset.column_index(attr)
    feats = dataset.features[n].copy()
    feats[j, d] = dataset.to_model_units(attr, new_value_original)
    return model.utilities(feats)


def _original_value(dataset: ChoiceDataset, n: int, j: int, attr: str) -> float:
    d = dataset.column_index(attr)
    return float(dataset.to_original_units(attr, dataset.features[n, j, d]))


def elasticity_vector(
    model: FittedModel,
    dataset: ChoiceDataset,
    n: int,
    j: int,
    attr: str,
    method: str = "elasticity",
    rel_step: float = DEFAULT_REL_STEP,
) -> np.ndarray:
    """E_i for every alternative i w.r.t. alternative j's attribute.

    ``method='elasticity'`` returns (dP_i/dz)(z/P_i) with a relative
    central step; ``method='semi'`` returns (dP_i/dz)/P_i with an absolute
    step, for attributes whose observed value is zero.
    """
    if method not in ("elasticity", "semi"):
        raise ConfigError(f"unknown elasticity method '{method}'")
    z = _original_value(dataset, n, j, attr)
    if method == "elasticity":
        if z == 0.0:
            raise DataError(
                f"attribute '{attr}' of alternative {j} is zero; relative elasticity "
                "is undefined, use the semi-elasticity method"
            )
        step = abs(z) * rel_step
    else:
        scale = dataset.scaling.get(attr, (0.0, 1.0))[1]
        step = rel_step * max(abs(z), scale, 1.0)
    base = model.predict_probs(dataset.features[n])
    up = _perturbed_probs(model, dataset, n, j, attr, z + step)
    down = _perturbed_probs(model, dataset, n, j, attr, z - step)
    deriv = (up - down) / (2.0 * step)
    if method == "elasticity":
        return deriv * z / base
    return deriv / base


def elasticity(
    model: FittedModel,
    dataset: ChoiceDataset,
    n: int,
    i: int,
    j: int,
    attr: str,
    method: str = "elasticity",
    rel_step: float = DEFAULT_REL_STEP,
) -> float:
    """Percentage response of P_n(i) to a percentage change of alternative
    j's attribute (direct when i == j, cross otherwise)."""
    return float(elasticity_vector(model, dataset, n, j, attr, method, rel_step)[i])


@dataclass(frozen=True)
class ElasticityReport:
    """Direct and cross elasticities of one household w.r.t. one attribute
    of one alternative, with each alternative classified by hop distance."""

    household: int
    alternative: int
    attribute: str
    values: np.ndarray  # (V,)
    hop_distance: np.ndarray  # (V,), -1 for unreachable
    reach_hops: int

    def classification(self, i: int) -> str:
        if i == self.alternative:
            return "self"
        dist = self.hop_distance[i]
        if 0 < dist <= self.reach_hops:
            return "within"
        return "outside"

    def rows(self):
        for i in range(len(self.values)):
            yield i, float(self.values[i]), self.classification(i), int(self.hop_distance[i])


def elasticity_report(
    model: FittedModel,
    dataset: ChoiceDataset,
    n: int,
    j: int,
    attr: str,
    method: str = "elasticity",
) -> ElasticityReport:
    values = elasticity_vector(model, dataset, n, j, attr, method)
    if model.graph is not None:
        hops = bfs_distances(model.graph, j)
    else:
        hops = np.full(dataset.num_alternatives, -1, dtype=np.int64)
        hops[j] = 0
    return ElasticityReport(
        household=n,
        alternative=j,
        attribute=attr,
        values=values,
        hop_distance=hops,
        reach_hops=model.reach_hops,
    )


@dataclass(frozen=True)
class KHopConstancyReport:
    """Outcome of the locality check on cross elasticities.

    Utilities of alternatives beyond the model's reach cannot depend on
    the perturbed attribute, so their cross elasticities must coincide.
    """

    household: int
    alternative: int
    attribute: str
    reach_hops: int
    outside: tuple[int, ...]
    within: tuple[int, ...]
    outside_spread: float
    within_spread: float
    tolerance: float
    vacuous: bool
    passed: bool


def khop_constancy_check(
    model: FittedModel,
    dataset: ChoiceDataset,
    n: int,
    j: int,
    attr: str,
    tolerance: float = 1e-8,
) -> KHopConstancyReport:
    """Assert equal cross-elasticities outside the reach neighborhood of j.

    With fewer than two outside alternatives the check is vacuous and
    reported as such rather than passed on no evidence.
    """
    report = elasticity_report(model, dataset, n, j, attr)
    outside = [i for i in range(dataset.num_alternatives) if report.classification(i) == "outside"]
    within = [i for i in range(dataset.num_alternatives) if report.classification(i) == "within"]
    if len(outside) >= 2:
        vals = report.values[outside]
        outside_spread = float(vals.max() - vals.min())
        vacuous = False
        passed = outside_spread < tolerance
    else:
        outside_spread = 0.0
        vacuous = True
        passed = True
    within_spread = (
        float(report.values[within].max() - report.values[within].min()) if len(within) >= 2 else 0.0
    )
    return KHopConstancyReport(
        household=n,
        alternative=j,
        attribute=attr,
        reach_hops=model.reach_hops,
        outside=tuple(outside),
        within=tuple(within),
        outside_spread=outside_spread,
        within_spread=within_spread,
        tolerance=tolerance,
        vacuous=vacuous,
        passed=passed,
    )


@dataclass(frozen=True)
class ICECurve:
    """Per-household probability traces of one alternative as one attribute
    sweeps a grid in original units."""

    alternative: int
    attribute: str
    grid: np.ndarray  # (G,) strictly increasing, original units
    curves: np.ndarray  # (H, G) probabilities
    color_key: np.ndarray  # (H,) e.g. the household's income-interact value
    households: tuple[int, ...]
    extrapolated: bool = False


def ice_curve(
    model: FittedModel,
    dataset: ChoiceDataset,
    i: int,
    attr: str,
    households=None,
    grid_points: int = 50,
    grid=None,
    color_attr: str | None = None,
) -> ICECurve:
    """Sweep alternative i's attribute over a grid and record each
    household's choice probability for i.

    The default grid spans the attribute's observed 1st-99th percentile
    range; explicit grids outside the observed range are flagged.
    """
    if households is None:
        households = np.arange(dataset.num_households)
    households = np.asarray(households, dtype=np.int64)
    if households.size == 0:
        raise DataError("empty household set for the conditional expectation curve")
    d = dataset.column_index(attr)
    observed = dataset.to_original_units(attr, dataset.features[:, :, d]).reshape(-1)
    extrapolated = False
    if grid is None:
        lo, hi = np.percentile(observed, [1.0, 99.0])
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        grid = np.linspace(lo, hi, grid_points)
    else:
        grid = np.asarray(grid, dtype=np.float64)
        if np.any(np.diff(grid) <= 0):
            raise ConfigError("grid must be strictly increasing")
        extrapolated = bool(grid.min() < observed.min() or grid.max() > observed.max())
    if color_attr is None:
        color_attr = "income_interact" if "income_interact" in dataset.feature_names else None
    if color_attr is not None:
        cd = dataset.column_index(color_attr)
        color_key = dataset.to_original_units(color_attr, dataset.features[households, i, cd])
    else:
        color_key = np.zeros(households.size)

    model_grid = dataset.to_model_units(attr, grid)
    feats = dataset.features[households].copy()  # (H, V, D)
    curves = np.empty((households.size, grid.size))
    for gidx, value in enumerate(model_grid):
        feats[:, i, d] = value
        curves[:, gidx] = model.predict_probs(feats)[:, i]
    return ICECurve(
        alternative=i,
        attribute=attr,
        grid=np.asarray(grid),
        curves=curves,
        color_key=np.asarray(color_key, dtype=np.float64),
        households=tuple(int(h) for h in households),
        extrapolated=extrapolated,
    )


@dataclass(frozen=True)
class SubstitutionMap:
    """Percentage change of every choice probability after perturbing one
    alternative's attribute by a fixed percentage."""

    household: int
    alternative: int
    attribute: str
    pct: float
    base_probs: np.ndarray  # (V,)
    new_probs: np.ndarray  # (V,)
    pct_change: np.ndarray  # (V,)
    hop_distance: np.ndarray  # (V,)


def substitution_map(
    model: FittedModel, dataset: ChoiceDataset, n: int, j: int, attr: str, pct: float
) -> SubstitutionMap:
    """Recompute the full probability vector with alternative j's attribute
    scaled by (1 + pct/100) and report per-alternative percent changes."""
    if pct == 0.0:
        raise ConfigError("pct must be nonzero")
    z = _original_value(dataset, n, j, attr)
    if z == 0.0:
        raise DataError(
            f"attribute '{attr}' of alternative {j} is zero; a percentage change is undefined"
        )
    base = model.predict_probs(dataset.features[n])
    new = _perturbed_probs(model, dataset, n, j, attr, z * (1.0 + pct / 100.0))
    change = 100.0 * (new - base) / base
    if model.graph is not None:
        hops = bfs_distances(model.graph, j)
    else:
        hops = np.full(dataset.num_alternatives, -1, dtype=np.int64)
        hops[j] = 0
    return SubstitutionMap(
        household=n,
        alternative=j,
        attribute=attr,
        pct=pct,
        base_probs=base,
        new_probs=new,
        pct_change=change,
        hop_distance=hops,
    )
