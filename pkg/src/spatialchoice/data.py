"""Dataset ingestion, feature assembly, scaling, fold plans, and synthesis.

The tabular interface reads three CSVs (community attributes, households,
centroids) and assembles one feature matrix per household over all
alternatives: community columns broadcast across households, work
distance is the log planar distance to each community centroid, and
interaction columns couple household attributes to community attributes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError
from .graph import AlternativeGraph
from . import models as mdl

WORK_DISTANCE_FLOOR_KM = 0.1  # log() needs a floor when work sits on a centroid


@dataclass(frozen=True)
class InteractionRule:
    """household column (x) community column -> named output.

    ``op`` is 'product' (dummy gating) or 'difference' (household minus
    community, e.g. income gaps).
    """

    household: str
    community: str
    output: str
    op: str = "product"

    def __post_init__(self):
        if self.op not in ("product", "difference"):
            raise ConfigError(f"unknown interaction op '{self.op}'")


@dataclass(frozen=True)
class FeatureSpec:
    """Declares how raw columns become the model's feature matrix."""

    community_columns: tuple[str, ...]
    interactions: tuple[InteractionRule, ...] = ()
    include_work_distance: bool = True
    scaled_columns: tuple[str, ...] = ()
    feature_order: tuple[str, ...] | None = None

    def __post_init__(self):
        produced = list(self.community_columns)
        if self.include_work_distance:
            produced.append("work_distance")
        for rule in self.interactions:
            if rule.output in produced:
                raise ConfigError(f"interaction output '{rule.output}' collides")
            produced.append(rule.output)
        if len(set(produced)) != len(produced):
            raise ConfigError("duplicate feature names")
        order = self.feature_order if self.feature_order is not None else tuple(produced)
        if sorted(order) != sorted(produced):
            raise ConfigError("feature_order must permute the produced columns")
        for col in self.scaled_columns:
            if col not in produced:
                raise ConfigError(f"scaled column '{col}' is not produced")

    @property
    def feature_names(self) -> tuple[str, ...]:
        if self.feature_order is not None:
            return self.feature_order
        produced = list(self.community_columns)
        if self.include_work_distance:
            produced.append("work_distance")
        produced.extend(rule.output for rule in self.interactions)
        return tuple(produced)

    def to_dict(self) -> dict:
        return {
            "community_columns": list(self.community_columns),
            "interactions": [
                {"household": r.household, "community": r.community, "output": r.output, "op": r.op}
                for r in self.interactions
            ],
            "include_work_distance": self.include_work_distance,
            "scaled_columns": list(self.scaled_columns),
            "feature_order": None if self.feature_order is None else list(self.feature_order),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        return cls(
            community_columns=tuple(d.get("community_columns", ())),
            interactions=tuple(
                InteractionRule(r["household"], r["community"], r["output"], r.get("op", "product"))
                for r in d.get("interactions", ())
            ),
            include_work_distance=bool(d.get("include_work_distance", True)),
            scaled_columns=tuple(d.get("scaled_columns", ())),
            feature_order=tuple(d["feature_order"]) if d.get("feature_order") else None,
        )

    @classmethod
    def load(cls, path) -> "FeatureSpec":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read feature spec {path}: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def default_feature_spec() -> FeatureSpec:
    """Residential-choice feature set: housing, land use, transportation,
    and demographic columns plus the three household interactions."""
    return FeatureSpec(
        community_columns=(
            "units",
            "house_value",
            "house_age",
            "land_mixture",
            "pct_single_house",
            "pct_multi_house",
            "pct_office",
            "transit_access",
            "pop_density",
        ),
        interactions=(
            InteractionRule("black_dummy", "pct_black", "black_interact", "product"),
            InteractionRule("white_dummy", "pct_white", "white_interact", "product"),
            InteractionRule("income", "median_income", "income_interact", "difference"),
        ),
        include_work_distance=True,
        scaled_columns=(
            "units",
            "house_value",
            "house_age",
            "transit_access",
            "pop_density",
            "income_interact",
        ),
        feature_order=(
            "units",
            "house_value",
            "house_age",
            "land_mixture",
            "pct_single_house",
            "pct_multi_house",
            "pct_office",
            "transit_access",
            "work_distance",
            "pop_density",
            "black_interact",
            "white_interact",
            "income_interact",
        ),
    )


@dataclass(frozen=True)
class ChoiceDataset:
    """Per-household feature matrices over all alternatives.

    ``scaling`` maps standardized column names to their (mean, std) so that
    interpretation tools can move between model units and original units.
    """

    features: np.ndarray  # (N, V, D)
    chosen: np.ndarray  # (N,)
    centroids: np.ndarray  # (V, 2), km
    feature_names: tuple[str, ...]
    scaling: dict[str, tuple[float, float]] = field(default_factory=dict)
    household_ids: tuple[int, ...] | None = None
    truth: dict | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 3:
            raise DataError(f"features must be (N, V, D), got {feats.shape}")
        n, v, d = feats.shape
        if len(self.feature_names) != d:
            raise DataError("feature_names length does not match feature depth")
        if len(set(self.feature_names)) != d:
            raise DataError("feature_names must be unique")
        chosen = np.asarray(self.chosen)
        if chosen.shape != (n,):
            raise DataError("chosen must have one entry per household")
        if chosen.size and (chosen.min() < 0 or chosen.max() >= v):
            raise DataError("chosen alternative index out of range")
        if not np.all(np.isfinite(feats)):
            raise DataError("non-finite feature values")
        cents = np.asarray(self.centroids, dtype=np.float64)
        if cents.shape != (v, 2):
            raise DataError(f"centroids must be ({v}, 2), got {cents.shape}")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "chosen", np.asarray(chosen, dtype=np.int64))
        object.__setattr__(self, "centroids", cents)

    @property
    def num_households(self) -> int:
        return self.features.shape[0]

    @property
    def num_alternatives(self) -> int:
        return self.features.shape[1]

    @property
    def num_features(self) -> int:
        return self.features.shape[2]

    def column_index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError as exc:
            raise DataError(f"unknown feature '{name}'") from exc

    def subset(self, idx) -> "ChoiceDataset":
        idx = np.asarray(idx)
        return replace(
            self,
            features=self.features[idx],
            chosen=self.chosen[idx],
            household_ids=None
            if self.household_ids is None
            else tuple(self.household_ids[int(i)] for i in idx),
        )

    def to_original_units(self, name: str, values):
        mean, std = self.scaling.get(name, (0.0, 1.0))
        return np.asarray(values) * std + mean

    def to_model_units(self, name: str, values):
        mean, std = self.scaling.get(name, (0.0, 1.0))
        return (np.asarray(values) - mean) / std


# ---------------------------------------------------------------------------
# CSV ingestion.


def _read_table(path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise DataError(f"{path}: empty file")
            rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return [h.strip() for h in header], rows


def _cell_float(path, lineno, col, raw) -> float:
    try:
        value = float(raw)
    except ValueError as exc:
        raise DataError(f"{path}:{lineno}: non-numeric value '{raw}' in column '{col}'") from exc
    if not np.isfinite(value):
        raise DataError(f"{path}:{lineno}: non-finite value in column '{col}'")
    return value


def _require(header: list[str], cols, path) -> None:
    missing = [c for c in cols if c not in header]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}")


def load_dataset(community_csv, household_csv, centroid_csv, spec: FeatureSpec) -> ChoiceDataset:
    """Assemble a :class:`ChoiceDataset` from the three-file tabular schema.

    Community rows are keyed by ``community_id`` (0-indexed, dense).
    Households must carry income, the race dummies named by the
    interaction rules, at least one work location pair, and the chosen
    community id.  With multiple work locations the furthest one defines
    the work distance.
    """
    com_header, com_rows = _read_table(community_csv)
    _require(com_header, ["community_id"], community_csv)
    needed_com = set(spec.community_columns) | {r.community for r in spec.interactions}
    _require(com_header, sorted(needed_com), community_csv)
    com_idx = {c: i for i, c in enumerate(com_header)}

    by_id: dict[int, dict[str, float]] = {}
    for ln, row in enumerate(com_rows, start=2):
        try:
            cid = int(row[com_idx["community_id"]])
        except ValueError as exc:
            raise DataError(f"{community_csv}:{ln}: non-integer community_id") from exc
        by_id[cid] = {
            c: _cell_float(community_csv, ln, c, row[com_idx[c]]) for c in sorted(needed_com)
        }
    num_alt = len(by_id)
    if sorted(by_id) != list(range(num_alt)):
        raise DataError(f"{community_csv}: community ids must be dense 0..{num_alt - 1}")

    cen_header, cen_rows = _read_table(centroid_csv)
    _require(cen_header, ["community_id", "x_km", "y_km"], centroid_csv)
    cen_idx = {c: i for i, c in enumerate(cen_header)}
    centroids = np.full((num_alt, 2), np.nan)
    for ln, row in enumerate(cen_rows, start=2):
        cid = int(row[cen_idx["community_id"]])
        if cid not in by_id:
            raise DataError(f"{centroid_csv}:{ln}: unknown community id {cid}")
        centroids[cid, 0] = _cell_float(centroid_csv, ln, "x_km", row[cen_idx["x_km"]])
        centroids[cid, 1] = _cell_float(centroid_csv, ln, "y_km", row[cen_idx["y_km"]])
    if np.isnan(centroids).any():
        raise DataError(f"{centroid_csv}: missing centroid rows")

    hh_header, hh_rows = _read_table(household_csv)
    base_cols = ["household_id", "income", "chosen"]
    hh_needed = set(base_cols) | {r.household for r in spec.interactions}
    _require(hh_header, sorted(hh_needed), household_csv)
    work_pairs = []
    if spec.include_work_distance:
        _require(hh_header, ["work_x", "work_y"], household_csv)
        suffixes = [""] + [
            h[len("work_x"):] for h in hh_header if h.startswith("work_x") and h != "work_x"
        ]
        for suf in suffixes:
            if f"work_x{suf}" in hh_header and f"work_y{suf}" in hh_header:
                work_pairs.append((f"work_x{suf}", f"work_y{suf}"))
    hh_idx = {c: i for i, c in enumerate(hh_header)}

    community_matrix = {
        c: np.array([by_id[i][c] for i in range(num_alt)]) for c in sorted(needed_com)
    }
    names = spec.feature_names
    n_households = len(hh_rows)
    features = np.empty((n_households, num_alt, len(names)))
    chosen = np.empty(n_households, dtype=np.int64)
    household_ids = []

    for n, row in enumerate(hh_rows):
        ln = n + 2
        hid = int(_cell_float(household_csv, ln, "household_id", row[hh_idx["household_id"]]))
        household_ids.append(hid)
        cid = row[hh_idx["chosen"]].strip()
        try:
            chosen_id = int(cid)
        except ValueError as exc:
            raise DataError(f"{household_csv}:{ln}: non-integer chosen id '{cid}'") from exc
        if chosen_id not in by_id:
            raise DataError(f"{household_csv}:{ln}: chosen id {chosen_id} is not a known community")
        chosen[n] = chosen_id

        columns: dict[str, np.ndarray] = {c: community_matrix[c] for c in spec.community_columns}
        if spec.include_work_distance:
            dists = np.zeros((len(work_pairs), num_alt))
            for w, (cx, cy) in enumerate(work_pairs):
                wx = _cell_float(household_csv, ln, cx, row[hh_idx[cx]])
                wy = _cell_float(household_csv, ln, cy, row[hh_idx[cy]])
                dists[w] = np.hypot(centroids[:, 0] - wx, centroids[:, 1] - wy)
            furthest = dists.max(axis=0)
            columns["work_distance"] = np.log(np.maximum(furthest, WORK_DISTANCE_FLOOR_KM))
        for rule in spec.interactions:
            hval = _cell_float(household_csv, ln, rule.household, row[hh_idx[rule.household]])
            cvals = community_matrix[rule.community]
            columns[rule.output] = hval * cvals if rule.op == "product" else hval - cvals
        for d, name in enumerate(names):
            features[n, :, d] = columns[name]

    return ChoiceDataset(
        features=features,
        chosen=chosen,
        centroids=centroids,
        feature_names=names,
        household_ids=tuple(household_ids),
    )


# ---------------------------------------------------------------------------
# Standardization.


def standardize(dataset: ChoiceDataset, spec: FeatureSpec) -> ChoiceDataset:
    """Scale the flagged columns to zero mean and unit sample variance over
    all (household, alternative) cells; constants for the inverse transform
    are recorded on the dataset."""
    feats = dataset.features.copy()
    scaling = dict(dataset.scaling)
    for name in spec.scaled_columns:
        d = dataset.column_index(name)
        col = feats[:, :, d]
        mean = float(col.mean())
        std = float(col.std(ddof=1))
        if std == 0.0 or not np.isfinite(std):
            raise DataError(f"column '{name}' has zero variance; cannot standardize")
        feats[:, :, d] = (col - mean) / std
        scaling[name] = (mean, std)
    return replace(dataset, features=feats, scaling=scaling)


def unstandardize(dataset: ChoiceDataset) -> ChoiceDataset:
    """Invert :func:`standardize` using the recorded constants."""
    feats = dataset.features.copy()
    for name, (mean, std) in dataset.scaling.items():
        d = dataset.column_index(name)
        feats[:, :, d] = feats[:, :, d] * std + mean
    return replace(dataset, features=feats, scaling={})


# ---------------------------------------------------------------------------
# Fold plans.


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: np.ndarray  # (N,) fold index per household
    seed: int

    def train_test(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        test = np.flatnonzero(self.assignments == fold)
        train = np.flatnonzero(self.assignments != fold)
        return train, test


def make_folds(n: int, k: int, seed) -> FoldPlan:
    """Shuffled fold assignment; fold sizes differ by at most one."""
    if k < 2:
        raise ConfigError(f"fold count must be >= 2, got {k}")
    if k > n:
        raise ConfigError(f"fold count {k} exceeds {n} households")
    rng = np.random.default_rng(seed)
    assign = np.arange(n) % k
    rng.shuffle(assign)
    return FoldPlan(k=k, assignments=assign, seed=int(seed))


# ---------------------------------------------------------------------------
# Synthetic data with known ground truth.


@dataclass(frozen=True)
class SynthConfig:
    """Ground-truth generator settings for recovery experiments.

    ``generator_model`` selects which probability law samples the choices;
    nl needs ``nests``/``mus``, scl needs ``graph``/``mu``.
    """

    n_households: int
    n_alternatives: int
    n_features: int
    true_coefficients: tuple[float, ...]
    generator_model: str = "mnl"  # mnl | nl | scl
    graph: AlternativeGraph | None = None
    nests: tuple[tuple[int, ...], ...] | None = None
    mus: tuple[float, ...] | None = None
    mu: float | None = None
    seed: int = 0

    def __post_init__(self):
        if len(self.true_coefficients) != self.n_features:
            raise ConfigError("true_coefficients length must equal n_features")
        if self.generator_model not in ("mnl", "nl", "scl"):
            raise ConfigError(f"unknown generator model '{self.generator_model}'")
        if self.generator_model == "nl" and (self.nests is None or self.mus is None):
            raise ConfigError("nl generator requires nests and mus")
        if self.generator_model == "scl":
            if self.graph is None or self.mu is None:
                raise ConfigError("scl generator requires a graph and mu")
            if not (0.0 < self.mu <= 1.0):
                raise ConfigError(f"mu={self.mu} outside (0, 1]")
        if self.mus is not None and any(not (0.0 < m <= 1.0) for m in self.mus):
            raise ConfigError("every mu must lie in (0, 1]")


def generator_probs(config: SynthConfig, features: np.ndarray) -> np.ndarray:
    b = np.asarray(config.true_coefficients)
    if config.generator_model == "mnl":
        return mdl.mnl_probs(b, features=features)
    if config.generator_model == "nl":
        return mdl.nl_probs_closed(config.nests, config.mus, b=b, features=features)
    return mdl.scl_probs_closed(config.graph, config.mu, b=b, features=features)


def synthesize(config: SynthConfig) -> ChoiceDataset:
    """Standard-normal features, exact-model choice sampling, truth attached.

    Centroids are uniform points in a 10 km box so that distance metrics
    stay meaningful on synthetic data.
    """
    rng = np.random.default_rng(config.seed)
    n, v, d = config.n_households, config.n_alternatives, config.n_features
    features = rng.standard_normal((n, v, d))
    probs = generator_probs(config, features)
    cum = np.cumsum(probs, axis=-1)
    draws = rng.random((n, 1))
    chosen = (draws > cum).sum(axis=-1)
    centroids = rng.uniform(0.0, 10.0, size=(v, 2))
    truth = {
        "generator_model": config.generator_model,
        "true_coefficients": [float(x) for x in config.true_coefficients],
        "seed": int(config.seed),
    }
    if config.mus is not None:
        truth["mus"] = [float(m) for m in config.mus]
    if config.mu is not None:
        truth["mu"] = float(config.mu)
    if config.nests is not None:
        truth["nests"] = [list(nest) for nest in config.nests]
    return ChoiceDataset(
        features=features,
        chosen=chosen,
        centroids=centroids,
        feature_names=tuple(f"x{i}" for i in range(d)),
        truth=truth,
    )


def synthesize_tabular(config: SynthConfig, outdir, graph: AlternativeGraph | None = None) -> dict:
    """Generate a schema-compatible synthetic dataset on disk.

    Community attributes, household incomes, and work locations are drawn
    at random; features are assembled through the same pipeline as real
    data; choices are sampled from the generator model.  Writes
    community.csv, households.csv, centroids.csv, featurespec.json,
    truth.json, and graph.csv (when a graph is involved), and returns the
    path map.
    """
    import os

    rng = np.random.default_rng(config.seed)
    n, v = config.n_households, config.n_alternatives
    n_direct = config.n_features - 2  # + income_interact + work_distance
    if n_direct < 1:
        raise ConfigError("tabular synthesis needs n_features >= 3")
    direct_cols = tuple(f"attr{i}" for i in range(n_direct))
    spec = FeatureSpec(
        community_columns=direct_cols,
        interactions=(InteractionRule("income", "median_income", "income_interact", "difference"),),
        include_work_distance=True,
        scaled_columns=(),
        feature_order=direct_cols + ("income_interact", "work_distance"),
    )

    community = rng.standard_normal((v, n_direct))
    median_income = rng.standard_normal(v)
    centroids = rng.uniform(0.0, 10.0, size=(v, 2))
    income = rng.standard_normal(n)
    work = rng.uniform(0.0, 10.0, size=(n, 2))

    features = np.empty((n, v, config.n_features))
    order = spec.feature_names
    for hh in range(n):
        cols = {c: community[:, i] for i, c in enumerate(direct_cols)}
        cols["income_interact"] = income[hh] - median_income
        dist = np.hypot(centroids[:, 0] - work[hh, 0], centroids[:, 1] - work[hh, 1])
        cols["work_distance"] = np.log(np.maximum(dist, WORK_DISTANCE_FLOOR_KM))
        for d_i, name in enumerate(order):
            features[hh, :, d_i] = cols[name]
    probs = generator_probs(config, features)
    cum = np.cumsum(probs, axis=-1)
    chosen = (rng.random((n, 1)) > cum).sum(axis=-1)

    os.makedirs(outdir, exist_ok=True)
    paths = {
        "community_csv": os.path.join(outdir, "community.csv"),
        "household_csv": os.path.join(outdir, "households.csv"),
        "centroid_csv": os.path.join(outdir, "centroids.csv"),
        "feature_spec": os.path.join(outdir, "featurespec.json"),
        "truth": os.path.join(outdir, "truth.json"),
    }
    with open(paths["community_csv"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["community_id", *direct_cols, "median_income"])
        for i in range(v):
            writer.writerow([i, *[repr(float(x)) for x in community[i]], repr(float(median_income[i]))])
    with open(paths["household_csv"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["household_id", "income", "work_x", "work_y", "chosen"])
        for hh in range(n):
            writer.writerow(
                [hh, repr(float(income[hh])), repr(float(work[hh, 0])), repr(float(work[hh, 1])), int(chosen[hh])]
            )
    with open(paths["centroid_csv"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["community_id", "x_km", "y_km"])
        for i in range(v):
            writer.writerow([i, repr(float(centroids[i, 0])), repr(float(centroids[i, 1]))])
    spec.save(paths["feature_spec"])
    truth = {
        "generator_model": config.generator_model,
        "true_coefficients": [float(x) for x in config.true_coefficients],
        "feature_order": list(order),
        "seed": int(config.seed),
    }
    if config.mu is not None:
        truth["mu"] = float(config.mu)
    if config.mus is not None:
        truth["mus"] = [float(m) for m in config.mus]
    if config.nests is not None:
        truth["nests"] = [list(nest) for nest in config.nests]
    with open(paths["truth"], "w") as fh:
        json.dump(truth, fh, indent=1)
    use_graph = config.graph if config.graph is not None else graph
    if use_graph is not None:
        from .graph import write_edge_csv

        paths["graph_csv"] = os.path.join(outdir, "graph.csv")
        write_edge_csv(use_graph, paths["graph_csv"])
    return paths
