"""Ingestion, feature assembly, scaling, folds, and synthetic generators."""

import numpy as np
import pytest

from spatialchoice.data import (
    ChoiceDataset,
    FeatureSpec,
    InteractionRule,
    SynthConfig,
    default_feature_spec,
    load_dataset,
    make_folds,
    standardize,
    synthesize,
    synthesize_tabular,
    unstandardize,
)
from spatialchoice.errors import ConfigError, DataError
from spatialchoice.graph import build_graph


def write_tiny_tables(tmp_path, work_at_centroid=False):
    """Two communities, two households, hand-checkable numbers."""
    (tmp_path / "community.csv").write_text(
        "community_id,units,median_income,pct_black,pct_white\n"
        "0,100.0,50.0,0.3,0.6\n"
        "1,200.0,70.0,0.1,0.8\n"
    )
    work = "3.0,4.0" if not work_at_centroid else "0.0,0.0"
    (tmp_path / "households.csv").write_text(
        "household_id,income,black_dummy,white_dummy,work_x,work_y,chosen\n"
        f"10,60.0,1.0,0.0,{work},0\n"
        "11,40.0,0.0,1.0,6.0,8.0,1\n"
    )
    (tmp_path / "centroids.csv").write_text(
        "community_id,x_km,y_km\n0,0.0,0.0\n1,6.0,8.0\n"
    )
    spec = FeatureSpec(
        community_columns=("units",),
        interactions=(
            InteractionRule("black_dummy", "pct_black", "black_interact", "product"),
            InteractionRule("white_dummy", "pct_white", "white_interact", "product"),
            InteractionRule("income", "median_income", "income_interact", "difference"),
        ),
        include_work_distance=True,
        scaled_columns=(),
    )
    return (tmp_path / "community.csv", tmp_path / "households.csv", tmp_path / "centroids.csv"), spec


class TestLoadDataset:
    def test_cell_by_cell_assembly(self, tmp_path):
        paths, spec = write_tiny_tables(tmp_path)
        ds = load_dataset(*paths, spec)
        assert ds.feature_names == ("units", "work_distance", "black_interact", "white_interact", "income_interact")
        # units broadcast across households
        np.testing.assert_allclose(ds.features[:, 0, 0], 100.0)
        np.testing.assert_allclose(ds.features[:, 1, 0], 200.0)
        # work distance: household 10 at (3,4): 5 km to centroid 0, 5 km to centroid 1
        np.testing.assert_allclose(ds.features[0, :, 1], np.log(5.0))
        # interactions: dummy gating and income difference
        np.testing.assert_allclose(ds.features[0, :, 2], [0.3, 0.1])  # black dummy 1
        np.testing.assert_allclose(ds.features[1, :, 2], [0.0, 0.0])  # black dummy 0 -> all zeros
        np.testing.assert_allclose(ds.features[1, :, 3], [0.6, 0.8])
        np.testing.assert_allclose(ds.features[0, :, 4], [60.0 - 50.0, 60.0 - 70.0])
        np.testing.assert_array_equal(ds.chosen, [0, 1])
        assert ds.household_ids == (10, 11)

    def test_work_at_centroid_uses_distance_floor(self, tmp_path):
        paths, spec = write_tiny_tables(tmp_path, work_at_centroid=True)
        ds = load_dataset(*paths, spec)
        assert ds.features[0, 0, 1] == np.log(0.1)

    def test_multiple_work_locations_use_furthest(self, tmp_path):
        paths, spec = write_tiny_tables(tmp_path)
        (tmp_path / "households.csv").write_text(
            "household_id,income,black_dummy,white_dummy,work_x,work_y,work_x2,work_y2,chosen\n"
            "10,60.0,1.0,0.0,0.0,1.0,0.0,2.0,0\n"
        )
        ds = load_dataset(*paths, spec)
        assert ds.features[0, 0, 1] == pytest.approx(np.log(2.0))  # furthest of 1 km and 2 km

    def test_missing_column_rejected(self, tmp_path):
        paths, spec = write_tiny_tables(tmp_path)
        (tmp_path / "community.csv").write_text("community_id,units\n0,1\n1,2\n")
        with pytest.raises(DataError, match="missing column"):
            load_dataset(*paths, spec)

    def test_non_numeric_cell_rejected(self, tmp_path):
        paths, spec = write_tiny_tables(tmp_path)
        (tmp_path / "community.csv").write_text(
            "community_id,units,median_income,pct_black,pct_white\n0,abc,1,1,1\n1,2,1,1,1\n"
        )
        with pytest.raises(DataError, match="non-numeric"):
            load_dataset(*paths, spec)

    def test_unknown_chosen_rejected(self, tmp_path):
        paths, spec = write_tiny_tables(tmp_path)
        (tmp_path / "households.csv").write_text(
            "household_id,income,black_dummy,white_dummy,work_x,work_y,chosen\n10,1,0,0,0,0,9\n"
        )
        with pytest.raises(DataError, match="not a known community"):
            load_dataset(*paths, spec)

    def test_deterministic_ingestion(self, tmp_path):
        paths, spec = write_tiny_tables(tmp_path)
        a = load_dataset(*paths, spec)
        b = load_dataset(*paths, spec)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.chosen, b.chosen)

    def test_default_spec_column_set(self):
        spec = default_feature_spec()
        assert len(spec.feature_names) == 13
        assert spec.feature_names.index("work_distance") == 8
        assert set(spec.scaled_columns) == {
            "units", "house_value", "house_age", "transit_access", "pop_density", "income_interact",
        }


class TestStandardize:
    def make_dataset(self, values):
        values = np.asarray(values, dtype=float).reshape(1, -1, 1)
        return ChoiceDataset(
            features=values,
            chosen=np.zeros(1, dtype=int),
            centroids=np.zeros((values.shape[1], 2)),
            feature_names=("col",),
        )

    def spec(self, scaled=("col",)):
        return FeatureSpec(community_columns=("col",), include_work_distance=False, scaled_columns=scaled)

    def test_unit_sample_variance(self):
        ds = standardize(self.make_dataset([1.0, 2.0, 3.0]), self.spec())
        col = ds.features[:, :, 0].reshape(-1)
        assert abs(col.mean()) < 1e-12
        assert abs(col.var(ddof=1) - 1.0) < 1e-12

    def test_zero_variance_rejected(self):
        with pytest.raises(DataError, match="zero variance"):
            standardize(self.make_dataset([2.0, 2.0, 2.0]), self.spec())

    def test_inverse_roundtrip(self):
        rng = np.random.default_rng(0)
        raw = rng.normal(5.0, 3.0, size=12)
        ds = standardize(self.make_dataset(raw), self.spec())
        back = unstandardize(ds)
        np.testing.assert_allclose(back.features[:, :, 0].reshape(-1), raw, atol=1e-10)

    def test_unit_conversions_match_scaling(self):
        ds = standardize(self.make_dataset([1.0, 2.0, 3.0]), self.spec())
        z = ds.to_original_units("col", ds.features[0, 1, 0])
        assert z == pytest.approx(2.0)
        assert ds.to_model_units("col", z) == pytest.approx(ds.features[0, 1, 0])


class TestFolds:
    def test_each_fold_one_household(self):
        plan = make_folds(10, 10, seed=1)
        assert np.bincount(plan.assignments).tolist() == [1] * 10

    def test_uneven_fold_counts(self):
        plan = make_folds(3838, 10, seed=0)
        sizes = np.bincount(plan.assignments)
        assert set(sizes.tolist()) == {383, 384}
        assert sizes.sum() == 3838

    def test_deterministic(self):
        a = make_folds(100, 5, seed=9)
        b = make_folds(100, 5, seed=9)
        assert np.array_equal(a.assignments, b.assignments)
        c = make_folds(100, 5, seed=10)
        assert not np.array_equal(a.assignments, c.assignments)

    def test_disjoint_cover(self):
        plan = make_folds(53, 7, seed=2)
        seen = np.zeros(53, dtype=int)
        for fold in range(7):
            _, test = plan.train_test(fold)
            seen[test] += 1
        assert (seen == 1).all()

    def test_k_greater_than_n_rejected(self):
        with pytest.raises(ConfigError):
            make_folds(3, 10, seed=0)


class TestSynthesize:
    def test_zero_coefficients_uniform_frequencies(self):
        n, v = 10000, 8
        ds = synthesize(SynthConfig(n, v, 3, (0.0, 0.0, 0.0), "mnl", seed=0))
        counts = np.bincount(ds.chosen, minlength=v)
        # binomial 3-sigma band around n/v
        sigma = np.sqrt(n * (1 / v) * (1 - 1 / v))
        assert np.all(np.abs(counts - n / v) < 3 * sigma)

    def test_truth_attached(self):
        ds = synthesize(SynthConfig(50, 5, 2, (1.0, -1.0), "mnl", seed=3))
        assert ds.truth["generator_model"] == "mnl"
        assert ds.truth["true_coefficients"] == [1.0, -1.0]

    def test_scl_mu_one_indistinguishable_from_mnl(self):
        # same seed, same features: identical choice laws at mu=1
        n, v = 6000, 6
        g = build_graph(v, [(i, (i + 1) % v) for i in range(v)])
        b = (0.8, -0.5)
        ds_scl = synthesize(SynthConfig(n, v, 2, b, "scl", graph=g, mu=1.0, seed=11))
        ds_mnl = synthesize(SynthConfig(n, v, 2, b, "mnl", seed=11))
        assert np.array_equal(ds_scl.chosen, ds_mnl.chosen)
        # and on independent seeds, frequencies agree within a 4-sigma band
        ds_scl2 = synthesize(SynthConfig(n, v, 2, b, "scl", graph=g, mu=1.0, seed=12))
        f1 = np.bincount(ds_scl2.chosen, minlength=v) / n
        f2 = np.bincount(ds_mnl.chosen, minlength=v) / n
        pooled = (f1 + f2) / 2
        z = np.abs(f1 - f2) / np.sqrt(2 * pooled * (1 - pooled) / n)
        assert np.all(z < 4.0)

    def test_nl_generator_uses_exact_probabilities(self):
        nests = ((0, 1), (2, 3))
        cfg = SynthConfig(30000, 4, 1, (1.0,), "nl", nests=nests, mus=(0.5, 0.5), seed=7)
        ds = synthesize(cfg)
        # frequency of each alternative approaches its average true probability
        from spatialchoice.models import nl_probs_closed

        probs = nl_probs_closed(nests, (0.5, 0.5), b=np.array([1.0]), features=ds.features)
        expected = probs.mean(axis=0)
        observed = np.bincount(ds.chosen, minlength=4) / len(ds.chosen)
        np.testing.assert_allclose(observed, expected, atol=0.012)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SynthConfig(10, 4, 2, (1.0,), "mnl")  # wrong coefficient count
        with pytest.raises(ConfigError):
            SynthConfig(10, 4, 2, (1.0, 2.0), "scl")  # scl needs graph+mu
        with pytest.raises(ConfigError):
            SynthConfig(10, 4, 2, (1.0, 2.0), "nl")  # nl needs nests+mus


class TestTabularSynthesis:
    def test_roundtrip_through_loader(self, tmp_path):
        cfg = SynthConfig(40, 6, 5, (0.5, -0.5, 0.3, 0.2, -0.1), "mnl", seed=5)
        paths = synthesize_tabular(cfg, tmp_path / "out")
        spec = FeatureSpec.load(paths["feature_spec"])
        ds = load_dataset(paths["community_csv"], paths["household_csv"], paths["centroid_csv"], spec)
        assert ds.num_households == 40
        assert ds.num_alternatives == 6
        assert ds.num_features == 5
        # community columns identical across households; interactions vary
        assert np.array_equal(ds.features[0, :, 0], ds.features[1, :, 0])
        assert not np.array_equal(ds.features[0, :, -1], ds.features[1, :, -1])

    def test_truth_file_written(self, tmp_path):
        import json

        cfg = SynthConfig(10, 5, 4, (1.0, 0.0, 0.0, 0.0), "mnl", seed=2)
        paths = synthesize_tabular(cfg, tmp_path / "o")
        with open(paths["truth"]) as fh:
            truth = json.load(fh)
        assert truth["generator_model"] == "mnl"
        assert len(truth["true_coefficients"]) == 4
