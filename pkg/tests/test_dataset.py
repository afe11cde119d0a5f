"""Tests for table construction, CSV round-trips, splits, and encoding."""

from __future__ import annotations

import numpy as np
import numpy.testing as npt
import pytest

from treeprox.dataset import (
    CategoricalSpec,
    FeatureTable,
    ObservationSchema,
    assemble_table,
    kfold_indices,
    load_events,
    load_gazetteer,
    load_observations,
    split,
)
from treeprox.errors import ConfigurationError, InputDataError

from conftest import make_table


class TestFeatureTable:
    def test_basic_accessors(self):
        t = make_table({"a": [1.0, 2.0], "b": [3.0, 4.0]}, y=[0.0, 1.0])
        assert t.n == 2
        assert t.feature_names == ("a", "b")
        npt.assert_array_equal(t.column("b"), [3.0, 4.0])
        npt.assert_array_equal(t.matrix(), [[1.0, 3.0], [2.0, 4.0]])
        npt.assert_array_equal(t.matrix(["b", "a"]), [[3.0, 1.0], [4.0, 2.0]])
        npt.assert_array_equal(t.require_outcome(), [0.0, 1.0])

    def test_duplicate_ids_rejected(self):
        with pytest.raises(InputDataError):
            FeatureTable([1, 1, 2], {"a": np.zeros(3)})

    def test_length_mismatch_rejected(self):
        with pytest.raises(InputDataError):
            FeatureTable([1, 2], {"a": np.zeros(3)})

    def test_non_finite_rejected(self):
        with pytest.raises(InputDataError):
            make_table({"a": [1.0, np.nan]})
        with pytest.raises(InputDataError):
            make_table({"a": [1.0, 2.0]}, y=[np.inf, 0.0])

    def test_missing_column_error_names_it(self):
        t = make_table({"a": [1.0]})
        with pytest.raises(InputDataError, match="'zz'"):
            t.column("zz")

    def test_outcome_name_collision_rejected(self):
        with pytest.raises(InputDataError):
            FeatureTable([0], {"y": np.zeros(1)}, outcome=np.zeros(1), outcome_name="y")

    def test_take_and_select(self):
        t = make_table({"a": [1.0, 2.0, 3.0], "b": [4.0, 5.0, 6.0]}, y=[7.0, 8.0, 9.0])
        sub = t.take(np.array([2, 0]))
        npt.assert_array_equal(sub.ids, [2, 0])
        npt.assert_array_equal(sub.column("a"), [3.0, 1.0])
        npt.assert_array_equal(sub.outcome, [9.0, 7.0])
        only_b = t.select(["b"])
        assert only_b.feature_names == ("b",)
        npt.assert_array_equal(only_b.outcome, t.outcome)

    def test_group_of_splits_on_indicator_separator(self):
        t = make_table({"age": [1.0], "party=Democrat": [0.0]})
        assert t.group_of("party=Democrat") == "party"
        assert t.group_of("age") == "age"


class TestCsvRoundTrip:
    def test_bit_for_bit_round_trip(self, tmp_path, rng):
        # awkward doubles on purpose: subnormal, negative zero, huge, tiny
        vals = np.concatenate(
            [
                rng.standard_normal(50) * 1e8,
                rng.standard_normal(50) * 1e-8,
                [0.1, 1 / 3, -0.0, 5e-324, 1e300, -1e-300, 2.0**52 + 1],
            ]
        )
        n = len(vals)
        t = FeatureTable(
            np.arange(n),
            {"v": vals, "w": rng.random(n)},
            outcome=rng.standard_normal(n),
            outcome_name="score",
        )
        path = tmp_path / "t.csv"
        t.to_csv(path)
        back = FeatureTable.from_csv(path, outcome="score")
        assert back.feature_names == t.feature_names
        npt.assert_array_equal(back.ids, t.ids)
        for name in t.feature_names:
            assert back.column(name).tobytes() == t.column(name).tobytes()
        assert back.outcome.tobytes() == t.outcome.tobytes()
        assert back.outcome_name == "score"

    def test_rewrite_is_byte_identical(self, tmp_path, rng):
        t = make_table({"a": rng.standard_normal(20)}, y=rng.standard_normal(20))
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        t.to_csv(p1)
        FeatureTable.from_csv(p1, outcome="outcome").to_csv(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_from_csv_requires_id_first(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b\n1.0,2.0\n")
        with pytest.raises(InputDataError, match="'id'"):
            FeatureTable.from_csv(p)

    def test_from_csv_names_bad_cell(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("id,a\n0,1.0\n1,oops\n")
        with pytest.raises(InputDataError, match=r"row 3.*'a'"):
            FeatureTable.from_csv(p)

    def test_from_csv_rejects_ragged_row(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("id,a\n0,1.0,9.9\n")
        with pytest.raises(InputDataError, match="row 2"):
            FeatureTable.from_csv(p)

    def test_string_ids_survive(self, tmp_path):
        t = FeatureTable(np.array(["r1", "r2"], dtype=object), {"a": np.array([1.0, 2.0])})
        p = tmp_path / "s.csv"
        t.to_csv(p)
        back = FeatureTable.from_csv(p)
        npt.assert_array_equal(back.ids, t.ids)


class TestSplit:
    def test_partition_exact_and_disjoint(self):
        t = make_table({"a": np.arange(10.0)}, y=np.arange(10.0))
        train, test = split(t, n_train=5, seed=1)
        assert train.n == 5 and test.n == 5
        assert set(train.ids) | set(test.ids) == set(range(10))
        assert set(train.ids) & set(test.ids) == set()

    def test_same_seed_same_partition(self):
        t = make_table({"a": np.arange(10.0)})
        a = split(t, n_train=5, seed=1)
        b = split(t, n_train=5, seed=1)
        npt.assert_array_equal(a[0].ids, b[0].ids)
        npt.assert_array_equal(a[1].ids, b[1].ids)

    def test_pure_function_of_ids_and_seed(self, rng):
        cols = {"a": rng.standard_normal(30)}
        t = make_table(cols)
        shuffled = t.take(rng.permutation(30))
        a, _ = split(t, n_train=12, seed=7)
        b, _ = split(shuffled, n_train=12, seed=7)
        npt.assert_array_equal(np.sort(a.ids), np.sort(b.ids))

    def test_rows_keep_their_values(self, rng):
        t = make_table({"a": rng.standard_normal(40)}, y=rng.standard_normal(40))
        train, test = split(t, train_fraction=0.6, seed=3)
        for part in (train, test):
            for i, row_id in enumerate(part.ids):
                assert part.column("a")[i] == t.column("a")[row_id]

    def test_survey_subsample_sizes(self):
        # 45,700 rows with 40,000 in train leaves 5,700 held out
        t = FeatureTable(np.arange(45_700), {})
        train, test = split(t, n_train=40_000, seed=0)
        assert (train.n, test.n) == (40_000, 5_700)
        # 64,285 rows with 55,000 in train leaves 9,285 held out
        t2 = FeatureTable(np.arange(64_285), {})
        train2, test2 = split(t2, n_train=55_000, seed=0)
        assert (train2.n, test2.n) == (55_000, 9_285)

    def test_bad_counts_rejected(self):
        t = make_table({"a": np.arange(5.0)})
        with pytest.raises(ConfigurationError):
            split(t, n_train=5, seed=0)
        with pytest.raises(ConfigurationError):
            split(t, n_train=0, seed=0)
        with pytest.raises(ConfigurationError):
            split(t, train_fraction=1.5, seed=0)
        with pytest.raises(ConfigurationError):
            split(t, seed=0)
        with pytest.raises(ConfigurationError):
            split(t, n_train=2, train_fraction=0.5, seed=0)


class TestKfold:
    def test_partitions_rows_exactly(self):
        ids = np.arange(23)
        folds = kfold_indices(ids, 5, seed=0)
        assert len(folds) == 5
        merged = np.concatenate(folds)
        npt.assert_array_equal(np.sort(merged), np.arange(23))
        sizes = sorted(len(f) for f in folds)
        assert sizes == [4, 4, 5, 5, 5]

    def test_pure_function_of_ids(self, rng):
        ids = rng.permutation(40) + 100
        folds_a = kfold_indices(ids, 4, seed=9)
        # same ids in a different row order: fold membership by id must match
        perm = rng.permutation(40)
        folds_b = kfold_indices(ids[perm], 4, seed=9)
        for fa, fb in zip(folds_a, folds_b):
            npt.assert_array_equal(np.sort(ids[fa]), np.sort(ids[perm][fb]))

    def test_errors(self):
        with pytest.raises(ConfigurationError):
            kfold_indices(np.arange(10), 1, seed=0)
        with pytest.raises(ConfigurationError):
            kfold_indices(np.arange(3), 4, seed=0)


class TestCategoricalSpec:
    def test_party_coding_drops_reference(self):
        spec = CategoricalSpec("party", ("Democrat", "Independent", "Republican"))
        cols = spec.encode(["Republican"])
        assert list(cols) == ["party=Independent", "party=Republican"]
        assert cols["party=Independent"][0] == 0.0
        assert cols["party=Republican"][0] == 1.0

    def test_indicator_count_arithmetic(self):
        specs = [
            CategoricalSpec("a", ("x", "y", "z")),
            CategoricalSpec("b", ("u", "v")),
            CategoricalSpec("c", ("1", "2", "3", "4", "5")),
        ]
        total = sum(len(s.indicator_columns) for s in specs)
        assert total == 7

    def test_unseen_level_names_column_and_level(self):
        spec = CategoricalSpec("party", ("Democrat", "Republican"))
        with pytest.raises(InputDataError, match=r"'party'.*'Green'"):
            spec.encode(["Democrat", "Green"])

    def test_encoded_columns_are_distinct(self):
        spec = CategoricalSpec("g", ("a", "b", "c"))
        cols = spec.encode(["a", "b", "c", "b"])
        names = list(cols)
        for i in range(len(names)):
            for j in range(i + 1, len(names)):
                assert not np.array_equal(cols[names[i]], cols[names[j]])

    def test_bad_specs_rejected(self):
        with pytest.raises(ConfigurationError):
            CategoricalSpec("x", ("only",))
        with pytest.raises(ConfigurationError):
            CategoricalSpec("x", ("a", "a"))


class TestLoaders:
    def _write(self, path, text):
        path.write_text(text)
        return path

    def test_gazetteer_zero_pads(self, tmp_path):
        p = self._write(tmp_path / "gaz.csv", "zip,lat,lon\n501,40.9,-72.6\n90210,34.1,-118.4\n")
        gaz = load_gazetteer(p)
        assert set(gaz) == {"00501", "90210"}
        assert gaz["00501"].lat == 40.9

    def test_gazetteer_duplicate_zip_rejected(self, tmp_path):
        p = self._write(tmp_path / "gaz.csv", "zip,lat,lon\n00501,40.9,-72.6\n501,41.0,-72.0\n")
        with pytest.raises(InputDataError, match="00501"):
            load_gazetteer(p)

    def test_events_load_with_flags(self, tmp_path):
        p = self._write(
            tmp_path / "ev.csv",
            "id,lat,lon,time,size,fatal\n2,35.0,-90.0,1.5,12,1\n1,36.0,-91.0,0.5,7,0\n",
        )
        events = load_events(p)
        assert [e.id for e in events] == [2, 1]
        assert events[0].flags == {"fatal": 1.0}
        assert events[1].size == 7.0

    def test_events_duplicate_id_rejected(self, tmp_path):
        p = self._write(
            tmp_path / "ev.csv",
            "id,lat,lon,time,size\n1,35.0,-90.0,1.0,5\n1,36.0,-91.0,2.0,6\n",
        )
        with pytest.raises(InputDataError, match="duplicate event id 1"):
            load_events(p)

    def test_events_reject_non_integer_id(self, tmp_path):
        p = self._write(tmp_path / "ev.csv", "id,lat,lon,time,size\nx7,35.0,-90.0,1.0,5\n")
        with pytest.raises(InputDataError, match="'x7'"):
            load_events(p)

    def test_observations_prefer_explicit_coords(self, tmp_path):
        p = self._write(
            tmp_path / "obs.csv",
            "id,lat,lon,age\n1,40.0,-75.0,30\n2,41.0,-76.0,40\n",
        )
        schema = ObservationSchema(numeric=("age",))
        obs = load_observations(p, schema, gazetteer=None)
        assert obs.points[0].lat == 40.0
        npt.assert_array_equal(obs.numeric["age"], [30.0, 40.0])

    def test_observations_resolve_zip_via_gazetteer(self, tmp_path):
        gaz = load_gazetteer(
            self._write(tmp_path / "gaz.csv", "zip,lat,lon\n00501,40.9,-72.6\n")
        )
        p = self._write(tmp_path / "obs.csv", "id,zip,age\n1,501,33\n")
        schema = ObservationSchema(zip_column="zip", numeric=("age",))
        obs = load_observations(p, schema, gazetteer=gaz)
        assert obs.points[0].lat == 40.9
        assert obs.points[0].lon == -72.6

    def test_unknown_zip_names_zip_and_row(self, tmp_path):
        gaz = load_gazetteer(
            self._write(tmp_path / "gaz.csv", "zip,lat,lon\n00501,40.9,-72.6\n")
        )
        p = self._write(tmp_path / "obs.csv", "id,zip,age\n1,501,33\n2,99999,44\n")
        schema = ObservationSchema(zip_column="zip", numeric=("age",))
        with pytest.raises(InputDataError, match=r"'99999' at row 3"):
            load_observations(p, schema, gazetteer=gaz)

    def test_missing_value_rejected_by_default(self, tmp_path):
        p = self._write(tmp_path / "obs.csv", "id,lat,lon,age\n1,40.0,-75.0,\n")
        schema = ObservationSchema(numeric=("age",))
        with pytest.raises(InputDataError, match="'age'"):
            load_observations(p, schema)

    def test_numeric_imputation_uses_median(self, tmp_path):
        p = self._write(
            tmp_path / "obs.csv",
            "id,lat,lon,age\n1,40.0,-75.0,10\n2,40.0,-75.0,\n3,40.0,-75.0,20\n4,40.0,-75.0,60\n",
        )
        schema = ObservationSchema(numeric=("age",), impute=True)
        obs = load_observations(p, schema)
        npt.assert_array_equal(obs.numeric["age"], [10.0, 20.0, 20.0, 60.0])

    def test_categorical_imputation_mode_with_declared_tie_break(self, tmp_path):
        p = self._write(
            tmp_path / "obs.csv",
            "id,lat,lon,party\n1,40.0,-75.0,Republican\n2,40.0,-75.0,\n3,40.0,-75.0,Democrat\n",
        )
        spec = CategoricalSpec("party", ("Democrat", "Independent", "Republican"))
        schema = ObservationSchema(categorical=(spec,), impute=True)
        obs = load_observations(p, schema)
        # one vote each; tie resolves to the earlier declared level
        assert obs.categorical["party"][1] == "Democrat"

    def test_all_missing_column_cannot_be_imputed(self, tmp_path):
        p = self._write(tmp_path / "obs.csv", "id,lat,lon,age\n1,40.0,-75.0,\n2,41.0,-76.0,\n")
        schema = ObservationSchema(numeric=("age",), impute=True)
        with pytest.raises(InputDataError, match="'age'"):
            load_observations(p, schema)

    def test_assemble_orders_numeric_then_indicators_then_extra(self, tmp_path):
        p = self._write(
            tmp_path / "obs.csv",
            "id,lat,lon,age,party,score\n1,40.0,-75.0,30,Democrat,2\n2,41.0,-76.0,40,Republican,3\n",
        )
        spec = CategoricalSpec("party", ("Democrat", "Independent", "Republican"))
        schema = ObservationSchema(numeric=("age",), categorical=(spec,), outcome="score")
        obs = load_observations(p, schema)
        table = assemble_table(obs, schema, extra={"dist_near_1": np.array([5.0, 6.0])})
        assert table.feature_names == (
            "age",
            "party=Independent",
            "party=Republican",
            "dist_near_1",
        )
        npt.assert_array_equal(table.outcome, [2.0, 3.0])
        assert table.outcome_name == "score"

    def test_assemble_rejects_colliding_extra(self, tmp_path):
        p = self._write(tmp_path / "obs.csv", "id,lat,lon,age\n1,40.0,-75.0,30\n")
        schema = ObservationSchema(numeric=("age",))
        obs = load_observations(p, schema)
        with pytest.raises(InputDataError, match="'age'"):
            assemble_table(obs, schema, extra={"age": np.array([1.0])})
