import json

import numpy as np
import pytest

from conftest import tiny_tables
from indalpha import DataError, ModelSpec, StudyData, build_pair_index, load_study, write_study
from indalpha.data import build_study


class TestPairIndex:
    def test_small_k(self):
        assert build_pair_index(2) == [(1, 2)]
        assert build_pair_index(3) == [(1, 2), (1, 3), (2, 3)]
        assert build_pair_index(4) == [(1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)]

    def test_rejects_single_item(self):
        with pytest.raises(DataError):
            build_pair_index(1)

    @pytest.mark.parametrize("k", [2, 3, 5, 8])
    def test_bijection(self, k):
        pairs = build_pair_index(k)
        assert len(pairs) == len(set(pairs)) == k * (k - 1) // 2
        assert all(1 <= i < j <= k for i, j in pairs)
        assert pairs == sorted(pairs)


class TestModelSpec:
    def test_round_trip(self):
        spec = ModelSpec(mean_columns=("age",), alpha_columns=("income",), pooled_alpha=True)
        assert ModelSpec.from_dict(spec.to_dict()) == spec

    def test_missing_key_named(self):
        doc = {"mean": {"columns": []}, "variance": {"mode": "covariate"}, "alpha": {}}
        with pytest.raises(DataError, match="alpha.columns"):
            ModelSpec.from_dict(doc)
        with pytest.raises(DataError, match="'variance'"):
            ModelSpec.from_dict({"mean": {"columns": []}, "alpha": {"columns": []}})

    def test_unknown_key_rejected(self):
        doc = {"mean": {"columns": [], "colour": 1}, "variance": {"mode": "covariate"},
               "alpha": {"columns": []}}
        with pytest.raises(DataError, match="colour"):
            ModelSpec.from_dict(doc)

    def test_bad_choice(self):
        with pytest.raises(DataError, match="mean.link"):
            ModelSpec(mean_link="probit")
        with pytest.raises(DataError, match="variance_function"):
            ModelSpec(var_function="poisson")

    def test_gaussian_structure_only_for_alpha(self):
        ModelSpec(alpha_structure="gaussian")
        with pytest.raises(DataError):
            ModelSpec(mean_structure="gaussian")

    def test_invalid_json_reports_line(self, tmp_path):
        p = tmp_path / "spec.json"
        p.write_text('{"mean": {\n "columns": [}\n}')
        with pytest.raises(DataError, match="line 2"):
            ModelSpec.from_json(p)


class TestLoadStudy:
    def test_basic_construction(self, tmp_path):
        study, spec = load_study(**tiny_tables(tmp_path))
        assert (study.n, study.k) == (4, 3)
        assert study.w.shape == (4, 3, 2)
        assert study.x_names == ("intercept", "age")
        assert study.w_names == ("intercept", "income")
        assert spec.pooled_alpha

    def test_missing_covariate_flags_incomplete(self, tmp_path):
        study, _ = load_study(**tiny_tables(tmp_path))
        assert study.delta.tolist() == [1, 0, 1, 1]
        assert np.isnan(study.w[1, :, 1]).all()
        assert np.isfinite(study.q).all()

    def test_na_response(self, tmp_path):
        items = "subject_id,item_id,y\n1,1,1\n1,2,NA\n2,1,0\n2,2,1\n"
        spec = '{"mean": {"columns": []}, "variance": {"mode": "per-item-constant"}, "alpha": {"columns": []}}'
        paths = tiny_tables(tmp_path, items=items, subjects="subject_id\n1\n2\n", spec=spec)
        with pytest.raises(DataError, match="missing response"):
            load_study(**paths)

    def test_non_numeric_line_number(self, tmp_path):
        items = "subject_id,item_id,y\n1,1,1\n1,2,abc\n2,1,0\n2,2,1\n"
        spec = '{"mean": {"columns": []}, "variance": {"mode": "per-item-constant"}, "alpha": {"columns": []}}'
        paths = tiny_tables(tmp_path, items=items, subjects="subject_id\n1\n2\n", spec=spec)
        with pytest.raises(DataError, match="line 3"):
            load_study(**paths)

    def test_duplicate_row(self, tmp_path):
        items = "subject_id,item_id,y\n1,1,1\n1,2,2\n1,2,3\n2,1,0\n2,2,1\n"
        spec = '{"mean": {"columns": []}, "variance": {"mode": "per-item-constant"}, "alpha": {"columns": []}}'
        paths = tiny_tables(tmp_path, items=items, subjects="subject_id\n1\n2\n", spec=spec)
        with pytest.raises(DataError, match="duplicate"):
            load_study(**paths)

    def test_missing_column(self, tmp_path):
        paths = tiny_tables(tmp_path, subjects="subject_id,age\n1,30\n2,40\n3,50\n4,35\n")
        with pytest.raises(DataError, match="income"):
            load_study(**paths)

    def test_single_item(self, tmp_path):
        items = "subject_id,item_id,y\n1,1,1\n2,1,0\n"
        spec = '{"mean": {"columns": []}, "variance": {"mode": "per-item-constant"}, "alpha": {"columns": []}}'
        paths = tiny_tables(tmp_path, items=items, subjects="subject_id\n1\n2\n", spec=spec)
        with pytest.raises(DataError, match="2 items"):
            load_study(**paths)

    def test_pair_order_violation(self, tmp_path):
        pairs = "subject_id,item_i,item_j,dist\n1,2,1,0.5\n"
        paths = tiny_tables(tmp_path, pairs=pairs)
        with pytest.raises(DataError, match="item_i < item_j"):
            load_study(**paths)

    def test_pair_subject_absent(self, tmp_path):
        pairs = "subject_id,item_i,item_j,dist\n9,1,2,0.5\n"
        paths = tiny_tables(tmp_path, pairs=pairs)
        with pytest.raises(DataError, match="absent"):
            load_study(**paths)

    def test_pair_covariates_placed(self, tmp_path):
        rows = [f"{s},{i},{j},{s * 10 + i + j}" for s in range(1, 5) for i, j in build_pair_index(3)]
        pairs = "subject_id,item_i,item_j,dist\n" + "\n".join(rows) + "\n"
        spec = ('{"mean": {"columns": []}, "variance": {"mode": "per-item-constant"},'
                ' "alpha": {"columns": ["dist"]}}')
        study, _ = load_study(**tiny_tables(tmp_path, pairs=pairs, spec=spec))
        assert study.w[0, :, 1].tolist() == [13.0, 14.0, 15.0]

    def test_per_item_intercepts(self, tmp_path):
        spec = ('{"mean": {"intercept": "per-item", "columns": []},'
                ' "variance": {"mode": "per-item-constant"}, "alpha": {"columns": []}}')
        study, _ = load_study(**tiny_tables(tmp_path, spec=spec))
        assert study.x_names == ("item[1]", "item[2]", "item[3]")
        np.testing.assert_array_equal(study.x[2], np.eye(3))
        np.testing.assert_array_equal(study.z[0], np.eye(3))

    def test_delta_column_consistency(self, tmp_path):
        subjects = "subject_id,age,income,obs\n1,30,5,1\n2,40,,1\n3,50,7,1\n4,35,6,1\n"
        spec = ('{"mean": {"columns": ["age"]}, "variance": {"mode": "per-item-constant"},'
                ' "alpha": {"columns": ["income"]}, "missingness": {"delta_column": "obs"}}')
        with pytest.raises(DataError, match="delta=1"):
            load_study(**tiny_tables(tmp_path, subjects=subjects, spec=spec))


class TestStudyData:
    def test_arrays_read_only(self, sim_study):
        with pytest.raises(ValueError):
            sim_study.y[0, 0] = 1.0

    def test_rejects_incomplete_observed_subject(self):
        x = np.ones((2, 2, 1))
        x[0, 0, 0] = np.nan
        with pytest.raises(DataError, match="delta=1"):
            StudyData(y=np.zeros((2, 2)), x=x, z=np.ones((2, 2, 1)), w=np.ones((2, 1, 1)),
                      q=np.ones((2, 1)), delta=np.array([1, 1]))

    def test_rejects_missing_q(self):
        with pytest.raises(DataError, match="Q"):
            StudyData(y=np.zeros((2, 2)), x=np.ones((2, 2, 1)), z=np.ones((2, 2, 1)),
                      w=np.ones((2, 1, 1)), q=np.array([[1.0], [np.nan]]), delta=np.array([1, 1]))


class TestRoundTrip:
    def test_write_then_load_identical(self, sim_study, tmp_path):
        paths = write_study(sim_study, tmp_path)
        again, _ = load_study(paths["data"], paths["spec"], paths["subjects"], paths["pairs"])
        for attr in ("y", "x", "z", "w", "q", "delta"):
            np.testing.assert_array_equal(getattr(again, attr), getattr(sim_study, attr))

    def test_written_spec_is_valid_json(self, sim_study, tmp_path):
        paths = write_study(sim_study, tmp_path)
        doc = json.loads(paths["spec"].read_text())
        assert ModelSpec.from_dict(doc).delta_column == "delta"

    def test_row_order_does_not_matter(self, tmp_path):
        paths = tiny_tables(tmp_path)
        first, spec = load_study(**paths)
        lines = paths["data"].read_text().splitlines()
        paths["data"].write_text("\n".join([lines[0]] + lines[1:][::-1]) + "\n")
        second, _ = load_study(**paths)
        for attr in ("y", "x", "w", "q", "delta"):
            np.testing.assert_array_equal(getattr(first, attr), getattr(second, attr))

    def test_build_from_strings(self):
        import pandas as pd

        items = pd.DataFrame({"subject_id": ["a", "a", "b", "b"], "item_id": ["1", "2", "1", "2"],
                              "y": ["1", "2", "3", "4"]})
        spec = ModelSpec(intercept_mode="shared", variance_mode="per-item-constant")
        study = build_study(items, spec)
        assert study.subject_ids == ("a", "b")
        np.testing.assert_array_equal(study.y, [[1, 2], [3, 4]])
