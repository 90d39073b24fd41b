import dataclasses

import numpy as np
import pytest

from indalpha import SimDesign, StudyData, simulate_study
from indalpha.simulation import SIM_SPEC

# closed-form configuration: constant variance functions, independence where possible
PLAIN_SPEC = dataclasses.replace(SIM_SPEC, mean_structure="independence",
                                 alpha_structure="independence", var_function="constant",
                                 alpha_function="constant")


@pytest.fixture(scope="session")
def sim_study():
    return simulate_study(SimDesign(n=600), seed=7)


@pytest.fixture(scope="session")
def complete_study():
    return simulate_study(SimDesign(n=400, missing=False), seed=3)


def intercept_only(study):
    """Same study with a pooled intercept-only alpha design."""
    return StudyData(y=study.y, x=study.x, z=study.z, w=np.ones(study.w.shape[:2] + (1,)),
                     q=study.q, delta=study.delta, x_names=study.x_names,
                     z_names=study.z_names, w_names=("intercept",), q_names=study.q_names,
                     pooled=True)


def tiny_tables(tmp_path, items=None, subjects=None, pairs=None, spec=None):
    """Write small CSV/JSON inputs and return their paths."""
    items = items if items is not None else (
        "subject_id,item_id,y,score\n"
        "1,1,1.0,0.5\n1,2,2.0,0.1\n1,3,1.5,0.3\n"
        "2,1,0.2,0.2\n2,2,0.4,0.9\n2,3,0.1,0.4\n"
        "3,1,1.1,0.7\n3,2,1.3,0.6\n3,3,0.9,0.8\n"
        "4,1,2.0,0.1\n4,2,1.8,0.2\n4,3,2.2,0.5\n")
    subjects = subjects if subjects is not None else (
        "subject_id,age,income\n1,30,5\n2,40,\n3,50,7\n4,35,6\n")
    spec = spec if spec is not None else (
        '{"mean": {"link": "identity", "intercept": "shared", "columns": ["age"]},'
        ' "variance": {"mode": "per-item-constant"},'
        ' "alpha": {"columns": ["income"], "pooled": true},'
        ' "missingness": {"columns": ["age"]}}')
    paths = {"data": tmp_path / "items.csv", "subjects": tmp_path / "subjects.csv",
             "spec": tmp_path / "spec.json"}
    paths["data"].write_text(items)
    paths["subjects"].write_text(subjects)
    paths["spec"].write_text(spec)
    if pairs is not None:
        paths["pairs"] = tmp_path / "pairs.csv"
        paths["pairs"].write_text(pairs)
    return paths


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
