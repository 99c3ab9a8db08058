import json
from pathlib import Path

import numpy as np
import pytest

from beltcodesign.cli import main
from beltcodesign.ocp import Trajectory

TINY = ["--pop", "4", "--gens", "1", "--seeds", "1", "--jobs", "1"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    summary = json.loads(out.strip().splitlines()[-1])
    return code, out, summary


@pytest.fixture(scope="module")
def motion_files(tmp_path_factory):
    prefix = tmp_path_factory.mktemp("motion") / "act"
    assert main(["motion", "--space", "actuation", "--payload", "0", "--gears", "6,3,1,1", "--out", str(prefix)]) == 0
    return prefix


@pytest.fixture(scope="module")
def report_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("study")
    assert main(["codesign", "--space", "actuation", "--payloads", "0", *TINY, "--out", str(out)]) == 0
    return out


def test_model_validate_default(capsys):
    code, out, summary = run(capsys, "model-validate")
    assert code == 0
    assert summary == {"command": "model-validate", "status": "valid", "diagnostics": []}


def test_model_validate_reports_every_problem(capsys, tmp_path, doc):
    doc["links"][1]["mass"] = -1.0
    doc["limits"]["tau_u_min"] = [-1.7, -1.7, 2.0, -1.7]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    code, out, summary = run(capsys, "model-validate", "--model", str(path))
    assert code == 1
    assert summary["status"] == "invalid"
    assert len(summary["diagnostics"]) >= 2


@pytest.mark.parametrize("content", [None, "{not json"])
def test_model_validate_unreadable_file(capsys, tmp_path, content):
    path = tmp_path / "m.json"
    if content is not None:
        path.write_text(content)
    code, _, summary = run(capsys, "model-validate", "--model", str(path))
    assert code == 2
    assert summary["status"] == "usage_error"


def test_motion_writes_trajectory(motion_files, capsys):
    traj = Trajectory.from_dict(json.loads(motion_files.with_suffix(".json").read_text()))
    assert np.max(np.abs(traj.controls)) <= 1.7 + 1e-8
    assert traj.meta["solve"]["status"] == "converged"
    assert traj.meta["gear_ratios"] == [6.0, 3.0, 1.0, 1.0]
    assert len(motion_files.with_suffix(".csv").read_text().splitlines()) == 52


def test_motion_joint_heavy_payload_fails(capsys):
    code, out, summary = run(capsys, "motion", "--space", "joint", "--payload", "1", "--gears", "6,3,1,1")
    assert code == 1
    assert summary["status"] == "infeasible"
    assert "status: infeasible" in out


@pytest.mark.parametrize(
    "argv",
    [
        ["motion", "--gears", "6,3,1"],
        ["motion", "--gears", "6,3,x,1"],
        ["motion", "--gears", "3,5,1,1"],
        ["motion", "--payload", "-1"],
        ["motion", "--space", "motor"],
        ["codesign"],
        ["export"],
        ["bogus"],
    ],
)
def test_usage_errors_exit_2(capsys, argv):
    try:
        code = main(argv)
    except SystemExit as exc:
        code = exc.code
    assert code == 2
    out = capsys.readouterr().out
    assert json.loads(out.strip().splitlines()[-1])["status"] == "usage_error"


def test_rollout_of_motion_file(capsys, motion_files):
    code, _, summary = run(capsys, "rollout", "--traj", str(motion_files.with_suffix(".json")))
    assert code == 0
    assert summary["max_state_deviation"] < 1e-5


def test_rollout_flags_perturbed_controls(capsys, motion_files, tmp_path):
    doc = json.loads(motion_files.with_suffix(".json").read_text())
    doc["controls"] = (np.asarray(doc["controls"]) + 0.1).tolist()
    path = tmp_path / "bumped.json"
    path.write_text(json.dumps(doc))
    code, _, summary = run(capsys, "rollout", "--traj", str(path))
    assert code == 1
    assert summary["status"] == "deviates"


def test_export_round_trip(capsys, motion_files, tmp_path):
    csv_path = tmp_path / "t.csv"
    code, _, summary = run(capsys, "export", "--traj", str(motion_files.with_suffix(".json")), "--format", "csv", "--out", str(csv_path))
    assert code == 0 and summary["rows"] == 51
    assert len(csv_path.read_text().splitlines()) == 1 + 51
    json_path = tmp_path / "t.json"
    code, _, _ = run(capsys, "export", "--traj", str(csv_path), "--space", "actuation", "--format", "json", "--out", str(json_path))
    assert code == 0
    a = Trajectory.from_dict(json.loads(motion_files.with_suffix(".json").read_text()))
    b = Trajectory.from_dict(json.loads(json_path.read_text()))
    assert np.max(np.abs(a.states - b.states)) <= 1e-12
    assert np.max(np.abs(a.controls - b.controls)) <= 1e-12


def test_export_schema_mismatch_exits_2(capsys, tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("t,a,b\n0,1,2\n")
    code, _, _ = run(capsys, "export", "--traj", str(path), "--space", "joint")
    assert code == 2
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"summaries": []}))
    code, _, _ = run(capsys, "export", "--in", str(path))
    assert code == 2


def test_codesign_outputs(report_dir):
    names = sorted(p.name for p in report_dir.iterdir())
    assert names == ["generations_actuation_0kg_seed0.csv", "report.json", "table.txt"]
    header = (report_dir / "generations_actuation_0kg_seed0.csv").read_text().splitlines()[0]
    assert header == "generation,eval_index,g1,g2,g3,g4,fitness,feasible"


def test_codesign_is_byte_identical_on_rerun(tmp_path, report_dir):
    assert main(["codesign", "--space", "actuation", "--payloads", "0", *TINY, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "report.json").read_bytes() == (report_dir / "report.json").read_bytes()


def test_codesign_all_infeasible_exits_1(capsys, tmp_path):
    code, out, summary = run(capsys, "codesign", "--space", "joint", "--payloads", "1", *TINY, "--out", str(tmp_path))
    assert code == 1
    rows = (tmp_path / "table.txt").read_text().splitlines()[2:]
    assert len(rows) == 2 and all(r.rstrip().endswith("-") for r in rows)


def test_report_table_and_generation_export(capsys, report_dir):
    code, out, summary = run(capsys, "report", "--in", str(report_dir / "report.json"), "--table")
    assert code == 0
    assert out.splitlines()[0].startswith("Payload")
    assert sum("Actuation" in line for line in out.splitlines()) == 2
    code, out, summary = run(capsys, "export", "--in", str(report_dir / "report.json"))
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "space,payload,seed,generation,eval_index,g1,g2,g3,g4,fitness,feasible"
    assert summary["rows"] == 4
