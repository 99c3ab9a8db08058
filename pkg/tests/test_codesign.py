import json
from dataclasses import replace

import numpy as np
import pytest

from beltcodesign.cmaes import PENALTY, CmaesConfig
from beltcodesign.codesign import (
    CodesignReport,
    StudySpec,
    evaluate_design,
    max_differential_torque,
    render_table,
    run_study,
)
from beltcodesign.model import ORIGINAL_GEARS, design_violations


@pytest.fixture(scope="module")
def tiny_report(model):
    study = StudySpec(spaces=("actuation", "joint"), payloads=(0.0,), seeds=1, cmaes=CmaesConfig(population=6, generations=2))
    return run_study(study, model)


def test_original_design_feasible_in_actuation_space(model):
    cost, feasible, res = evaluate_design(ORIGINAL_GEARS, "actuation", 0.0, model)
    assert feasible and res.status == "converged"
    assert 0 < cost < PENALTY
    assert cost == res.objective


def test_heavy_payload_joint_space_penalised(model):
    cost, feasible, res = evaluate_design(ORIGINAL_GEARS, "joint", 1.0, model)
    assert not feasible
    assert cost == PENALTY
    assert res.status == "infeasible"


def test_ordering_violation_skips_the_solve(model):
    assert evaluate_design([3, 5, 1, 1], "actuation", 0.0, model) == (PENALTY, False, None)


def test_differential_torque_capacity(model):
    # joint-space boxes collapse the differential joint; motors can still drive it
    assert max_differential_torque(ORIGINAL_GEARS, model, "joint") == 0.0
    assert max_differential_torque(ORIGINAL_GEARS, model, "actuation") == pytest.approx(2 * 1.7)
    assert max_differential_torque([9, 5.62, 3, 1.8], model, "actuation") == pytest.approx(2 * 1.8 * 1.7)


@pytest.mark.parametrize("kw", [{"spaces": ("motor",)}, {"payloads": (-1.0,)}, {"seeds": 0}, {"spaces": ()}])
def test_study_validation(kw):
    with pytest.raises(ValueError):
        StudySpec(**kw)


def test_desk_preset():
    s = StudySpec.desk(spaces=("actuation",))
    assert (s.cmaes.population, s.cmaes.generations, s.seeds) == (20, 10, 2)
    assert s.payloads == (0.0, 1.0)
    assert StudySpec.from_dict(json.loads(json.dumps(s.to_dict()))).to_dict() == s.to_dict()


def test_tiny_study_invariants(tiny_report):
    for space in ("actuation", "joint"):
        s = tiny_report.summary(space, 0.0)
        assert s.before_feasible
        assert s.after_feasible
        assert not design_violations(s.after.gear_ratios)
        assert s.after_cost <= s.before_cost
        cell = tiny_report.cell(space, 0.0, 0)
        assert np.all(np.diff(cell.best_so_far) <= 0)
        assert all(r["fitness"] == PENALTY for r in cell.log if not r["feasible"])
    assert tiny_report.summary("actuation", 0.0).after_cost <= tiny_report.summary("joint", 0.0).after_cost


def test_tiny_study_is_reproducible(model, tiny_report):
    again = run_study(tiny_report.study, model)
    assert again.to_json() == tiny_report.to_json()


def test_process_pool_matches_serial(model, tiny_report):
    parallel = run_study(tiny_report.study, model, jobs=2)
    assert parallel.to_json() == tiny_report.to_json()


def test_report_round_trip(tiny_report):
    back = CodesignReport.from_dict(json.loads(tiny_report.to_json()))
    assert back.to_json() == tiny_report.to_json()
    with pytest.raises(ValueError):
        CodesignReport.from_dict({"report_version": 99})


def test_table_layout(tiny_report):
    lines = render_table(tiny_report).splitlines()
    assert lines[0].split() == ["Payload", "Space", "Before/After", "Gear", "Ratios", "Cost"]
    rows = lines[2:]
    assert len(rows) == 4
    assert rows[0].startswith("0 kg") and "Actuation" in rows[0] and "Before" in rows[0]
    assert "[6, 3, 1, 1]" in rows[0]
    assert "After" in rows[1]


def test_table_marks_infeasible_cells_with_dash(tiny_report):
    s = tiny_report.summary("joint", 0.0)
    failed = replace(s, before_cost=PENALTY, before_feasible=False, before_status="infeasible", after=None)
    report = replace(tiny_report, summaries=[tiny_report.summary("actuation", 0.0), failed])
    rows = render_table(report).splitlines()[2:]
    assert rows[2].split()[-1] == "-"
    assert rows[3].split()[-2:] == ["-", "-"]
    assert not rows[0].rstrip().endswith("-")
