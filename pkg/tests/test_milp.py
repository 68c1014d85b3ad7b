import math
import os
import subprocess
import sys

import numpy as np
import pytest

from ebusopt.lpformat import (LpFormatError, RawSolution, parse_solution_file,
                              parse_solution_text, read_lp, read_mps,
                              write_solution_text)
from ebusopt.milp import (DecodeError, ModelError, ModelOptions, Var,
                          add_preconditioning, build_model, decode_solution,
                          emit_model, solve_model)
from ebusopt.netgraph import GraphOptions, build_graph
from ebusopt.refsolver import load_model, solve_parsed
from ebusopt.solverbridge import SolverError, solve_external
from ebusopt.validate import build_domains, exact_curves
from _toys import charger_toy, charging_required_instance, two_trip_instance


def toy_setup(inst, theta=300.0, m=4, options=None, estimator="under"):
    curves = exact_curves(inst)
    graph = build_graph(inst, theta, GraphOptions(egress_lookahead_steps=24))
    domains = build_domains(inst, curves, theta, m, estimator)
    model = build_model(graph, domains, options or ModelOptions())
    return curves, graph, domains, model


# ---------------------------------------------------------------------------
# constraint structure
# ---------------------------------------------------------------------------

def test_cover_rows_one_per_trip():
    inst = charger_toy()
    _, _, _, model = toy_setup(inst)
    assert model.rows_by_tag()["cover"] == len(inst.trips)


def test_grid_rows_h_when_enabled_zero_when_disabled():
    inst = charger_toy(horizon_s=3600, theta=300)
    _, graph, _, model = toy_setup(inst)
    assert model.rows_by_tag()["grid"] == graph.horizon_steps
    _, _, _, off = toy_setup(inst, options=ModelOptions(grid_caps=False))
    assert "grid" not in off.rows_by_tag()


def test_domain_rows_per_recharge_arc():
    inst = charger_toy(horizon_s=3600, theta=300)
    _, graph, domains, model = toy_setup(inst, m=4)
    dom = domains[("C0", "e0")]
    n_recharge = sum(1 for a in graph.arcs if a.kind == "recharge")
    tags = model.rows_by_tag()
    assert tags["inccoupling"] == n_recharge
    assert tags["incdomain"] == n_recharge * (dom.segment_count - 1)


def test_missing_domain_is_build_error():
    inst = charger_toy()
    curves = exact_curves(inst)
    graph = build_graph(inst, 300.0)
    with pytest.raises(ModelError, match="C0"):
        build_model(graph, {}, ModelOptions())


def test_constraint_counts_random_instance():
    from ebusopt.generators import SyntheticParams, generate_synthetic
    inst = generate_synthetic(SyntheticParams(trips=6, chargers=2), seed=9)
    curves = exact_curves(inst)
    graph = build_graph(inst, 600.0, GraphOptions(egress_lookahead_steps=6))
    domains = build_domains(inst, curves, 600.0, 3, "under")
    model = build_model(graph, domains, ModelOptions())
    tags = model.rows_by_tag()
    assert tags["cover"] == len(inst.trips)
    h = graph.horizon_steps
    assert tags["grid"] == len(inst.grid_points) * h
    expected_domain = 0
    for a in graph.arcs:
        if a.kind != "recharge":
            continue
        for pid in a.plans:
            dom = domains[(a.charger, pid.split(".", 1)[0])]
            expected_domain += dom.segment_count - 1
    assert tags["incdomain"] == expected_domain


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------

def test_emission_is_byte_deterministic(tmp_path):
    inst = charger_toy()
    _, _, _, model = toy_setup(inst)
    p1, p2 = tmp_path / "a.lp", tmp_path / "b.lp"
    emit_model(model, "lp", p1)
    emit_model(model, "lp", p2)
    assert p1.read_bytes() == p2.read_bytes()
    m1, m2 = tmp_path / "a.mps", tmp_path / "b.mps"
    emit_model(model, "mps", m1)
    emit_model(model, "mps", m2)
    assert m1.read_bytes() == m2.read_bytes()


def test_lp_mps_roundtrip_same_polyhedron(tmp_path):
    inst = charger_toy()
    _, _, _, model = toy_setup(inst)
    lp_path, mps_path = tmp_path / "m.lp", tmp_path / "m.mps"
    emit_model(model, "lp", lp_path)
    emit_model(model, "mps", mps_path)
    a, b = read_lp(str(lp_path)), read_mps(str(mps_path))
    assert set(a.variables) == set(b.variables)
    assert a.integers == b.integers
    assert len(a.rows) == len(b.rows)
    obj_a = {k: v for k, v in a.objective.items()}
    assert obj_a == b.objective
    rows_b = {name: (coeffs, sense, rhs) for name, coeffs, sense, rhs in b.rows}
    for name, coeffs, sense, rhs in a.rows:
        cb, sb, rb = rows_b[name]
        assert sense == sb and rhs == pytest.approx(rb, abs=1e-12)
        assert coeffs == pytest.approx(cb)


def test_lp_vs_mps_solved_externally_equal(tmp_path):
    inst = charger_toy()
    _, _, _, model = toy_setup(inst)
    lp_path, mps_path = tmp_path / "m.lp", tmp_path / "m.mps"
    emit_model(model, "lp", lp_path)
    emit_model(model, "mps", mps_path)
    sol_lp = solve_external(lp_path, time_limit=60)
    sol_mps = solve_external(mps_path, time_limit=60)
    assert sol_lp.status == "optimal" and sol_mps.status == "optimal"
    assert sol_lp.objective == pytest.approx(sol_mps.objective, abs=1e-6)


def test_variable_count_in_lp(tmp_path):
    class Tiny:
        variables = [Var("a", 0, 1, True, 1.0), Var("b", 0, math.inf, False, 2.0),
                     Var("c", 0, 5.0, False, 0.0)]
        rows = []
        minimize = True
    from ebusopt.lpformat import write_lp
    path = tmp_path / "tiny.lp"
    write_lp(Tiny(), path)
    parsed = read_lp(str(path))
    assert sorted(parsed.variables) == ["a", "b", "c"]
    assert parsed.integers == {"a"}
    assert parsed.upper["c"] == 5.0


def test_relaxed_emission_drops_integrality(tmp_path):
    inst = charger_toy()
    _, _, _, model = toy_setup(inst)
    path = tmp_path / "relax.lp"
    emit_model(model, "lp", path, relax=True)
    parsed = read_lp(str(path))
    assert not parsed.integers
    x_vars = [v for v in parsed.variables if v.startswith("x[")]
    assert all(parsed.upper[v] == 1.0 for v in x_vars)


# ---------------------------------------------------------------------------
# reference solver + bridge
# ---------------------------------------------------------------------------

def test_refsolver_solves_hand_lp(tmp_path):
    path = tmp_path / "hand.lp"
    path.write_text(
        "Minimize\n obj: 1 a + 2 b\n"
        "Subject To\n c1: 1 a + 1 b >= 1\n"
        "Bounds\nBinaries\n a b\nEnd\n")
    model = load_model(str(path))
    status, values, obj, bound = solve_parsed(model)
    assert status == "optimal"
    assert obj == pytest.approx(1.0)
    assert values["a"] == pytest.approx(1.0)


def test_refsolver_cli_roundtrip(tmp_path):
    path = tmp_path / "hand.lp"
    path.write_text(
        "Minimize\n obj: 1 a + 2 b\n"
        "Subject To\n c1: 1 a + 1 b >= 1\n"
        "Binaries\n a b\nEnd\n")
    sol = tmp_path / "hand.sol"
    proc = subprocess.run([sys.executable, "-m", "ebusopt.refsolver",
                           str(path), str(sol)], capture_output=True,
                          text=True)
    assert proc.returncode == 0, proc.stderr
    parsed = parse_solution_file(sol)
    assert parsed.status == "optimal"
    assert parsed.objective == pytest.approx(1.0)


def test_infeasible_toy_reports_infeasible(tmp_path):
    path = tmp_path / "inf.lp"
    path.write_text(
        "Minimize\n obj: 1 a\n"
        "Subject To\n c1: 1 a >= 2\n c2: 1 a <= 1\n"
        "End\n")
    sol = solve_external(path, time_limit=30)
    assert sol.status == "infeasible"
    assert not sol.has_incumbent


def test_time_limit_zero_no_incumbent(tmp_path):
    inst = charger_toy()
    _, _, _, model = toy_setup(inst)
    raw = solve_model(model, tmp_path, time_limit=0)
    assert raw.status == "time-limit"
    assert not raw.has_incumbent


def test_missing_solver_binary(tmp_path):
    inst = charger_toy()
    _, _, _, model = toy_setup(inst)
    with pytest.raises(SolverError):
        solve_model(model, tmp_path,
                    command_template="/nonexistent/solver {model} {solution}")


def test_two_trip_single_bus_objective(tmp_path):
    inst = two_trip_instance()
    curves = exact_curves(inst)
    graph = build_graph(inst, 300.0)
    model = build_model(graph, {}, ModelOptions())
    raw = solve_model(model, tmp_path, time_limit=60)
    assert raw.status == "optimal"
    # one bus: pull-out (fixed 100 + 5) + implicit connection (0) + pull-in (5)
    assert raw.objective == pytest.approx(110.0, abs=1e-6)
    sched = decode_solution(model, raw)
    assert sched.fleet_size == 1
    assert sched.courses[0].trips == ["t1", "t2"]


# ---------------------------------------------------------------------------
# solution parsers
# ---------------------------------------------------------------------------

def test_solution_text_roundtrip(tmp_path):
    path = tmp_path / "x.sol"
    write_solution_text(path, {"x[1]": 1.0, "y[2]": 0.25}, "optimal",
                        12.5, 12.0)
    sol = parse_solution_text(path)
    assert sol.status == "optimal"
    assert sol.objective == 12.5
    assert sol.bound == 12.0
    assert sol.values["y[2]"] == 0.25


def test_solution_xml_parse(tmp_path):
    path = tmp_path / "x.xml"
    path.write_text(
        '<?xml version="1.0"?>\n'
        '<CPLEXSolution><header objectiveValue="7.5" '
        'solutionStatusString="optimal"/>\n'
        '<variables><variable name="a" value="1"/>'
        '<variable name="b" value="0.5"/></variables></CPLEXSolution>\n')
    sol = parse_solution_file(path)
    assert sol.objective == 7.5
    assert sol.values == {"a": 1.0, "b": 0.5}


def test_unparseable_solution_raises(tmp_path):
    path = tmp_path / "junk.sol"
    path.write_text("!!! not a solution !!!\n")
    with pytest.raises(LpFormatError):
        parse_solution_text(path)


# ---------------------------------------------------------------------------
# preconditioning
# ---------------------------------------------------------------------------

def test_preconditioning_row_counts():
    inst = charger_toy(horizon_s=3600, theta=300)
    _, graph, domains, model = toy_setup(inst)
    base_rows = len(model.rows)
    add_preconditioning(model, 1)
    added = len(model.rows) - base_rows
    # one row per (recharge arc, plan) that has a predecessor step
    n = sum(1 for a in graph.arcs if a.kind == "recharge" and a.step > 1)
    assert added == n


def test_preconditioning_beyond_horizon_adds_nothing():
    inst = charger_toy(horizon_s=3600, theta=300)
    _, graph, _, model = toy_setup(inst)
    base_rows = len(model.rows)
    add_preconditioning(model, graph.horizon_steps + 5)
    assert len(model.rows) == base_rows


def test_preconditioning_forces_first_step_idle(tmp_path):
    # the bus must charge to finish the course; with lead 1 the entry step
    # cannot carry charge, so the first occupied step has phi = 0
    inst = charging_required_instance()
    curves, graph, domains, model = toy_setup(
        inst, options=ModelOptions(precondition_lead=1))
    raw = solve_model(model, tmp_path, time_limit=120)
    assert raw.has_incumbent
    sched = decode_solution(model, raw)
    charged = [w for c in sched.courses for w in c.windows if w.total_phi > 1e-9]
    assert charged
    for win in charged:
        assert win.phis[0] <= 1e-7


# ---------------------------------------------------------------------------
# decode
# ---------------------------------------------------------------------------

def test_decode_zero_flow_reports_uncovered(tmp_path):
    inst = charger_toy()
    _, _, _, model = toy_setup(inst)
    raw = RawSolution(values={v.name: 0.0 for v in model.variables},
                      status="optimal")
    with pytest.raises(DecodeError):
        decode_solution(model, raw)


def test_decode_fractional_flow_rejected():
    inst = two_trip_instance()
    curves = exact_curves(inst)
    graph = build_graph(inst, 300.0)
    model = build_model(graph, {}, ModelOptions())
    values = {v.name: 0.0 for v in model.variables}
    some_x = next(v.name for v in model.variables if v.name.startswith("x["))
    values[some_x] = 0.5
    with pytest.raises(DecodeError, match="fractional"):
        decode_solution(model, RawSolution(values=values, status="optimal"))


def test_decode_recharge_window_matches_soc_jump(tmp_path):
    inst = charging_required_instance()
    curves, graph, domains, model = toy_setup(inst)
    raw = solve_model(model, tmp_path, time_limit=120)
    assert raw.has_incumbent, raw.status
    sched = decode_solution(model, raw)
    course = next(c for c in sched.courses if c.windows)
    win = next(w for w in course.windows if w.total_phi > 1e-9)
    # soc jump across the window in the y variables equals the summed phi
    first_arc = None
    last_arc = None
    for a_idx in course.arc_indices:
        a = graph.arcs[a_idx]
        if a.kind == "recharge" and a.step in win.steps:
            if first_arc is None:
                first_arc = a
            last_arc = a
    y_in = sched.y_values[first_arc.index]
    out_arc = next(graph.arcs[i] for i in course.arc_indices
                   if graph.arcs[i].kind != "recharge"
                   and graph.nodes[graph.arcs[i].tail].slot == last_arc.slot
                   and graph.nodes[graph.arcs[i].tail].event == last_arc.step)
    y_out = sched.y_values[out_arc.index]
    assert y_out - y_in == pytest.approx(win.total_phi, abs=1e-6)
