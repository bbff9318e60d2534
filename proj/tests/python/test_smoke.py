import json
import math
import os
import subprocess

import numpy as np
import pytest

import uflow

SCENARIOS = os.path.join(os.path.dirname(__file__), "..", "..", "scenarios")


def ball_config(t_final=2.4):
    return json.dumps({
        "system": {"name": "ball"},
        "initial": {"q": [0.5], "qd": [0.0]},
        "sim": {"t_final": t_final},
    })


def test_registry():
    names = uflow.list_systems()
    assert {"ball", "corner", "oblique_corner", "hopper", "trotter"} <= set(names)
    with pytest.raises(uflow.ConfigError):
        uflow.build_system("nope")


def test_ball_bounce():
    sys = uflow.build_system("ball", {"gamma": 0.5})
    cfg = uflow.SimConfig()
    cfg.t_final = 1.5
    tr = uflow.simulate(sys, uflow.State(0.0, [0.5], [0.0]), cfg)
    assert tr.termination == "time_reached"
    assert len(tr.events) == 1
    assert tr.events[0].t == pytest.approx(1.0, abs=1e-9)
    assert tr.events[0].x_post[1] == pytest.approx(0.5, abs=1e-9)
    assert tr.word == [[], []]


def test_impact_map_projection():
    sys = uflow.build_system("oblique_corner", {"gamma": 0.0})
    qd_plus, delta, _ = uflow.impact_map(sys, [0.0, 0.0], [-1.0, -1.0], [1])
    assert np.allclose(qd_plus, [0.0, 0.0])
    assert np.allclose(delta @ delta, delta)
    assert uflow.orthogonality_check(sys, [0.0, 0.0], 0, 1) == pytest.approx(math.sqrt(0.5))


def test_corner_bderivative():
    sys = uflow.build_system("corner", {"gamma": 0.5, "coupling": 0.5})
    cfg = uflow.SimConfig()
    cfg.t_final = 1.6
    tr = uflow.simulate(sys, uflow.State(0.0, [1.0, 1.0], [-1.0, -1.0]), cfg)
    bd = uflow.b_derivative(sys, tr, cfg)
    assert len(bd.realizable()) == 2
    dz = np.array([1.0, 0.0, 0.0, 0.0])
    m = bd.membership(dz)
    assert not m.boundary
    assert np.allclose(bd.apply(0.0, dz), bd.selections[m.selection].state_jac @ dz)


def test_pl_map_verdicts():
    pl = uflow.PiecewiseLinearMap.from_cones(
        [np.array([[0.5, 0.0], [0.0, 2.0]]), np.array([[0.5, 1.0], [0.0, 0.3]])],
        [np.array([[0.0, 1.0]]), np.array([[0.0, -1.0]])],
    )
    verdict, value, vec = uflow.instability_eigenvector_test(pl)
    assert verdict == "UNSTABLE"
    assert value == pytest.approx(2.0)
    verdict, norms = uflow.stability_contraction_test(pl)
    assert verdict == "INCONCLUSIVE"


def test_run_command(tmp_path):
    assert uflow.run("simulate", ball_config(), str(tmp_path)) == 0
    events = json.loads((tmp_path / "events.json").read_text())
    assert len(events["events"]) == 2
    assert (tmp_path / "trajectory.csv").read_text().startswith("t,q_0,qd_0,mode_bitmask,event")
    with pytest.raises(uflow.ConfigError):
        uflow.run("simulate", '{"system": {"name": "ball"}}', str(tmp_path))
    dumped = uflow.dump_config(ball_config())
    assert uflow.dump_config(dumped) == dumped


@pytest.mark.skipif("UFLOW_CLI" not in os.environ, reason="CLI path not provided")
def test_cli_grazing_exit_code(tmp_path):
    proc = subprocess.run(
        [os.environ["UFLOW_CLI"], "simulate", "--config", os.path.join(SCENARIOS, "grazing.json"),
         "--out", str(tmp_path)],
        capture_output=True,
    )
    assert proc.returncode == 3
    assert json.loads((tmp_path / "events.json").read_text())["offending_constraint"] == 0
