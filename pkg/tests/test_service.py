"""HTTP layer: endpoints against direct core calls, error mapping."""

import json
import math

import numpy as np
import pytest
from fastapi.testclient import TestClient

from trapdac.constants import CA40
from trapdac.iondyn import normal_modes
from trapdac.serialbus import ber_upper_bound
from trapdac.service import create_app
from trapdac.trapfield import (BasisField, find_rf_nil, find_well,
                               reference_geometry, solve_voltages)
from trapdac.wavecomp import VoltageTimeline


@pytest.fixture(scope="module")
def client():
    with TestClient(create_app(), raise_server_exceptions=False) as c:
        yield c


def _timeline_payload():
    channels = ["A0", "A1", "B5"]
    steps = [[0.0, 0.0, 0.0], [1.0, -2.0, 0.25], [1.0, -2.0, 0.5]]
    tl = VoltageTimeline.from_json(json.dumps({
        "channels": channels, "step_period_s": 2.6e-5, "steps": steps}))
    return json.loads(tl.to_json())


def test_health(client):
    r = client.get("/health")
    assert r.status_code == 200
    body = r.json()
    assert body["status"] == "ok"
    assert body["version"]


def test_compile_then_session_verifies(client):
    r = client.post("/compile", json={"timeline": _timeline_payload()})
    assert r.status_code == 200
    out = r.json()
    assert out["n_packets"] == 3
    assert out["feasible"] is True
    assert out["max_rate_hz"] > 0

    r2 = client.post("/session", json={"waveform": out["waveform"],
                                       "include_trace": True})
    assert r2.status_code == 200
    ses = r2.json()
    assert ses["verified"] is True
    assert ses["n_packets"] == 3
    assert ses["duration_ns"] > 0
    assert ses["trace_csv"].splitlines()[0] == "time_ns,line,level"


def test_session_without_trace(client):
    r = client.post("/compile", json={"timeline": _timeline_payload()})
    r2 = client.post("/session", json={"waveform": r.json()["waveform"],
                                       "include_trace": False})
    assert r2.status_code == 200
    assert r2.json()["trace_csv"] is None


def test_unknown_timing_model_is_400(client):
    r = client.post("/compile", json={"timeline": _timeline_payload(),
                                      "timing": "fast-and-loose"})
    assert r.status_code == 400
    assert "fast-and-loose" in r.json()["detail"]


def test_infeasible_rate_is_409(client):
    r = client.post("/compile", json={"timeline": _timeline_payload(),
                                      "rate_hz": 1e6})
    assert r.status_code == 409


def test_extra_fields_are_422(client):
    r = client.post("/ber-test", json={"bits": 1000, "bogus": 1})
    assert r.status_code == 422


def test_ber_endpoint_matches_closed_form(client):
    r = client.post("/ber-test", json={"bits": 100000, "flip_prob": 0.0,
                                       "confidence": 0.95, "seed": 3})
    assert r.status_code == 200
    out = r.json()
    assert out["bit_errors"] == 0
    assert out["ber_upper_bound"] == pytest.approx(
        ber_upper_bound(out["bits_sent"], 0, 0.95), rel=1e-12)


def test_filter_response_endpoint(client):
    r = client.post("/filter-response", json={"config": "measured"})
    assert r.status_code == 200
    out = r.json()
    assert out["f3db_hz"] == pytest.approx(12093.81, rel=1e-4)
    assert len(out["bode"][0]) == 3  # f, mag_db, phase_deg
    assert len(out["step"][0]) == 2
    r2 = client.post("/filter-response",
                     json={"f_min_hz": 1e4, "f_max_hz": 1e3})
    assert r2.status_code == 400


def test_solve_well_matches_core(client):
    r = client.post("/solve-well", json={"position_m": -390e-6,
                                         "axial_freq_hz": 1.5e6})
    assert r.status_code == 200
    out = r.json()
    geo = reference_geometry()
    basis = BasisField(geo)
    volts = solve_voltages(geo, -390e-6, 2 * math.pi * 1.5e6, basis=basis)
    for ch, v in volts.items():
        assert out["voltages"][str(ch)] == pytest.approx(v, abs=1e-9)
    assert out["max_abs_voltage"] == pytest.approx(
        max(abs(v) for v in volts.values()), rel=1e-9)
    assert out["well"]["axial_freq_hz"] == pytest.approx(1.5e6, rel=1e-6)
    assert out["well"]["position_m"][0] == pytest.approx(-390e-6, abs=1e-6)
    assert abs(out["well"]["mathieu_q"]) == pytest.approx(0.3, abs=0.01)


def test_solve_well_infeasible_bound_is_409(client):
    r = client.post("/solve-well", json={"position_m": 0.0,
                                         "axial_freq_hz": 1.5e6,
                                         "bound_v": 0.2})
    assert r.status_code == 409


def test_modes_endpoint_matches_core(client):
    r = client.post("/modes", json={"n_ions": 3, "axial_freq_hz": 1.5e6})
    assert r.status_code == 200
    out = r.json()
    want = normal_modes(3, CA40, 2 * math.pi * 1.5e6) / (2 * math.pi)
    assert np.allclose(out["freqs_hz"], want, rtol=1e-12)
    assert out["spacing_m"] == pytest.approx(3.6574e-6, rel=1e-4)
    r1 = client.post("/modes", json={"n_ions": 1, "axial_freq_hz": 1.5e6})
    assert r1.json()["spacing_m"] is None


def test_spectrum_endpoint(client):
    r = client.post("/spectrum", json={"position_m": 0.0,
                                       "axial_freq_hz": 1.5e6,
                                       "carrier_hz": 4.11e14,
                                       "order": 1})
    assert r.status_code == 200
    lines = r.json()["lines"]
    assert len(lines) == 7
    assert lines[3]["label"] == "carrier"
    assert lines[4]["label"] == "+z"
    assert lines[4]["offset_hz"] == pytest.approx(1.5e6, rel=1e-4)


def test_fieldmap_solved_voltages(client):
    r = client.post("/fieldmap", json={"position_m": 0.0,
                                       "axial_freq_hz": 1.5e6,
                                       "plane": "xz",
                                       "lo1_m": -20e-6, "hi1_m": 20e-6,
                                       "lo2_m": 40e-6, "hi2_m": 80e-6,
                                       "n1": 5, "n2": 4, "fixed_m": 0.0})
    assert r.status_code == 200
    out = r.json()
    assert out["header"] == "x_m,z_m,dc_v,pseudo_ev,total_ev"
    assert len(out["rows"]) == 20
    for row in out["rows"]:
        assert row[4] == pytest.approx(row[2] + row[3], rel=1e-9, abs=1e-15)
        assert row[3] >= 0  # pseudopotential never negative


def test_fieldmap_explicit_voltages_and_bad_channel(client):
    volts = {"A19": 1.0, "B19": 1.0}
    r = client.post("/fieldmap", json={"voltages": volts, "plane": "yz",
                                       "lo1_m": -5e-6, "hi1_m": 5e-6,
                                       "lo2_m": 50e-6, "hi2_m": 70e-6,
                                       "n1": 3, "n2": 3, "fixed_m": 0.0})
    assert r.status_code == 200
    assert r.json()["header"].startswith("y_m,z_m")
    r2 = client.post("/fieldmap", json={"voltages": {"C7": 1.0},
                                        "plane": "xz"})
    assert r2.status_code == 400


def test_heating_fit_endpoint(client):
    csv = ("delay_ms,i_red,i_blue,sigma_red,sigma_blue\n"
           "0.0,0.33,1.0,0.02,0.02\n1.0,0.52,1.0,0.02,0.02\n"
           "2.0,0.62,1.0,0.02,0.02\n3.0,0.71,1.0,0.02,0.02\n")
    r = client.post("/heating-fit", json={"csv": csv})
    assert r.status_code == 200
    out = r.json()
    assert out["slope"] > 0
    assert out["n_points"] == 4
    assert out["n_reloads"] is None
    r2 = client.post("/heating-fit", json={"csv": "bad,header\n1,2\n"})
    assert r2.status_code == 400


def test_drift_fit_endpoint_counts_reloads(client):
    csv = ("time_hr,freq_hz,reload_flag\n0,3100000,0\n1,3100100,1\n"
           "2,3100210,0\n3,3100290,1\n")
    r = client.post("/drift-fit", json={"csv": csv})
    assert r.status_code == 200
    out = r.json()
    assert out["slope"] == pytest.approx(100.0, rel=0.1)
    assert out["n_reloads"] == 2
    assert "reload" in out["report"]


def test_transport_endpoint_small_run(client):
    r = client.post("/transport", json={"start_m": 0.0, "stop_m": 10e-6,
                                        "speed_m_s": 2.0,
                                        "axial_freq_hz": 1.5e6,
                                        "update_rate_hz": 38000.0,
                                        "filter": "measured",
                                        "settle_tail_s": 2e-5,
                                        "n_samples": 30,
                                        "convergence_check": False})
    assert r.status_code == 200
    out = r.json()
    assert out["survived"] is True
    assert out["quanta_gained"] < 50.0
    assert out["halving_energy_change"] is None  # check skipped
    assert out["trajectory_header"] == "t_s,x_m,y_m,z_m,energy_j,quanta"
    assert len(out["trajectory"]) >= 2
    assert out["n_update_steps"] >= 1


def test_unknown_transport_mode_is_400(client):
    r = client.post("/transport", json={"start_m": 0.0, "stop_m": 1e-6,
                                        "speed_m_s": 1.0,
                                        "axial_freq_hz": 1.5e6,
                                        "update_rate_hz": 38000.0,
                                        "mode": "warp"})
    assert r.status_code == 400
