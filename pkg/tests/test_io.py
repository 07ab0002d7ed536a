import json

import numpy as np
import pytest

from gfm_fdi import io
from gfm_fdi.detection import ResidualTrace
from gfm_fdi.microgrid import ExperimentSettings, FaultEvent, NoiseSpec, four_inverter_scenario
from gfm_fdi.model import gfm12_parameters, gfm34_parameters

SHORT = """
[sim]
duration = 0.05
dt = 1e-5
lowpass_hz = 20.0
calibration_duration = 0.2

[noise]
sigma_w = 0.01
seed = 4

[gfm.1]
preset = "gfm12"

[gfm.2]
preset = "gfm34"
m_p = 1e-4
v_n = 390.0

[line.1]
from = 1
to = 2
r = 0.23
l = 318e-6

[load.1]
bus = 1
r = 30.0
l = 0.477e-6

[load.2]
bus = 2
r = 25.0
l = 0.477e-6

[fault.1]
kind = "actuator_vn"
gfm = 2
start = 0.02
duration = 0.01
"""


def test_scenario_from_toml(tmp_path):
    path = tmp_path / "s.toml"
    path.write_text(SHORT)
    scn, settings = io.load_scenario(path)
    assert scn.n_gfm == 2 and scn.duration == 0.05
    assert scn.gfms[0] == gfm12_parameters()
    assert scn.gfms[1] == gfm34_parameters(m_p=1e-4)
    assert scn.v_n == (380.0, 390.0)
    assert scn.gfm_bus == (0, 1)
    assert scn.network.lines[0].from_bus == 0
    ev = scn.faults[0]
    assert ev.gfm == 1 and ev.d_v_n == pytest.approx(39.0)
    assert settings.lowpass_hz == 20.0 and settings.calibration_duration == 0.2
    assert scn.noise == NoiseSpec(0.01, 0.0, 4)


def test_scenario_round_trip(tmp_path):
    scn = four_inverter_scenario("bridge", duration=8.0)
    settings = ExperimentSettings(lowpass_hz=10.0, margin=0.1)
    path = io.save_scenario(tmp_path / "rt.toml", scn, settings)
    back, back_settings = io.load_scenario(path)
    assert back == scn
    assert back_settings == settings


def test_default_network_when_none_given(tmp_path):
    path = tmp_path / "d.toml"
    path.write_text('[gfm.1]\npreset = "gfm12"\n[gfm.2]\npreset = "gfm12"\n'
                    '[gfm.3]\npreset = "gfm34"\n[gfm.4]\npreset = "gfm34"\n')
    scn, _ = io.load_scenario(path)
    assert scn.network == four_inverter_scenario().network


@pytest.mark.parametrize("body, match", [
    ('[sim]\nduration = 1.0\n', "at least one"),
    ('[gfm.1]\npreset = "gfm99"\n', "preset"),
    ('[gfm.1]\npreset = "gfm12"\nwings = 2\n', "unknown inverter"),
    ('[gfm.0]\npreset = "gfm12"\n', "start at 1"),
    ('[gfm.x]\npreset = "gfm12"\n', "integer"),
    ('[sim]\nspeed = 3\n[gfm.1]\npreset = "gfm12"\n', "unknown"),
    ('[sim]\ncalibration = "guess"\n[gfm.1]\npreset = "gfm12"\n', "calibration"),
    ('[gfm.1]\npreset = "gfm12"\n[fault.1]\nkind = "busbar"\ngfm = 1\nstart = 0.1\ncolour = 1\n',
     "unknown fault"),
    ('[gfm.1]\npreset = "gfm12"\n[fault.1]\nkind = "meteor"\ngfm = 1\nstart = 0.1\n', "meteor"),
    ('[gfm.1]\npreset = "gfm12"\n[fault.1]\nkind = "busbar"\ngfm = 1\n', "start"),
    ('[gfm.1\n', "invalid TOML"),
])
def test_scenario_errors(tmp_path, body, match):
    path = tmp_path / "bad.toml"
    path.write_text(body)
    with pytest.raises(io.ScenarioFormatError, match=match):
        io.load_scenario(path)


def test_model_params_round_trip(tmp_path):
    p = gfm34_parameters(k_pv=0.07)
    for name in ("m.toml", "m.json"):
        path = io.save_model_params(tmp_path / name, p)
        assert io.load_model_params(path) == p


def test_json_floats_are_exact(tmp_path):
    x = 0.1 + 0.2
    path = io.write_json(tmp_path / "a.json", {"x": x, "arr": np.array([1 / 3])})
    back = io.read_json(path)
    assert back["x"] == x and back["arr"] == [1 / 3]
    path.write_text("{nope")
    with pytest.raises(io.ScenarioFormatError):
        io.read_json(path)


def test_manifest_hash_is_stable(tmp_path):
    m = {"b": 1, "a": [1.5, 2]}
    assert io.content_hash(m) == io.content_hash({"a": [1.5, 2], "b": 1})
    assert io.content_hash(m) != io.content_hash({"a": [1.5, 2], "b": 2})
    data = json.loads(io.write_json(tmp_path / "m.json", {"v": 1}, m).read_text())
    assert data["manifest_hash"] == io.content_hash(m)


def test_residual_csv(tmp_path):
    r = np.arange(3 * 7, dtype=float).reshape(3, 7) / 7
    J = np.linspace(0.0, 1.0, 6)
    trace = ResidualTrace(1e-5, J, r=r, r_every=2)
    active = np.array([0, 0, 1, 1, 0, 0], bool)
    path = io.write_residual_csv(tmp_path / "r.csv", trace, 0.5, active, comment="manifest_hash=abc")
    lines = path.read_text().splitlines()
    assert lines[0] == "# manifest_hash=abc"
    assert lines[1] == "t,r1,r2,r3,r4,r5,r6,r7,J,J_th,fault_active"
    assert len(lines) == 5
    row = lines[3].split(",")
    assert float(row[0]) == pytest.approx(2e-5)
    assert float(row[1]) == r[1, 0]
    assert float(row[8]) == J[2]
    assert row[-1] == "1"
    with pytest.raises(ValueError):
        io.write_residual_csv(tmp_path / "x.csv", ResidualTrace(1e-5, J), 0.5, active)


def test_fault_event_defaults_use_inverter_set_points(tmp_path):
    path = tmp_path / "f.toml"
    path.write_text('[gfm.1]\npreset = "gfm12"\nomega_n = 300.0\n'
                    '[fault.1]\nkind = "actuator_omega"\ngfm = 1\nstart = 0.1\n')
    scn, _ = io.load_scenario(path)
    assert scn.faults[0] == FaultEvent("actuator_omega", 0, 0.1, d_omega_n=30.0)
