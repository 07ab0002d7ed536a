"""Files: scenario TOML, JSON artifacts with provenance, residual CSVs.

Scenario schema (indices in files are 1-based)::

    [sim]       duration, dt, reference, virtual_resistance,
                load_inductance_unit, lowpass_hz, calibration, margin,
                hold, calibration_duration, record_every
    [noise]     sigma_w, sigma_v, seed
    [gfm.N]     preset ("gfm12" | "gfm34") and/or any GfmParameters field,
                plus omega_n, v_n, bus
    [line.N]    from, to, r, l            (ohm, henry)
    [load.N]    bus, r, l                 (ohm, henry)
    [fault.N]   kind, gfm, start, duration, resistance, d_omega_n, d_v_n,
                d_eta_vid, d_eta_viq      (magnitudes default per kind)

Without ``[line.*]``/``[load.*]`` sections the four-bus test network is used.
JSON artifacts store floats with ``repr`` precision, so values round-trip
bit-exactly.
"""
from __future__ import annotations

import hashlib
import json
import sys
import dataclasses
from dataclasses import fields
from pathlib import Path

import numpy as np

from .faults import FaultKind
from .microgrid import (
    OMEGA_NOMINAL, V_NOMINAL, ExperimentSettings, FaultEvent, Line, Load,
    MicrogridScenario, NetworkParameters, NoiseSpec, four_bus_network,
)
from .model import GfmParameters, gfm12_parameters, gfm34_parameters

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

PRESETS = {"gfm12": gfm12_parameters, "gfm34": gfm34_parameters}
_PARAM_FIELDS = {f.name for f in fields(GfmParameters)}


class ScenarioFormatError(ValueError):
    """A scenario or artifact file does not follow the schema."""


# --------------------------------------------------------------------------
# hashing and JSON

def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def content_hash(obj) -> str:
    return hashlib.sha256(_canonical(obj).encode()).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path, payload: dict, manifest: dict | None = None) -> Path:
    """Write ``payload`` (plus the manifest and its hash) as sorted JSON."""
    data = dict(payload)
    if manifest is not None:
        data["manifest"] = dict(manifest)
        data["manifest_hash"] = content_hash(manifest)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, sort_keys=True, indent=2, default=_jsonable) + "\n")
    return path


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioFormatError(f"{path}: invalid JSON ({exc})") from exc


def read_structured(path) -> dict:
    """Read a TOML or JSON file, chosen by suffix."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        return read_json(path)
    try:
        return tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioFormatError(f"{path}: invalid TOML ({exc})") from exc


# --------------------------------------------------------------------------
# model files

def params_from_mapping(d: dict) -> GfmParameters:
    d = {k: v for k, v in d.items() if k not in ("omega_n", "v_n", "bus")}
    preset = d.pop("preset", None)
    unknown = set(d) - _PARAM_FIELDS
    if unknown:
        raise ScenarioFormatError(f"unknown inverter fields {sorted(unknown)}")
    if preset is not None:
        if preset not in PRESETS:
            raise ScenarioFormatError(f"unknown preset {preset!r}; use one of {sorted(PRESETS)}")
        return PRESETS[preset](**d)
    try:
        return GfmParameters(**d)
    except TypeError as exc:
        raise ScenarioFormatError(f"incomplete inverter parameters: {exc}") from exc


def load_model_params(path) -> GfmParameters:
    d = read_structured(path)
    d = d.get("gfm", d)
    return params_from_mapping(d)


def save_model_params(path, params: GfmParameters) -> Path:
    path = Path(path)
    if path.suffix.lower() == ".json":
        return write_json(path, params.to_dict())
    path.write_text(tomli_w.dumps({"gfm": params.to_dict()}))
    return path


# --------------------------------------------------------------------------
# scenarios

def _sections(d: dict, name: str) -> list[tuple[int, dict]]:
    raw = d.get(name, {})
    if not isinstance(raw, dict):
        raise ScenarioFormatError(f"[{name}.N] sections expected")
    out = []
    for key, value in raw.items():
        try:
            idx = int(key)
        except ValueError as exc:
            raise ScenarioFormatError(f"[{name}.{key}]: index must be an integer") from exc
        if idx < 1:
            raise ScenarioFormatError(f"[{name}.{key}]: indices start at 1")
        out.append((idx, dict(value)))
    return sorted(out)


def scenario_from_mapping(d: dict) -> tuple[MicrogridScenario, ExperimentSettings]:
    sim = dict(d.get("sim", {}))
    noise = NoiseSpec(**d.get("noise", {}))
    gfm_sections = _sections(d, "gfm")
    if not gfm_sections:
        raise ScenarioFormatError("at least one [gfm.N] section is required")
    gfms, omega_n, v_n, bus = [], [], [], []
    for i, sec in gfm_sections:
        gfms.append(params_from_mapping(sec))
        omega_n.append(float(sec.get("omega_n", OMEGA_NOMINAL)))
        v_n.append(float(sec.get("v_n", V_NOMINAL)))
        bus.append(int(sec.get("bus", i)) - 1)

    unit = float(sim.pop("load_inductance_unit", 1e-6))
    vr = float(sim.pop("virtual_resistance", 1000.0))
    lines = [Line(int(s["from"]) - 1, int(s["to"]) - 1, float(s["r"]), float(s["l"]))
             for _, s in _sections(d, "line")]
    loads = [Load(int(s["bus"]) - 1, float(s["r"]), float(s["l"])) for _, s in _sections(d, "load")]
    if lines or loads:
        network = NetworkParameters(lines, loads, vr)
    else:
        base = four_bus_network(unit)
        network = NetworkParameters(base.lines, base.loads, vr)

    faults = []
    for _, s in _sections(d, "fault"):
        s = dict(s)
        kind = FaultKind(s.pop("kind"))
        g = int(s.pop("gfm")) - 1
        start = float(s.pop("start"))
        duration = float(s.pop("duration", 0.2))
        ev = FaultEvent.default(kind, g, start, duration,
                                omega_n=omega_n[g] if 0 <= g < len(omega_n) else OMEGA_NOMINAL,
                                v_n=v_n[g] if 0 <= g < len(v_n) else V_NOMINAL)
        allowed = {"resistance", "d_omega_n", "d_v_n", "d_eta_vid", "d_eta_viq"}
        bad = set(s) - allowed
        if bad:
            raise ScenarioFormatError(f"unknown fault fields {sorted(bad)}")
        if s:
            ev = dataclasses.replace(ev, **{k: float(v) for k, v in s.items()})
        faults.append(ev)

    settings_keys = {f.name for f in fields(ExperimentSettings)}
    try:
        settings = ExperimentSettings(**{k: sim.pop(k) for k in list(sim) if k in settings_keys})
    except ValueError as exc:
        raise ScenarioFormatError(str(exc)) from exc
    scn_keys = {"duration", "dt", "reference"}
    bad = set(sim) - scn_keys
    if bad:
        raise ScenarioFormatError(f"unknown [sim] fields {sorted(bad)}")
    if "reference" in sim:
        sim["reference"] = int(sim["reference"]) - 1
    scn = MicrogridScenario(tuple(gfms), network, tuple(faults), noise,
                            omega_n=tuple(omega_n), v_n=tuple(v_n), gfm_bus=tuple(bus), **sim)
    return scn, settings


def load_scenario(path) -> tuple[MicrogridScenario, ExperimentSettings]:
    try:
        return scenario_from_mapping(read_structured(path))
    except (KeyError, TypeError) as exc:
        raise ScenarioFormatError(f"{path}: missing or malformed field {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, ScenarioFormatError):
            raise
        raise ScenarioFormatError(f"{path}: {exc}") from exc


def scenario_to_mapping(scn: MicrogridScenario, settings: ExperimentSettings | None = None) -> dict:
    sim = {"duration": scn.duration, "dt": scn.dt, "reference": scn.reference + 1,
           "virtual_resistance": scn.network.virtual_resistance}
    if settings is not None:
        sim.update({k: v for k, v in settings.as_kwargs().items() if v is not None})
    out = {
        "sim": sim,
        "noise": {"sigma_w": scn.noise.sigma_w, "sigma_v": scn.noise.sigma_v, "seed": scn.noise.seed},
        "gfm": {str(i + 1): {**p.to_dict(), "omega_n": scn.omega_n[i], "v_n": scn.v_n[i],
                             "bus": scn.gfm_bus[i] + 1}
                for i, p in enumerate(scn.gfms)},
        "line": {str(i + 1): {"from": ln.from_bus + 1, "to": ln.to_bus + 1, "r": ln.r, "l": ln.l}
                 for i, ln in enumerate(scn.network.lines)},
        "load": {str(i + 1): {"bus": ld.bus + 1, "r": ld.r, "l": ld.l}
                 for i, ld in enumerate(scn.network.loads)},
    }
    if scn.faults:
        out["fault"] = {str(i + 1): {
            "kind": ev.kind.value, "gfm": ev.gfm + 1, "start": ev.start, "duration": ev.duration,
            "resistance": ev.resistance, "d_omega_n": ev.d_omega_n, "d_v_n": ev.d_v_n,
            "d_eta_vid": ev.d_eta_vid, "d_eta_viq": ev.d_eta_viq}
            for i, ev in enumerate(scn.faults)}
    return out


def save_scenario(path, scn: MicrogridScenario, settings: ExperimentSettings | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(tomli_w.dumps(scenario_to_mapping(scn, settings)))
    return path


# --------------------------------------------------------------------------
# traces

def write_residual_csv(path, trace, threshold: float, fault_active, comment: str | None = None) -> Path:
    """Columns ``t, r1..r7, J, J_th, fault_active`` at the recorded samples.

    ``trace`` is a ResidualTrace with residual vectors; ``J`` is the signal
    the detector compares (low-passed when the trace carries a filter).
    Floats are written with 17 significant digits so equal runs give
    byte-identical files.  ``comment`` becomes a leading ``# ...`` line.
    """
    if trace.r is None:
        raise ValueError("trace carries no residual vectors")
    every = trace.r_every
    idx = np.arange(trace.r.shape[0]) * every
    t = trace.t0 + trace.dt * idx
    J = trace.signal[idx]
    active = np.asarray(fault_active, bool)[idx]
    header = "t," + ",".join(f"r{i + 1}" for i in range(trace.r.shape[1])) + ",J,J_th,fault_active"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="\n") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write(header + "\n")
        for k in range(idx.size):
            vals = [t[k], *trace.r[k], J[k], threshold]
            fh.write(",".join(f"{v:.17g}" for v in vals) + f",{int(active[k])}\n")
    return path
