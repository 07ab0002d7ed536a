"""Islanded four-inverter microgrid: scenario description and simulation.

Every inverter sits at its own bus.  Buses are joined by RL lines whose
currents are states in the common frame, which rotates at the frequency of
the reference inverter.  Loads are RL admittances evaluated at the common
frequency; with inductances in the microhenry range their time constants are
far below the step size, so they are treated as quasi-static.  Each bus also
has a large virtual resistance to ground so that the node equations

    (Y_load + 1 / r_virtual + G_fault) v_b = sum of injected currents

always have a unique solution.  A busbar fault adds ``G_fault = 1 / R_fault``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import root

from . import _kernels as K
from .detection import (
    DEFAULT_HOLD, DetectionReport, DivergenceError, FaultWindow, ResidualTrace,
    Threshold, compute_threshold, detect,
)
from .faults import FaultKind, FaultMagnitudes
from .model import (
    N_INPUTS, N_OUTPUTS, N_STATES, GfmParameters, U, X, build_inverter_model,
    gfm12_parameters, gfm34_parameters,
)

OMEGA_NOMINAL = 314.16
V_NOMINAL = 380.0
MAX_DT = 1e-4
_KIND_CODE = {
    FaultKind.BUSBAR: K.BUSBAR,
    FaultKind.ACTUATOR_OMEGA: K.ACT_OMEGA,
    FaultKind.ACTUATOR_VN: K.ACT_VN,
    FaultKind.BRIDGE: K.BRIDGE,
}


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    l: float


@dataclass(frozen=True)
class Load:
    bus: int
    r: float
    l: float


@dataclass(frozen=True)
class NetworkParameters:
    """Lines, loads and the virtual resistance (buses are 0-based)."""

    lines: tuple[Line, ...]
    loads: tuple[Load, ...]
    virtual_resistance: float = 1000.0

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "loads", tuple(self.loads))
        for item in self.lines + self.loads:
            if not (item.r > 0 and item.l > 0):
                raise ValueError(f"resistance and inductance must be positive: {item}")
        if not self.virtual_resistance > 0:
            raise ValueError("virtual resistance must be positive")
        buses = sorted({ld.bus for ld in self.loads})
        if buses != list(range(len(buses))):
            raise ValueError("exactly one load per bus, buses numbered from 0")
        for ln in self.lines:
            if not (0 <= ln.from_bus < self.n_buses and 0 <= ln.to_bus < self.n_buses):
                raise ValueError(f"line {ln} connects an unknown bus")
            if ln.from_bus == ln.to_bus:
                raise ValueError("a line must join two different buses")

    @property
    def n_buses(self) -> int:
        return len(self.loads)


def four_bus_network(load_inductance_unit: float = 1e-6) -> NetworkParameters:
    """Chain 1-2-3-4 of the test microgrid.

    Line inductances are in microhenry.  The load inductance column carries
    the same unit in the source table although millihenry values would be
    just as plausible; ``load_inductance_unit`` switches between readings.
    """
    lines = (Line(0, 1, 0.23, 318e-6), Line(1, 2, 0.35, 1847e-6), Line(2, 3, 0.23, 318e-6))
    u = load_inductance_unit
    loads = (Load(0, 30.0, 0.477 * u), Load(1, 20.0, 0.318 * u),
             Load(2, 25.0, 0.318 * u), Load(3, 25.0, 0.477 * u))
    return NetworkParameters(lines, loads)


@dataclass(frozen=True)
class FaultEvent:
    """One scheduled fault on inverter ``gfm`` (0-based).

    Busbar faults connect ``resistance`` ohms from the inverter's bus to
    ground; the other kinds take their magnitudes from the remaining fields.
    """

    kind: FaultKind
    gfm: int
    start: float
    duration: float = 0.2
    resistance: float = 0.1
    d_omega_n: float = 0.0
    d_v_n: float = 0.0
    d_eta_vid: float = 0.0
    d_eta_viq: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", FaultKind(self.kind))
        if self.duration <= 0 or self.start < 0:
            raise ValueError("fault start must be >= 0 and duration > 0")
        if self.kind is FaultKind.BUSBAR and not self.resistance > 0:
            raise ValueError("busbar fault resistance must be positive")
        FaultMagnitudes(d_eta_vid=self.d_eta_vid, d_eta_viq=self.d_eta_viq)

    @classmethod
    def default(cls, kind, gfm: int, start: float, duration: float = 0.2,
                omega_n: float = OMEGA_NOMINAL, v_n: float = V_NOMINAL) -> "FaultEvent":
        m = FaultMagnitudes.default(kind, omega_n, v_n)
        return cls(FaultKind(kind), gfm, start, duration, d_omega_n=m.d_omega_n,
                   d_v_n=m.d_v_n, d_eta_vid=m.d_eta_vid, d_eta_viq=m.d_eta_viq)

    @property
    def end(self) -> float:
        return self.start + self.duration


@dataclass(frozen=True)
class NoiseSpec:
    """White disturbance ``w`` on the five inputs and extra sensor noise.

    ``w`` has intensity ``sigma_w`` (per-step samples of standard deviation
    ``sigma_w / sqrt(dt)``) and enters the plant through ``B`` and the
    measurements through ``D``; ``sigma_v`` is added directly to ``y``.
    """

    sigma_w: float = 0.0
    sigma_v: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_w < 0 or self.sigma_v < 0:
            raise ValueError("noise intensities must be non-negative")


@dataclass(frozen=True)
class MicrogridScenario:
    gfms: tuple[GfmParameters, ...]
    network: NetworkParameters
    faults: tuple[FaultEvent, ...] = ()
    noise: NoiseSpec = NoiseSpec()
    duration: float = 10.0
    dt: float = 1e-5
    reference: int = 0
    omega_n: tuple[float, ...] | None = None
    v_n: tuple[float, ...] | None = None
    gfm_bus: tuple[int, ...] | None = None

    def __post_init__(self):
        G = len(self.gfms)
        object.__setattr__(self, "gfms", tuple(self.gfms))
        object.__setattr__(self, "faults", tuple(self.faults))
        for name, default in (("omega_n", OMEGA_NOMINAL), ("v_n", V_NOMINAL)):
            value = getattr(self, name)
            value = (default,) * G if value is None else tuple(float(v) for v in value)
            if len(value) != G:
                raise ValueError(f"{name} needs one entry per inverter")
            object.__setattr__(self, name, value)
        bus = tuple(range(G)) if self.gfm_bus is None else tuple(int(b) for b in self.gfm_bus)
        if len(bus) != G or any(not 0 <= b < self.network.n_buses for b in bus):
            raise ValueError("gfm_bus must map every inverter to an existing bus")
        object.__setattr__(self, "gfm_bus", bus)
        if not (0 < self.dt <= MAX_DT):
            raise ValueError(f"dt must lie in (0, {MAX_DT}]")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if not 0 <= self.reference < G:
            raise ValueError("reference must index an inverter")
        for ev in self.faults:
            if not 0 <= ev.gfm < G:
                raise ValueError(f"fault targets unknown inverter {ev.gfm}")
            if ev.end > self.duration + 1e-12:
                raise ValueError("fault events must lie inside [0, duration]")

    @property
    def n_gfm(self) -> int:
        return len(self.gfms)

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    def replace(self, **changes) -> "MicrogridScenario":
        return dataclasses.replace(self, **changes)

    def fault_windows(self, gfm: int) -> list[FaultWindow]:
        return [FaultWindow(ev.start, ev.end, f"{ev.kind.value}@gfm{ev.gfm + 1}")
                for ev in self.faults if ev.gfm == gfm]


def four_inverter_scenario(kind: FaultKind | str | None = None, **overrides) -> MicrogridScenario:
    """Four inverters, four loads and three lines; optional four-fault schedule.

    With ``kind`` given, inverter ``i`` (0-based) is faulted at ``4 + i``
    seconds for 0.2 s, as in the reference experiments.
    """
    faults = ()
    noise = DEFAULT_NOISE
    if kind is not None:
        faults = tuple(FaultEvent.default(kind, g, 4.0 + g) for g in range(4))
        noise = DETECTION_PRESETS[FaultKind(kind)].noise
    base = dict(
        gfms=(gfm12_parameters(), gfm12_parameters(), gfm34_parameters(), gfm34_parameters()),
        network=four_bus_network(),
        faults=faults,
        noise=noise,
    )
    base.update(overrides)
    return MicrogridScenario(**base)


@dataclass(frozen=True)
class ExperimentSettings:
    """Detection-side options that travel with a scenario."""

    lowpass_hz: float | None = None
    calibration: str = "fault_free"
    margin: float = 0.05
    hold: float = DEFAULT_HOLD
    calibration_duration: float = 10.0
    record_every: int = 20

    def __post_init__(self):
        if self.calibration not in CALIBRATIONS:
            raise ValueError(f"calibration must be one of {CALIBRATIONS}")
        if self.lowpass_hz is not None and not self.lowpass_hz > 0:
            raise ValueError("lowpass_hz must be positive")
        if self.margin < 0 or self.hold < 0:
            raise ValueError("margin and hold must be non-negative")
        if not self.calibration_duration > 0 or self.record_every < 1:
            raise ValueError("calibration_duration > 0 and record_every >= 1 required")

    def as_kwargs(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class DetectionPreset:
    noise: NoiseSpec
    settings: ExperimentSettings


CALIBRATIONS = ("fault_free", "disturbance")

# Busbar faults move J slowly and their neighbours see about half the
# response, so the residual is smoothed and neighbour faults are part of the
# calibration.  Actuator and bridge faults make J jump within one step; these
# keep the raw residual and a quieter sensor model so that the jump clears
# the noise floor.
DETECTION_PRESETS = {
    FaultKind.BUSBAR: DetectionPreset(NoiseSpec(0.1, 0.0, 0),
                                      ExperimentSettings(lowpass_hz=20.0, calibration="disturbance")),
    FaultKind.ACTUATOR_OMEGA: DetectionPreset(NoiseSpec(5e-3, 0.0, 0), ExperimentSettings()),
    FaultKind.ACTUATOR_VN: DetectionPreset(NoiseSpec(5e-3, 0.0, 0), ExperimentSettings()),
    FaultKind.BRIDGE: DetectionPreset(NoiseSpec(1e-3, 0.0, 0), ExperimentSettings()),
}
DEFAULT_NOISE = DETECTION_PRESETS[FaultKind.BUSBAR].noise


# ---------------------------------------------------------------------------
# packing


@dataclass(frozen=True)
class _Packed:
    sys: tuple
    net: tuple
    n_plant: int
    n_total: int


def _pack(scn: MicrogridScenario) -> _Packed:
    models = [build_inverter_model(p) for p in scn.gfms]
    sys = (
        np.ascontiguousarray(np.stack([m.A for m in models])),
        np.ascontiguousarray(np.stack([m.B for m in models])),
        np.ascontiguousarray(np.stack([m.C for m in models])),
        np.ascontiguousarray(np.stack([m.D for m in models])),
        np.array([p.m_p for p in scn.gfms]),
        np.array([p.omega_c for p in scn.gfms]),
        np.array([p.l_f for p in scn.gfms]),
        np.array(scn.omega_n, float),
        np.array(scn.v_n, float),
        int(scn.reference),
    )
    nw = scn.network
    net = (
        np.array(scn.gfm_bus, dtype=np.int64),
        np.array([ln.from_bus for ln in nw.lines], dtype=np.int64),
        np.array([ln.to_bus for ln in nw.lines], dtype=np.int64),
        np.array([ln.r for ln in nw.lines], float),
        np.array([ln.l for ln in nw.lines], float),
        np.array([ld.r for ld in sorted(nw.loads, key=lambda d: d.bus)], float),
        np.array([ld.l for ld in sorted(nw.loads, key=lambda d: d.bus)], float),
        float(nw.virtual_resistance),
    )
    n_plant = N_STATES * scn.n_gfm + 2 * len(nw.lines)
    return _Packed(sys, net, n_plant, n_plant + N_STATES * scn.n_gfm)


def _events_array(scn: MicrogridScenario, faults=None) -> np.ndarray:
    faults = scn.faults if faults is None else faults
    rows = []
    for ev in faults:
        rows.append([
            _KIND_CODE[ev.kind], ev.gfm, scn.gfm_bus[ev.gfm], ev.start, ev.end,
            ev.resistance, ev.d_omega_n, ev.d_v_n, ev.d_eta_vid, ev.d_eta_viq,
            scn.v_n[ev.gfm],
        ])
    return np.array(rows, float).reshape(-1, 11)


def _observer_tuple(scn: MicrogridScenario, gains, vb_nominal) -> tuple:
    G = scn.n_gfm
    has = np.zeros(G, dtype=np.bool_)
    L = np.zeros((G, N_STATES, N_OUTPUTS))
    for g, gain in (gains or {}).items():
        gain = getattr(gain, "L", gain)
        L[g] = np.asarray(gain, float)
        has[g] = True
    vb = np.zeros((G, 2)) if vb_nominal is None else np.asarray(vb_nominal, float).reshape(G, 2)
    return (has, L, np.ascontiguousarray(vb))


def _zero_drive(scn: MicrogridScenario):
    G, NB = scn.n_gfm, scn.network.n_buses
    return (np.zeros(NB), np.zeros(G), np.zeros(G), np.zeros((G, 2)),
            np.zeros((G, N_INPUTS)), np.zeros((G, N_OUTPUTS)))


# ---------------------------------------------------------------------------
# steady state


@dataclass(frozen=True)
class SteadyState:
    """Settled plant state (inverters then lines) and derived quantities."""

    z: np.ndarray
    vbus: np.ndarray
    scenario: MicrogridScenario = field(repr=False)

    @property
    def gfm_states(self) -> np.ndarray:
        G = self.scenario.n_gfm
        return self.z[:N_STATES * G].reshape(G, N_STATES)

    @property
    def line_currents(self) -> np.ndarray:
        G = self.scenario.n_gfm
        return self.z[N_STATES * G:].reshape(-1, 2)

    def local_bus_voltage(self) -> np.ndarray:
        """PCC voltage of every inverter in its own frame, shape (G, 2)."""
        out = np.empty((self.scenario.n_gfm, 2))
        for g, x in enumerate(self.gfm_states):
            v = self.vbus[self.scenario.gfm_bus[g]]
            c, s = np.cos(x[X.ALPHA]), np.sin(x[X.ALPHA])
            out[g] = (c * v[0] + s * v[1], -s * v[0] + c * v[1])
        return out

    def inputs(self) -> np.ndarray:
        """Input vectors ``u`` of every inverter at the operating point, (G, 5)."""
        scn = self.scenario
        xs = self.gfm_states
        ref = scn.reference
        omega_com = scn.omega_n[ref] - scn.gfms[ref].m_p * xs[ref, X.P]
        u = np.empty((scn.n_gfm, N_INPUTS))
        u[:, U.OMEGA_COM] = omega_com
        u[:, U.OMEGA_N] = scn.omega_n
        u[:, U.V_N] = scn.v_n
        u[:, [U.V_BD, U.V_BQ]] = self.local_bus_voltage()
        return u

    def frequencies(self) -> np.ndarray:
        scn = self.scenario
        return np.array([scn.omega_n[g] - scn.gfms[g].m_p * x[X.P]
                         for g, x in enumerate(self.gfm_states)])

    def power_balance(self) -> dict:
        """Active power produced, consumed and dissipated at the operating point."""
        scn = self.scenario
        xs = self.gfm_states
        gen = float(np.sum(xs[:, X.V_OD] * xs[:, X.I_OD] + xs[:, X.V_OQ] * xs[:, X.I_OQ]))
        conn = float(sum(p.r_c * (x[X.I_OD] ** 2 + x[X.I_OQ] ** 2) for p, x in zip(scn.gfms, xs)))
        lines = float(sum(ln.r * np.sum(i ** 2) for ln, i in zip(scn.network.lines, self.line_currents)))
        loads = 0.0
        w = self.frequencies()[scn.reference]
        for ld in scn.network.loads:
            v2 = float(np.sum(self.vbus[ld.bus] ** 2))
            loads += v2 * ld.r / (ld.r ** 2 + (w * ld.l) ** 2)
        shunt = float(np.sum(self.vbus ** 2)) / scn.network.virtual_resistance
        return {"generated": gen, "loads": loads, "lines": lines,
                "connectors": conn, "virtual": shunt}


def operating_region(steady: SteadyState, gfms=(0, 1), **kwargs):
    """Default sampling box around the settled states of the listed inverters.

    The inverters must share one parameter set; ``kwargs`` go to
    :func:`gfm_fdi.sector.default_region`.
    """
    from .sector import default_region

    gfms = tuple(gfms)
    params = steady.scenario.gfms[gfms[0]]
    if any(steady.scenario.gfms[g] != params for g in gfms):
        raise ValueError("operating_region needs inverters with identical parameters")
    return default_region(steady.gfm_states[list(gfms)], steady.inputs()[list(gfms)], params, **kwargs)


def _plant_rhs(packed: _Packed, scn: MicrogridScenario, z_plant: np.ndarray):
    G = scn.n_gfm
    z = np.zeros(packed.n_total)
    z[:packed.n_plant] = z_plant
    dz = np.zeros_like(z)
    resid = np.zeros((G, N_OUTPUTS))
    weff = np.zeros((G, N_INPUTS))
    vbus = np.zeros((scn.network.n_buses, 2))
    K.derivatives(z, packed.sys, packed.net, _observer_tuple(scn, None, None),
                  _zero_drive(scn), dz, resid, weff, vbus)
    return dz[:packed.n_plant], vbus


def initial_guess(scn: MicrogridScenario) -> np.ndarray:
    G = scn.n_gfm
    z = np.zeros(N_STATES * G + 2 * len(scn.network.lines))
    for g in range(G):
        z[N_STATES * g + X.V_OD] = scn.v_n[g]
    return z


class SettleError(RuntimeError):
    pass


def settle(scn: MicrogridScenario, t_max: float = 3.0, tol: float = 1e-6) -> SteadyState:
    """Integrate without noise or faults, then refine the operating point.

    The rough transient (up to ``t_max`` seconds) brings the state into the
    basin of the equilibrium; a Newton-type solve on the plant equations then
    drives ``max |zdot|`` below ``tol``.
    """
    packed = _pack(scn)
    quiet = scn.replace(faults=(), noise=NoiseSpec(), duration=t_max)
    trace = simulate(quiet, z0=initial_guess(scn), record_every=0)
    z = trace.final_plant_state
    ref_slot = N_STATES * scn.reference + X.ALPHA
    keep = np.ones(packed.n_plant, dtype=bool)
    keep[ref_slot] = False
    z[ref_slot] = 0.0

    def residual_fn(v):
        full = z.copy()
        full[keep] = v
        return _plant_rhs(packed, scn, full)[0][keep]

    sol = root(residual_fn, z[keep], method="hybr", tol=1e-13)
    z[keep] = sol.x
    dz, vbus = _plant_rhs(packed, scn, z)
    err = float(np.max(np.abs(dz)))
    if not np.isfinite(err) or err > tol:
        raise SettleError(f"operating point not reached: max |zdot| = {err:.3e}")
    return SteadyState(z, vbus, scn)


# ---------------------------------------------------------------------------
# simulation


@dataclass
class SimulationTrace:
    """Output of one run.

    ``J``, ``w2`` and ``f2`` are sampled at every step (shape (n_steps, G)):
    the residual norm of each observer, the squared norm of the disturbance
    it sees and the squared norm of its own active fault vector.  States,
    residual vectors and bus voltages are kept every ``record_every`` steps.
    """

    scenario: MicrogridScenario
    dt: float
    J: np.ndarray
    w2: np.ndarray
    f2: np.ndarray
    record_every: int
    z: np.ndarray
    r: np.ndarray
    vbus: np.ndarray
    final_state: np.ndarray
    n_plant: int

    @property
    def t(self) -> np.ndarray:
        return self.dt * np.arange(self.J.shape[0])

    @property
    def t_recorded(self) -> np.ndarray:
        return self.dt * self.record_every * np.arange(self.z.shape[0])

    @property
    def final_plant_state(self) -> np.ndarray:
        return self.final_state[:self.n_plant].copy()

    def gfm_states(self, g: int) -> np.ndarray:
        return self.z[:, N_STATES * g:N_STATES * (g + 1)]

    def observer_states(self, g: int) -> np.ndarray:
        base = self.n_plant + N_STATES * g
        return self.z[:, base:base + N_STATES]

    def fault_active(self, g: int) -> np.ndarray:
        t = self.t
        active = np.zeros(t.size, dtype=bool)
        for ev in self.scenario.faults:
            if ev.gfm == g:
                active |= (t >= ev.start) & (t < ev.end)
        return active

    def residual_trace(self, g: int) -> ResidualTrace:
        r = self.r[:, g, :] if self.record_every else None
        return ResidualTrace(self.dt, self.J[:, g], 0.0, r, max(self.record_every, 1))


def _noise_streams(noise: NoiseSpec, stream: int):
    rw = np.random.default_rng([noise.seed, stream, 0])
    rv = np.random.default_rng([noise.seed, stream, 1])
    return rw, rv


def simulate(scn: MicrogridScenario, gains=None, z0=None, vb_nominal=None,
             record_every: int = 20, stream: int = 0, chunk: int = 10_000) -> SimulationTrace:
    """Fixed-step RK4 run of ``scn``.

    ``gains`` maps inverter index to an observer gain (or an object with an
    ``L`` attribute).  Observers start on the plant state and use the inputs
    an inverter knows without measuring its PCC voltage: the common frequency,
    its own set-points and ``vb_nominal`` (the settled local PCC voltage).
    """
    packed = _pack(scn)
    G = scn.n_gfm
    NB = scn.network.n_buses
    n_steps = scn.n_steps
    if z0 is None:
        z0 = settle(scn).z
    z0 = np.asarray(z0, float)
    z = np.zeros(packed.n_total)
    if z0.size == packed.n_total:
        z[:] = z0
    elif z0.size == packed.n_plant:
        z[:packed.n_plant] = z0
        z[packed.n_plant:] = z0[:N_STATES * G]
    else:
        raise ValueError("initial state has the wrong size")
    obs = _observer_tuple(scn, gains, vb_nominal)
    events = _events_array(scn)

    rec = record_every if record_every > 0 else n_steps + 1
    chunk = max(rec, (chunk // rec) * rec) if record_every > 0 else chunk
    n_rec = (n_steps + rec - 1) // rec if record_every > 0 else 0
    J = np.zeros((n_steps, G))
    w2 = np.zeros((n_steps, G))
    f2 = np.zeros((n_steps, G))
    z_rec = np.zeros((n_rec, packed.n_total))
    r_rec = np.zeros((n_rec, G, N_OUTPUTS))
    vb_rec = np.zeros((n_rec, NB, 2))
    dummy_z = np.zeros((1, packed.n_total))
    dummy_r = np.zeros((1, G, N_OUTPUTS))
    dummy_v = np.zeros((1, NB, 2))

    rw, rv = _noise_streams(scn.noise, stream)
    sw = scn.noise.sigma_w / np.sqrt(scn.dt)
    sv = scn.noise.sigma_v
    for k0 in range(0, n_steps, chunk):
        n = min(chunk, n_steps - k0)
        w = rw.standard_normal((n, G, N_INPUTS)) * sw if sw > 0 else np.zeros((n, G, N_INPUTS))
        v = rv.standard_normal((n, G, N_OUTPUTS)) * sv if sv > 0 else np.zeros((n, G, N_OUTPUTS))
        if record_every > 0:
            r0 = k0 // rec
            r1 = min(r0 + (n + rec - 1) // rec, n_rec)
            zr, rr, vr = z_rec[r0:r1], r_rec[r0:r1], vb_rec[r0:r1]
            every = rec
        else:
            zr, rr, vr, every = dummy_z, dummy_r, dummy_v, n + 1
        bad = K.run_steps(z, k0, n, scn.dt, packed.sys, packed.net, obs, events, w, v,
                          every, J[k0:k0 + n], w2[k0:k0 + n], f2[k0:k0 + n], zr, rr, vr)
        if bad >= 0:
            raise DivergenceError(_diverged_component(z, packed, G), bad)
    return SimulationTrace(scn, scn.dt, J, w2, f2, record_every, z_rec, r_rec, vb_rec,
                           z.copy(), packed.n_plant)


def _diverged_component(z, packed, G) -> str:
    bad = np.flatnonzero(~np.isfinite(z))
    i = int(bad[0]) if bad.size else 0
    if i < N_STATES * G:
        return f"simulation diverged in inverter {i // N_STATES + 1}"
    if i < packed.n_plant:
        return f"simulation diverged in line {(i - N_STATES * G) // 2 + 1}"
    return f"observer of inverter {(i - packed.n_plant) // N_STATES + 1} diverged"


def step(scn: MicrogridScenario, z, gains=None, vb_nominal=None, k: int = 0) -> np.ndarray:
    """Advance the global state by one noise-free step starting at step ``k``."""
    single = scn.replace(noise=NoiseSpec(), duration=scn.dt * (k + 1))
    packed = _pack(single)
    z = np.array(z, float)
    if z.size == packed.n_plant:
        z = np.concatenate([z, z[:N_STATES * scn.n_gfm]])
    G = scn.n_gfm
    NB = scn.network.n_buses
    bad = K.run_steps(z, k, 1, scn.dt, packed.sys, packed.net,
                      _observer_tuple(scn, gains, vb_nominal), _events_array(scn),
                      np.zeros((1, G, N_INPUTS)), np.zeros((1, G, N_OUTPUTS)), 2,
                      np.zeros((1, G)), np.zeros((1, G)), np.zeros((1, G)),
                      np.zeros((1, packed.n_total)), np.zeros((1, G, N_OUTPUTS)),
                      np.zeros((1, NB, 2)))
    if bad >= 0:
        raise DivergenceError(_diverged_component(z, packed, G), bad)
    return z


# ---------------------------------------------------------------------------
# two-phase experiment


@dataclass
class ExperimentResult:
    steady: SteadyState
    calibration: dict[int, SimulationTrace]
    faulted: SimulationTrace
    thresholds: dict[int, Threshold]
    reports: dict[int, DetectionReport]

    def residual_trace(self, g: int) -> ResidualTrace:
        return self.faulted.residual_trace(g)


def run_experiment(scn: MicrogridScenario, designs, calibration_duration: float = 10.0,
                   margin: float = 0.05, hold: float = DEFAULT_HOLD,
                   lowpass_hz: float | None = None, record_every: int = 20,
                   steady: SteadyState | None = None,
                   calibration: str = "fault_free") -> ExperimentResult:
    """Calibration run(s), then the scheduled faulted run.

    ``calibration="fault_free"`` removes every fault from the calibration
    run.  ``"disturbance"`` removes only the monitored inverter's own faults,
    so faults elsewhere in the grid count as disturbances when the
    threshold is taken; this needs one calibration run per observer.

    All runs start at the settled operating point.  Calibration and faulted
    runs draw independent noise streams from the scenario seed, so the
    threshold is tested on data it was not fitted to.
    """
    if calibration not in CALIBRATIONS:
        raise ValueError(f"calibration must be one of {CALIBRATIONS}")
    steady = steady or settle(scn)
    vb_nom = steady.local_bus_voltage()
    longest = max((ev.duration for ev in scn.faults), default=None)
    if calibration == "fault_free":
        cal_scn = scn.replace(faults=(), duration=calibration_duration)
        cal = simulate(cal_scn, designs, steady.z, vb_nom, record_every, stream=0)
        cal_runs = {g: cal for g in designs}
    else:
        cal_runs = {}
        for g in designs:
            own_free = tuple(ev for ev in scn.faults if ev.gfm != g
                             and ev.end <= calibration_duration + 1e-12)
            cal_scn = scn.replace(faults=own_free, duration=calibration_duration)
            cal_runs[g] = simulate(cal_scn, {g: designs[g]}, steady.z, vb_nom, record_every, stream=0)
    run = simulate(scn, designs, steady.z, vb_nom, record_every, stream=1)
    thresholds, reports = {}, {}
    for g in designs:
        ct = cal_runs[g].residual_trace(g)
        ft = run.residual_trace(g)
        if lowpass_hz:
            ct, ft = ct.lowpass(lowpass_hz), ft.lowpass(lowpass_hz)
        th = compute_threshold(ct, margin, longest)
        thresholds[g] = th
        reports[g] = detect(ft, th, scn.fault_windows(g), hold)
    return ExperimentResult(steady, cal_runs, run, thresholds, reports)
