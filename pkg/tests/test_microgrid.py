import numpy as np
import pytest

from gfm_fdi.detection import DivergenceError
from gfm_fdi.faults import FaultKind
from gfm_fdi.microgrid import (
    DETECTION_PRESETS, ExperimentSettings, FaultEvent, Line, Load, MicrogridScenario,
    NetworkParameters, NoiseSpec, four_bus_network, four_inverter_scenario, settle,
    simulate, step,
)
from gfm_fdi.model import N_STATES, X, gfm12_parameters

from oracles import rl_step_response

QUIET = NoiseSpec()


def test_settled_frequencies_agree(steady):
    w = steady.frequencies()
    assert np.ptp(w) < 1e-6
    assert 300 < w[0] < 320


def test_power_sharing_follows_droop(steady):
    scn = steady.scenario
    P = steady.gfm_states[:, X.P]
    assert np.all(P > 0)
    expected = scn.gfms[2].m_p / scn.gfms[0].m_p
    assert P[0] / P[2] == pytest.approx(expected, rel=0.2)


def test_power_balance(steady):
    b = steady.power_balance()
    consumed = b["loads"] + b["lines"] + b["connectors"] + b["virtual"]
    assert consumed == pytest.approx(b["generated"], rel=0.01)


def test_line_currents_match_rl_phasor(steady):
    """Settled line currents equal the steady state of an RL branch at the common frequency."""
    scn = steady.scenario
    w = steady.frequencies()[scn.reference]
    for ln, i in zip(scn.network.lines, steady.line_currents):
        dv = steady.vbus[ln.from_bus] - steady.vbus[ln.to_bus]
        want = rl_step_response(ln.r, ln.l, w, dv, 1.0)
        np.testing.assert_allclose(i, want, rtol=1e-6, atol=1e-6 * np.abs(want).max())


def test_single_inverter_with_one_load():
    net = NetworkParameters((), (Load(0, 30.0, 0.477e-6),))
    scn = MicrogridScenario((gfm12_parameters(),), net, noise=QUIET)
    st = settle(scn)
    x = st.gfm_states[0]
    assert x[X.P] == pytest.approx(x[X.V_OD] * x[X.I_OD] + x[X.V_OQ] * x[X.I_OQ], rel=1e-9)
    b = st.power_balance()
    assert b["loads"] + b["connectors"] + b["virtual"] == pytest.approx(b["generated"], rel=0.01)
    assert st.frequencies()[0] == pytest.approx(scn.omega_n[0] - scn.gfms[0].m_p * x[X.P])


def test_operating_point_is_a_fixed_point(steady):
    scn = steady.scenario.replace(noise=QUIET)
    z1 = step(scn, steady.z)
    n = steady.z.size
    change = np.abs(z1[:n] - steady.z)
    assert np.all(change <= 1e-10 * np.maximum(1.0, np.abs(steady.z)))


def test_busbar_fault_collapses_local_voltage(steady):
    """The 0.1 ohm branch dominates the node equation the moment it closes.

    Without current limits the voltage loop later pushes the PCC back up to
    roughly 58 % for a few tens of milliseconds, so the check covers the
    onset sample and the window mean.
    """
    scn = four_inverter_scenario(noise=QUIET, duration=0.25,
                                 faults=(FaultEvent.default("busbar", 0, 0.02, 0.2),))
    tr = simulate(scn, None, steady.z, record_every=1)
    t = tr.t_recorded
    mag = np.linalg.norm(tr.vbus[:, 0, :], axis=1)
    before = mag[t < 0.02].mean()
    onset = np.searchsorted(t, 0.02 - 1e-12)
    assert mag[onset + 1] < 0.5 * before
    window = (t > 0.02) & (t < 0.22)
    assert mag[window].mean() < 0.5 * before


def test_same_seed_same_trace(steady):
    scn = four_inverter_scenario(duration=0.01, noise=NoiseSpec(0.1, 0.01, 3))
    a = simulate(scn, None, steady.z, record_every=5)
    b = simulate(scn, None, steady.z, record_every=5)
    np.testing.assert_array_equal(a.z, b.z)
    np.testing.assert_array_equal(a.J, b.J)
    c = simulate(scn.replace(noise=NoiseSpec(0.1, 0.01, 4)), None, steady.z, record_every=5)
    assert not np.array_equal(a.z, c.z)
    d = simulate(scn, None, steady.z, record_every=5, stream=1)
    assert not np.array_equal(a.z, d.z)


def test_reference_choice_does_not_change_the_physics(steady):
    other = settle(four_inverter_scenario(reference=2))
    np.testing.assert_allclose(other.frequencies(), steady.frequencies(), rtol=1e-9)
    np.testing.assert_allclose(other.gfm_states[:, X.P], steady.gfm_states[:, X.P], rtol=1e-6)
    mag_a = np.linalg.norm(other.vbus, axis=1)
    mag_b = np.linalg.norm(steady.vbus, axis=1)
    np.testing.assert_allclose(mag_a, mag_b, rtol=1e-6)


def test_step_halving_converges_at_high_order(steady):
    scn = four_inverter_scenario(noise=QUIET, duration=0.02)
    rng = np.random.default_rng(0)
    z0 = steady.z * (1 + 0.02 * rng.standard_normal(steady.z.size))
    fin = [simulate(scn.replace(dt=dt), None, z0, record_every=0).final_plant_state
           for dt in (1e-5, 5e-6, 2.5e-6)]
    e1 = np.linalg.norm(fin[0] - fin[1])
    e2 = np.linalg.norm(fin[1] - fin[2])
    assert e1 / e2 >= 8


def test_exact_observer_has_zero_residual(steady, designs):
    scn = four_inverter_scenario(noise=QUIET, duration=0.05)
    gains = designs.grid("busbar", scn)
    tr = simulate(scn, gains, steady.z, steady.local_bus_voltage(), record_every=0)
    y_scale = np.linalg.norm(steady.gfm_states, axis=1).max()
    assert tr.J.max() < 1e-8 * y_scale


def test_observer_states_start_on_the_plant(steady):
    scn = four_inverter_scenario(noise=QUIET, duration=1e-4)
    tr = simulate(scn, None, steady.z, record_every=1)
    np.testing.assert_array_equal(tr.observer_states(1)[0], tr.gfm_states(1)[0])


def test_fault_activity_mask():
    scn = four_inverter_scenario(noise=QUIET, duration=0.01,
                                 faults=(FaultEvent.default("actuator_vn", 1, 0.002, 0.003),))
    tr = simulate(scn, None, settle(scn).z, record_every=0)
    act = tr.fault_active(1)
    assert act.sum() == 300
    assert not tr.fault_active(0).any()
    assert scn.fault_windows(1)[0].start == 0.002


def test_actuator_fault_is_seen_by_own_observer_only_through_f(steady, designs):
    scn = four_inverter_scenario(noise=QUIET, duration=0.02,
                                 faults=(FaultEvent.default("actuator_omega", 0, 0.01, 0.005),))
    gains = designs.grid("actuator_omega", scn)
    tr = simulate(scn, gains, steady.z, steady.local_bus_voltage(), record_every=0)
    act = tr.fault_active(0)
    assert tr.f2[act, 0].min() > 0
    assert tr.f2[~act, 0].max() == 0
    assert tr.J[act, 0].max() > 1.0


def test_divergence_is_reported(steady):
    scn = four_inverter_scenario(noise=QUIET, dt=1e-4, duration=0.05)
    with pytest.raises(DivergenceError, match="diverged"):
        simulate(scn, None, steady.z, record_every=0)


def test_scenario_validation():
    base = four_inverter_scenario()
    with pytest.raises(ValueError):
        base.replace(dt=1e-3)
    with pytest.raises(ValueError):
        base.replace(duration=1.0, faults=(FaultEvent.default("busbar", 0, 0.9),))
    with pytest.raises(ValueError):
        base.replace(gfm_bus=(0, 1, 2, 7))
    with pytest.raises(ValueError):
        base.replace(faults=(FaultEvent.default("busbar", 5, 1.0),))
    with pytest.raises(ValueError):
        base.replace(reference=4)
    with pytest.raises(ValueError):
        FaultEvent("busbar", 0, 1.0, resistance=0.0)
    with pytest.raises(ValueError):
        FaultEvent("bridge", 0, 1.0, d_eta_vid=2.0)
    with pytest.raises(ValueError):
        NoiseSpec(sigma_w=-1.0)
    with pytest.raises(ValueError):
        NetworkParameters((Line(0, 1, -0.1, 1e-4),), (Load(0, 1, 1e-6), Load(1, 1, 1e-6)))
    with pytest.raises(ValueError):
        NetworkParameters((Line(0, 0, 0.1, 1e-4),), (Load(0, 1, 1e-6),))
    with pytest.raises(ValueError):
        ExperimentSettings(calibration="magic")
    with pytest.raises(ValueError):
        simulate(base.replace(duration=1e-4), None, np.zeros(7))


def test_presets_cover_every_kind():
    assert set(DETECTION_PRESETS) == set(FaultKind)
    scn = four_inverter_scenario("bridge")
    assert scn.noise == DETECTION_PRESETS[FaultKind.BRIDGE].noise
    assert [ev.start for ev in scn.faults] == [4.0, 5.0, 6.0, 7.0]
    assert all(ev.duration == 0.2 for ev in scn.faults)


def test_network_shape():
    net = four_bus_network()
    assert net.n_buses == 4 and len(net.lines) == 3
    assert net.lines[1].l == pytest.approx(1847e-6)
    assert four_bus_network(1e-3).loads[0].l == pytest.approx(0.477e-3)
    assert N_STATES == 13


def test_physical_busbar_fault_matches_fault_matrix(steady):
    """Closing the 0.1 ohm branch moves inverter 1's derivative by E_f times the PCC voltage step."""
    from gfm_fdi import _kernels as K
    from gfm_fdi.faults import FaultMagnitudes, fault_signature
    from gfm_fdi.microgrid import _observer_tuple, _pack, _zero_drive

    scn = steady.scenario.replace(noise=QUIET)
    packed = _pack(scn)
    z = np.zeros(packed.n_total)
    z[:packed.n_plant] = steady.z

    def rhs(g_fault_bus0):
        drive = _zero_drive(scn)
        drive[0][0] = g_fault_bus0
        dz = np.zeros_like(z)
        vbus = np.zeros((scn.network.n_buses, 2))
        K.derivatives(z, packed.sys, packed.net, _observer_tuple(scn, None, None), drive, dz,
                      np.zeros((4, 7)), np.zeros((4, 5)), vbus)
        return dz[:N_STATES], vbus[0]

    dx0, v0 = rhs(0.0)
    dx1, v1 = rhs(1.0 / 0.1)
    a = steady.gfm_states[0, X.ALPHA]
    rot = np.array([[np.cos(a), np.sin(a)], [-np.sin(a), np.cos(a)]])
    dv = rot @ (v1 - v0)
    sig = fault_signature("busbar", scn.gfms[0])
    want = sig.state_effect(steady.gfm_states[0], steady.inputs()[0],
                            FaultMagnitudes(dv_bd=dv[0], dv_bq=dv[1]))
    np.testing.assert_allclose(dx1 - dx0, want, rtol=1e-9, atol=1e-9 * np.abs(want).max())
