"""Nonlinear dq-frame model of a droop-controlled grid-forming inverter.

The model is written as ``xdot = A x + B u + phi(x, u)`` and ``y = C x + D u``
where ``phi`` collects every bilinear product (state x state and
state x input) and ``A``, ``B``, ``C``, ``D`` are constant.

Sign conventions
----------------
Each inverter works in its own dq frame rotating at ``omega = omega_n - m_p P``.
Complex quantities are ``d + j q`` and apparent power is ``S = v i*``, so

    P = v_od i_od + v_oq i_oq,      Q = v_oq i_od - v_od i_oq.

Positive ``Q`` therefore means the inverter exports reactive power to an
inductive load, and the reactive droop ``v_od* = V_n - n_q Q`` lowers the
voltage as inductive loading increases.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class X(IntEnum):
    """Slot order of the 13-element state vector."""

    ALPHA = 0
    P = 1
    Q = 2
    PHI_D = 3
    PHI_Q = 4
    GAMMA_D = 5
    GAMMA_Q = 6
    I_LD = 7
    I_LQ = 8
    V_OD = 9
    V_OQ = 10
    I_OD = 11
    I_OQ = 12


class U(IntEnum):
    """Slot order of the 5-element input vector."""

    OMEGA_COM = 0
    OMEGA_N = 1
    V_N = 2
    V_BD = 3
    V_BQ = 4


class Y(IntEnum):
    """Slot order of the 7-element measurement vector."""

    ALPHA = 0
    OMEGA = 1
    V_OD_REF = 2
    I_LD_REF = 3
    I_LQ_REF = 4
    V_ID_REF = 5
    V_IQ_REF = 6


N_STATES = len(X)
N_INPUTS = len(U)
N_OUTPUTS = len(Y)

STATE_NAMES = tuple(s.name.lower() for s in X)
INPUT_NAMES = tuple(s.name.lower() for s in U)
OUTPUT_NAMES = tuple(s.name.lower() for s in Y)


@dataclass(frozen=True)
class GfmParameters:
    """Physical and controller constants of one inverter (SI units).

    ``omega_c`` and ``f_feedforward`` are calibration knobs: the power
    low-pass cutoff and the output-current feed-forward gain of the voltage
    controller.
    """

    power_rating_kva: float
    voltage_rating_v: float
    m_p: float
    n_q: float
    r_c: float
    l_c: float
    r_f: float
    l_f: float
    c_f: float
    k_pv: float
    k_iv: float
    k_pc: float
    k_ic: float
    omega_b: float = 314.16
    omega_c: float = 31.41
    f_feedforward: float = 0.75

    def __post_init__(self):
        positive = ("r_c", "l_c", "r_f", "l_f", "c_f", "m_p", "n_q", "omega_b")
        for name in positive:
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"{name} must be strictly positive, got {value!r}")
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if not np.isfinite(value):
                raise ValueError(f"{field.name} must be finite, got {value!r}")

    @property
    def rated_current(self) -> float:
        return 1e3 * self.power_rating_kva / self.voltage_rating_v

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GfmParameters":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown parameter fields: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    def replace(self, **changes) -> "GfmParameters":
        return dataclasses.replace(self, **changes)


def gfm12_parameters(**overrides) -> GfmParameters:
    """Inverters #1 and #2 of the four-inverter test microgrid."""
    params = GfmParameters(
        power_rating_kva=45.0, voltage_rating_v=380.0,
        m_p=9.4e-5, n_q=1.3e-3,
        r_c=0.03, l_c=0.35e-3, r_f=0.1, l_f=1.35e-3, c_f=50e-6,
        k_pv=0.1, k_iv=420.0, k_pc=15.0, k_ic=20000.0,
        omega_b=314.16,
    )
    return params.replace(**overrides) if overrides else params


def gfm34_parameters(**overrides) -> GfmParameters:
    """Inverters #3 and #4 of the four-inverter test microgrid."""
    params = GfmParameters(
        power_rating_kva=34.0, voltage_rating_v=380.0,
        m_p=12.5e-5, n_q=1.5e-3,
        r_c=0.03, l_c=0.35e-3, r_f=0.1, l_f=1.35e-3, c_f=50e-6,
        k_pv=0.05, k_iv=390.0, k_pc=10.5, k_ic=16000.0,
        omega_b=314.16,
    )
    return params.replace(**overrides) if overrides else params


def _affine_signals(p: GfmParameters) -> dict[str, np.ndarray]:
    """Controller signals as coefficient rows over the stacked vector [x; u]."""
    n = N_STATES

    def row(**coef):
        r = np.zeros(N_STATES + N_INPUTS)
        for key, value in coef.items():
            if key.startswith("u_"):
                r[n + U[key[2:].upper()]] += value
            else:
                r[X[key.upper()]] += value
        return r

    omega = row(u_omega_n=1.0, p=-p.m_p)
    v_od_ref = row(u_v_n=1.0, q=-p.n_q)
    i_ld_ref = (
        row(i_od=p.f_feedforward, v_oq=-p.omega_b * p.c_f, v_od=-p.k_pv, phi_d=p.k_iv)
        + p.k_pv * v_od_ref
    )
    i_lq_ref = row(i_oq=p.f_feedforward, v_od=p.omega_b * p.c_f, v_oq=-p.k_pv, phi_q=p.k_iv)
    v_id_ref = (
        row(i_lq=-p.omega_b * p.l_f, i_ld=-p.k_pc, gamma_d=p.k_ic) + p.k_pc * i_ld_ref
    )
    v_iq_ref = (
        row(i_ld=p.omega_b * p.l_f, i_lq=-p.k_pc, gamma_q=p.k_ic) + p.k_pc * i_lq_ref
    )
    return {
        "alpha": row(alpha=1.0),
        "omega": omega,
        "v_od_ref": v_od_ref,
        "i_ld_ref": i_ld_ref,
        "i_lq_ref": i_lq_ref,
        "v_id_ref": v_id_ref,
        "v_iq_ref": v_iq_ref,
    }


@dataclass(frozen=True, eq=False)
class InverterModel:
    """Matrices of the affine part plus the bilinear remainder ``phi``."""

    params: GfmParameters
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "C", "D"):
            getattr(self, name).setflags(write=False)

    def phi(self, x, u) -> np.ndarray:
        return nonlinear_term(self.params, x, u)

    def derivative(self, x, u) -> np.ndarray:
        return derivative(self, x, u)

    def output(self, x, u) -> np.ndarray:
        return output(self, x, u)


def build_inverter_model(params: GfmParameters) -> InverterModel:
    """Assemble ``A``, ``B``, ``C``, ``D`` for one inverter."""
    if not isinstance(params, GfmParameters):
        raise TypeError("params must be a GfmParameters instance")
    p = params
    sig = _affine_signals(p)
    n = N_STATES
    M = np.zeros((N_STATES, N_STATES + N_INPUTS))

    M[X.ALPHA] = sig["omega"]
    M[X.ALPHA, n + U.OMEGA_COM] -= 1.0
    M[X.P, X.P] = -p.omega_c
    M[X.Q, X.Q] = -p.omega_c
    M[X.PHI_D] = sig["v_od_ref"]
    M[X.PHI_D, X.V_OD] -= 1.0
    M[X.PHI_Q, X.V_OQ] = -1.0
    M[X.GAMMA_D] = sig["i_ld_ref"]
    M[X.GAMMA_D, X.I_LD] -= 1.0
    M[X.GAMMA_Q] = sig["i_lq_ref"]
    M[X.GAMMA_Q, X.I_LQ] -= 1.0
    # LC filter with ideal bridge (v_i = v_i*); rotation terms live in phi
    M[X.I_LD] = sig["v_id_ref"] / p.l_f
    M[X.I_LD, X.I_LD] -= p.r_f / p.l_f
    M[X.I_LD, X.V_OD] -= 1.0 / p.l_f
    M[X.I_LQ] = sig["v_iq_ref"] / p.l_f
    M[X.I_LQ, X.I_LQ] -= p.r_f / p.l_f
    M[X.I_LQ, X.V_OQ] -= 1.0 / p.l_f
    M[X.V_OD, X.I_LD] = 1.0 / p.c_f
    M[X.V_OD, X.I_OD] = -1.0 / p.c_f
    M[X.V_OQ, X.I_LQ] = 1.0 / p.c_f
    M[X.V_OQ, X.I_OQ] = -1.0 / p.c_f
    M[X.I_OD, X.I_OD] = -p.r_c / p.l_c
    M[X.I_OD, X.V_OD] = 1.0 / p.l_c
    M[X.I_OD, n + U.V_BD] = -1.0 / p.l_c
    M[X.I_OQ, X.I_OQ] = -p.r_c / p.l_c
    M[X.I_OQ, X.V_OQ] = 1.0 / p.l_c
    M[X.I_OQ, n + U.V_BQ] = -1.0 / p.l_c

    out = np.vstack([sig[name] for name in OUTPUT_NAMES])
    return InverterModel(
        params=p,
        A=M[:, :n].copy(),
        B=M[:, n:].copy(),
        C=out[:, :n].copy(),
        D=out[:, n:].copy(),
    )



def nonlinear_term(params: GfmParameters, x, u) -> np.ndarray:
    """Bilinear remainder ``phi(x, u)``; broadcasts over leading axes."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    p = params
    omega = u[..., U.OMEGA_N] - p.m_p * x[..., X.P]
    i_ld, i_lq = x[..., X.I_LD], x[..., X.I_LQ]
    v_od, v_oq = x[..., X.V_OD], x[..., X.V_OQ]
    i_od, i_oq = x[..., X.I_OD], x[..., X.I_OQ]

    out = np.zeros(np.broadcast_shapes(x.shape, u.shape[:-1] + (N_STATES,)))
    out[..., X.P] = p.omega_c * (v_od * i_od + v_oq * i_oq)
    out[..., X.Q] = p.omega_c * (v_oq * i_od - v_od * i_oq)
    out[..., X.I_LD] = omega * i_lq
    out[..., X.I_LQ] = -omega * i_ld
    out[..., X.V_OD] = omega * v_oq
    out[..., X.V_OQ] = -omega * v_od
    out[..., X.I_OD] = omega * i_oq
    out[..., X.I_OQ] = -omega * i_od
    return out


def derivative(model: InverterModel, x, u) -> np.ndarray:
    """State derivative ``A x + B u + phi(x, u)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return x @ model.A.T + u @ model.B.T + nonlinear_term(model.params, x, u)


def output(model: InverterModel, x, u) -> np.ndarray:
    """Measurement ``C x + D u``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return x @ model.C.T + u @ model.D.T


def phi_jacobian(params: GfmParameters, x, u) -> np.ndarray:
    """Jacobian of ``phi`` with respect to the state, shape (..., 13, 13)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    p = params
    shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    J = np.zeros(shape + (N_STATES, N_STATES))
    omega = u[..., U.OMEGA_N] - p.m_p * x[..., X.P]
    i_ld, i_lq = x[..., X.I_LD], x[..., X.I_LQ]
    v_od, v_oq = x[..., X.V_OD], x[..., X.V_OQ]
    i_od, i_oq = x[..., X.I_OD], x[..., X.I_OQ]
    wc = p.omega_c

    J[..., X.P, X.V_OD] = wc * i_od
    J[..., X.P, X.I_OD] = wc * v_od
    J[..., X.P, X.V_OQ] = wc * i_oq
    J[..., X.P, X.I_OQ] = wc * v_oq
    J[..., X.Q, X.V_OQ] = wc * i_od
    J[..., X.Q, X.I_OD] = wc * v_oq
    J[..., X.Q, X.V_OD] = -wc * i_oq
    J[..., X.Q, X.I_OQ] = -wc * v_od
    # rows driven by omega * s: d/ds = omega, d/dP = -m_p * s
    for row, col, sign in (
        (X.I_LD, X.I_LQ, 1.0), (X.I_LQ, X.I_LD, -1.0),
        (X.V_OD, X.V_OQ, 1.0), (X.V_OQ, X.V_OD, -1.0),
        (X.I_OD, X.I_OQ, 1.0), (X.I_OQ, X.I_OD, -1.0),
    ):
        J[..., row, col] = sign * omega
        J[..., row, X.P] = -sign * p.m_p * x[..., col]
    return J
