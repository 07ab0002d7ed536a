"""Fault vectors and matrices for the four internal inverter faults.

Every fault is an additive perturbation of the healthy model,

    xdot = A x + B u + phi(x, u) + E_f f,     y = C x + D u + F_f f,

obtained by substituting ``z' = z + dz`` for the affected variable.  The
fault vector ``f`` may depend on the state (the actuator ``omega_n`` fault and
the bridge fault enter through products).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .model import N_OUTPUTS, N_STATES, GfmParameters, U, X, Y


class FaultKind(str, Enum):
    BUSBAR = "busbar"
    ACTUATOR_OMEGA = "actuator_omega"
    ACTUATOR_VN = "actuator_vn"
    BRIDGE = "bridge"


@dataclass(frozen=True)
class FaultMagnitudes:
    """Offsets applied by a fault. Efficiency drops lie in (0, 1]."""

    dv_bd: float = 0.0
    dv_bq: float = 0.0
    d_omega_n: float = 0.0
    d_v_n: float = 0.0
    d_eta_vid: float = 0.0
    d_eta_viq: float = 0.0

    def __post_init__(self):
        for name in ("d_eta_vid", "d_eta_viq"):
            value = getattr(self, name)
            if value != 0.0 and not (0.0 < value <= 1.0):
                raise ValueError(f"{name} must lie in (0, 1], got {value!r}")

    @classmethod
    def default(cls, kind: "FaultKind | str", omega_n: float = 314.16, v_n: float = 380.0):
        """Ten percent of nominal for actuators, 0.1 efficiency loss for the bridge."""
        kind = FaultKind(kind)
        if kind is FaultKind.ACTUATOR_OMEGA:
            return cls(d_omega_n=0.1 * omega_n)
        if kind is FaultKind.ACTUATOR_VN:
            return cls(d_v_n=0.1 * v_n)
        if kind is FaultKind.BRIDGE:
            return cls(d_eta_vid=0.1, d_eta_viq=0.1)
        return cls()


@dataclass(frozen=True, eq=False)
class FaultSignature:
    kind: FaultKind
    E_f: np.ndarray
    F_f: np.ndarray
    builder: Callable[[np.ndarray, np.ndarray, FaultMagnitudes], np.ndarray] = field(repr=False)

    @property
    def k(self) -> int:
        return self.E_f.shape[1]

    def fault_vector(self, x, u, magnitudes: FaultMagnitudes) -> np.ndarray:
        return self.builder(np.asarray(x, float), np.asarray(u, float), magnitudes)

    def state_effect(self, x, u, magnitudes) -> np.ndarray:
        return self.fault_vector(x, u, magnitudes) @ self.E_f.T

    def output_effect(self, x, u, magnitudes) -> np.ndarray:
        return self.fault_vector(x, u, magnitudes) @ self.F_f.T


def _frozen(*arrays):
    for a in arrays:
        a.setflags(write=False)


def busbar_signature(params: GfmParameters) -> FaultSignature:
    E = np.zeros((N_STATES, 2))
    E[X.I_OD, 0] = -1.0 / params.l_c
    E[X.I_OQ, 1] = -1.0 / params.l_c
    F = np.zeros((N_OUTPUTS, 2))
    _frozen(E, F)

    def build(x, u, m):
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        return np.broadcast_to(np.array([m.dv_bd, m.dv_bq]), shape + (2,)).copy()

    return FaultSignature(FaultKind.BUSBAR, E, F, build)


def actuator_omega_signature(params: GfmParameters) -> FaultSignature:
    E = np.zeros((N_STATES, 7))
    E[X.ALPHA, 0] = 1.0
    for j, row in enumerate((X.I_LD, X.I_LQ, X.V_OD, X.V_OQ, X.I_OD, X.I_OQ)):
        E[row, j + 1] = 1.0 if j % 2 == 0 else -1.0
    F = np.zeros((N_OUTPUTS, 7))
    F[Y.OMEGA, 0] = 1.0
    _frozen(E, F)
    slots = (X.I_LQ, X.I_LD, X.V_OQ, X.V_OD, X.I_OQ, X.I_OD)

    def build(x, u, m):
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        out = np.empty(shape + (7,))
        out[..., 0] = m.d_omega_n
        for j, s in enumerate(slots):
            out[..., j + 1] = m.d_omega_n * x[..., s]
        return out

    return FaultSignature(FaultKind.ACTUATOR_OMEGA, E, F, build)


def actuator_vn_signature(params: GfmParameters) -> FaultSignature:
    p = params
    E = np.zeros((N_STATES, 1))
    E[X.PHI_D, 0] = 1.0
    E[X.GAMMA_D, 0] = p.k_pv
    E[X.I_LD, 0] = p.k_pc * p.k_pv / p.l_f
    F = np.zeros((N_OUTPUTS, 1))
    F[Y.V_OD_REF, 0] = 1.0
    F[Y.I_LD_REF, 0] = p.k_pv
    F[Y.V_ID_REF, 0] = p.k_pc * p.k_pv
    _frozen(E, F)

    def build(x, u, m):
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        return np.full(shape + (1,), m.d_v_n)

    return FaultSignature(FaultKind.ACTUATOR_VN, E, F, build)


def bridge_vectors(params: GfmParameters):
    """The four coefficient vectors (xi_vid, tau_vid, xi_viq, tau_viq)."""
    p = params
    kpc, kpv, kiv, kic = p.k_pc, p.k_pv, p.k_iv, p.k_ic
    wb, lf, cf, ff, nq = p.omega_b, p.l_f, p.c_f, p.f_feedforward, p.n_q
    tau_vid = np.array([
        kpc * kpv * nq, -kpc * kiv, -kic, kpc, wb * lf,
        kpc * kpv, kpc * wb * cf, -kpc * ff, -kpc * kpv,
    ])
    xi_vid = np.array([
        kpc * kpv * nq / lf, -kpc * kiv / lf, -kic / lf, kpc / lf, wb,
        kpc * kpv / lf, kpc * wb * cf / lf, -kpc * ff / lf, -kpc * kpv / lf,
    ])
    tau_viq = np.array([-kpc * kiv, -kic, -wb * lf, kpc, -kpc * wb * cf, kpc * kpv, -kpc * ff])
    xi_viq = np.array([
        -kpc * kiv / lf, -kic / lf, -wb, kpc / lf,
        -kpc * wb * cf / lf, kpc * kpv / lf, -kpc * ff / lf,
    ])
    return xi_vid, tau_vid, xi_viq, tau_viq


_VID_SLOTS = (X.Q, X.PHI_D, X.GAMMA_D, X.I_LD, X.I_LQ, X.V_OD, X.V_OQ, X.I_OD)
_VIQ_SLOTS = (X.PHI_Q, X.GAMMA_Q, X.I_LD, X.I_LQ, X.V_OD, X.V_OQ, X.I_OQ)


def bridge_signature(params: GfmParameters) -> FaultSignature:
    """Efficiency loss of the bridge: ``v_i = (1 - d_eta) v_i*`` on both axes.

    The sixth and seventh measurements are read at the bridge terminals, so
    ``F_f`` carries the same loss on those slots.
    """
    xi_vid, tau_vid, xi_viq, tau_viq = bridge_vectors(params)
    E = np.zeros((N_STATES, 16))
    E[X.I_LD, :9] = xi_vid
    E[X.I_LQ, 9:] = xi_viq
    F = np.zeros((N_OUTPUTS, 16))
    F[Y.V_ID_REF, :9] = tau_vid
    F[Y.V_IQ_REF, 9:] = tau_viq
    _frozen(E, F)

    def build(x, u, m):
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        out = np.empty(shape + (16,))
        for j, s in enumerate(_VID_SLOTS):
            out[..., j] = m.d_eta_vid * x[..., s]
        out[..., 8] = m.d_eta_vid * u[..., U.V_N]
        for j, s in enumerate(_VIQ_SLOTS):
            out[..., 9 + j] = m.d_eta_viq * x[..., s]
        return out

    return FaultSignature(FaultKind.BRIDGE, E, F, build)


_BUILDERS = {
    FaultKind.BUSBAR: busbar_signature,
    FaultKind.ACTUATOR_OMEGA: actuator_omega_signature,
    FaultKind.ACTUATOR_VN: actuator_vn_signature,
    FaultKind.BRIDGE: bridge_signature,
}


def fault_signature(kind: "FaultKind | str", params: GfmParameters) -> FaultSignature:
    return _BUILDERS[FaultKind(kind)](params)

