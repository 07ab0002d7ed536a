"""Independent oracles: hand-written governing equations of one inverter.

Written from the physical equations only (no package matrices), so they can
check the A/B/phi split and every fault matrix by substitution.
"""
import numpy as np


def direct_rhs(p, x, u, eta_d=1.0, eta_q=1.0):
    """State derivative and measurement vector of one inverter.

    ``eta_d``/``eta_q`` scale the applied bridge voltages (1 = healthy).
    """
    (al, P, Q, pd, pq, gd, gq, ild, ilq, vod, voq, iod, ioq) = x
    (wcom, wn, Vn, vbd, vbq) = u
    w = wn - p.m_p * P
    vodr = Vn - p.n_q * Q
    ildr = p.f_feedforward * iod - p.omega_b * p.c_f * voq + p.k_pv * (vodr - vod) + p.k_iv * pd
    ilqr = p.f_feedforward * ioq + p.omega_b * p.c_f * vod - p.k_pv * voq + p.k_iv * pq
    vidr = -p.omega_b * p.l_f * ilq + p.k_pc * (ildr - ild) + p.k_ic * gd
    viqr = p.omega_b * p.l_f * ild + p.k_pc * (ilqr - ilq) + p.k_ic * gq
    vid, viq = eta_d * vidr, eta_q * viqr
    dx = np.array([
        w - wcom,
        p.omega_c * (vod * iod + voq * ioq - P),
        p.omega_c * (voq * iod - vod * ioq - Q),
        vodr - vod,
        -voq,
        ildr - ild,
        ilqr - ilq,
        (-p.r_f * ild + w * p.l_f * ilq + vid - vod) / p.l_f,
        (-p.r_f * ilq - w * p.l_f * ild + viq - voq) / p.l_f,
        (w * p.c_f * voq + ild - iod) / p.c_f,
        (-w * p.c_f * vod + ilq - ioq) / p.c_f,
        (-p.r_c * iod + w * p.l_c * ioq + vod - vbd) / p.l_c,
        (-p.r_c * ioq - w * p.l_c * iod + voq - vbq) / p.l_c,
    ])
    y = np.array([al, w, vodr, ildr, ilqr, vid, viq])
    return dx, y


def faulted_direct(p, kind, x, u, dv=(0.0, 0.0), d_omega=0.0, d_vn=0.0, d_eta=(0.0, 0.0)):
    """Direct RHS with the physical fault substituted into the equations."""
    u = np.array(u, float)
    if kind == "busbar":
        u[3] += dv[0]
        u[4] += dv[1]
        return direct_rhs(p, x, u)
    if kind == "actuator_omega":
        u[1] += d_omega
        return direct_rhs(p, x, u)
    if kind == "actuator_vn":
        u[2] += d_vn
        return direct_rhs(p, x, u)
    return direct_rhs(p, x, u, 1.0 - d_eta[0], 1.0 - d_eta[1])


def random_point(rng, p, scale=1.0):
    """A state/input pair of realistic magnitude."""
    i = p.rated_current
    x = np.array([
        rng.uniform(-0.5, 0.5), rng.uniform(0, 1e3 * p.power_rating_kva),
        rng.uniform(-2e4, 2e4), rng.uniform(-1, 1), rng.uniform(-1, 1),
        rng.uniform(-1, 1), rng.uniform(-1, 1),
        rng.uniform(-2 * i, 2 * i), rng.uniform(-2 * i, 2 * i),
        rng.uniform(300, 400), rng.uniform(-50, 50),
        rng.uniform(-2 * i, 2 * i), rng.uniform(-2 * i, 2 * i),
    ]) * scale
    u = np.array([rng.uniform(310, 318), rng.uniform(310, 318), rng.uniform(350, 400),
                  rng.uniform(300, 400), rng.uniform(-50, 50)]) * scale
    return x, u


def rl_step_response(R, L, omega, v, t):
    """Current of an RL branch in a frame rotating at ``omega``, from rest.

    ``L di/dt = v - R i - omega L J i`` with constant dq voltage ``v``.
    """
    M = np.array([[-R / L, omega], [-omega, -R / L]])
    from scipy.linalg import expm
    i_ss = -np.linalg.solve(M, np.asarray(v, float) / L)
    return i_ss - expm(M * t) @ i_ss
