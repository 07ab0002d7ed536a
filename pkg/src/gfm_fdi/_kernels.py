"""Compiled inner loops of the microgrid simulator.

The global state vector is laid out as

    z = [x_1 .. x_G | i_line_1 .. i_line_NL | xhat_1 .. xhat_G]

with 13 states per inverter, a (d, q) current pair per line and one observer
copy per inverter.  Plant, network and observers are advanced together by
one classical RK4 step so that an observer started on the plant state
reproduces it exactly when there is no noise and no fault.
"""
from __future__ import annotations

import numpy as np
from numba import njit

NX = 13
NU = 5
NY = 7

BUSBAR = 0
ACT_OMEGA = 1
ACT_VN = 2
BRIDGE = 3

# state slots (mirrors model.X)
_P, _Q = 1, 2
_PHI_D, _PHI_Q, _GAM_D, _GAM_Q = 3, 4, 5, 6
_ILD, _ILQ, _VOD, _VOQ, _IOD, _IOQ = 7, 8, 9, 10, 11, 12


@njit(cache=True)
def _phi(x, omega_n, m_p, w_c, out):
    omega = omega_n - m_p * x[_P]
    for k in range(NX):
        out[k] = 0.0
    out[_P] = w_c * (x[_VOD] * x[_IOD] + x[_VOQ] * x[_IOQ])
    out[_Q] = w_c * (x[_VOQ] * x[_IOD] - x[_VOD] * x[_IOQ])
    out[_ILD] = omega * x[_ILQ]
    out[_ILQ] = -omega * x[_ILD]
    out[_VOD] = omega * x[_VOQ]
    out[_VOQ] = -omega * x[_VOD]
    out[_IOD] = omega * x[_IOQ]
    out[_IOQ] = -omega * x[_IOD]


@njit(cache=True)
def _affine(M, v, out, add):
    n, m = M.shape
    for i in range(n):
        s = 0.0
        for j in range(m):
            s += M[i, j] * v[j]
        out[i] = out[i] + s if add else s


@njit(cache=True)
def derivatives(z, sys, net, obs, drive, dz, resid, w_eff, vbus):
    """Right-hand side of the coupled system.

    ``sys``   : (A, B, C, D, m_p, w_c, l_f, wn_cmd, vn_cmd, ref)
    ``net``   : (gfm_bus, line_from, line_to, line_r, line_l, load_r, load_l, r_virtual)
    ``obs``   : (has_obs, L, vb_nominal)
    ``drive`` : (g_fault, d_wn, d_vn, d_eta, w, v_noise)

    Fills ``dz``, the residual of every observer, the effective disturbance
    ``(u + w) - u_obs`` seen by each observer and the bus voltages.
    """
    A, B, C, D, m_p, w_c, l_f, wn_cmd, vn_cmd, ref = sys
    gfm_bus, line_from, line_to, line_r, line_l, load_r, load_l, r_virtual = net
    has_obs, L, vb_nom = obs
    g_fault, d_wn, d_vn, d_eta, w, v_noise = drive

    G = A.shape[0]
    NL = line_r.shape[0]
    NB = load_r.shape[0]
    off_line = NX * G
    off_obs = off_line + 2 * NL

    wn = np.empty(G)
    for g in range(G):
        wn[g] = wn_cmd[g] + d_wn[g]
    omega_com = wn[ref] - m_p[ref] * z[NX * ref + _P]

    # bus current injections in the common frame
    inj_d = np.zeros(NB)
    inj_q = np.zeros(NB)
    for g in range(G):
        base = NX * g
        ca = np.cos(z[base])
        sa = np.sin(z[base])
        iod = z[base + _IOD]
        ioq = z[base + _IOQ]
        b = gfm_bus[g]
        inj_d[b] += ca * iod - sa * ioq
        inj_q[b] += sa * iod + ca * ioq
    for k in range(NL):
        idl = z[off_line + 2 * k]
        iql = z[off_line + 2 * k + 1]
        inj_d[line_from[k]] -= idl
        inj_q[line_from[k]] -= iql
        inj_d[line_to[k]] += idl
        inj_q[line_to[k]] += iql
    for b in range(NB):
        # load admittance 1 / (R + j w L) plus shunts
        xr = omega_com * load_l[b]
        den = load_r[b] * load_r[b] + xr * xr
        yr = load_r[b] / den + 1.0 / r_virtual + g_fault[b]
        yi = -xr / den
        mag = yr * yr + yi * yi
        vbus[b, 0] = (inj_d[b] * yr + inj_q[b] * yi) / mag
        vbus[b, 1] = (inj_q[b] * yr - inj_d[b] * yi) / mag

    for k in range(NL):
        i = off_line + 2 * k
        f = line_from[k]
        t = line_to[k]
        ll = line_l[k]
        dz[i] = (vbus[f, 0] - vbus[t, 0] - line_r[k] * z[i] + omega_com * ll * z[i + 1]) / ll
        dz[i + 1] = (vbus[f, 1] - vbus[t, 1] - line_r[k] * z[i + 1] - omega_com * ll * z[i]) / ll

    u = np.empty(NU)
    uw = np.empty(NU)
    u_obs = np.empty(NU)
    ph = np.empty(NX)
    y = np.empty(NY)
    yh = np.empty(NY)
    for g in range(G):
        base = NX * g
        x = z[base:base + NX]
        b = gfm_bus[g]
        ca = np.cos(x[0])
        sa = np.sin(x[0])
        u[0] = omega_com
        u[1] = wn[g]
        u[2] = vn_cmd[g] + d_vn[g]
        u[3] = ca * vbus[b, 0] + sa * vbus[b, 1]
        u[4] = -sa * vbus[b, 0] + ca * vbus[b, 1]
        for j in range(NU):
            uw[j] = u[j] + w[g, j]

        dx = dz[base:base + NX]
        _affine(A[g], x, dx, False)
        _affine(B[g], uw, dx, True)
        _phi(x, u[1], m_p[g], w_c[g], ph)
        for j in range(NX):
            dx[j] += ph[j]

        # measurements: bridge terminals carry the realised voltage
        _affine(C[g], x, y, False)
        _affine(D[g], uw, y, True)
        vid = 0.0
        viq = 0.0
        for j in range(NX):
            vid += C[g, 5, j] * x[j]
            viq += C[g, 6, j] * x[j]
        for j in range(NU):
            vid += D[g, 5, j] * u[j]
            viq += D[g, 6, j] * u[j]
        dx[_ILD] -= d_eta[g, 0] * vid / l_f[g]
        dx[_ILQ] -= d_eta[g, 1] * viq / l_f[g]
        y[5] -= d_eta[g, 0] * vid
        y[6] -= d_eta[g, 1] * viq
        for j in range(NY):
            y[j] += v_noise[g, j]

        obase = off_obs + NX * g
        dxh = dz[obase:obase + NX]
        if not has_obs[g]:
            for j in range(NX):
                dxh[j] = 0.0
            for j in range(NY):
                resid[g, j] = 0.0
            for j in range(NU):
                w_eff[g, j] = 0.0
            continue
        xh = z[obase:obase + NX]
        u_obs[0] = omega_com
        u_obs[1] = wn_cmd[g]
        u_obs[2] = vn_cmd[g]
        u_obs[3] = vb_nom[g, 0]
        u_obs[4] = vb_nom[g, 1]
        for j in range(NU):
            w_eff[g, j] = uw[j] - u_obs[j]
        _affine(C[g], xh, yh, False)
        _affine(D[g], u_obs, yh, True)
        for j in range(NY):
            resid[g, j] = y[j] - yh[j]
        _affine(A[g], xh, dxh, False)
        _affine(B[g], u_obs, dxh, True)
        _affine(L[g], resid[g], dxh, True)
        _phi(xh, u_obs[1], m_p[g], w_c[g], ph)
        for j in range(NX):
            dxh[j] += ph[j]


@njit(cache=True)
def fault_norm2(kind, x, vb_local, vb_nom, mags):
    """Squared norm of the fault vector of one active fault.

    ``mags`` = (resistance, d_omega_n, d_v_n, d_eta_vid, d_eta_viq, v_n).
    For the busbar fault the vector is the PCC voltage shift it causes.
    """
    if kind == BUSBAR:
        a = vb_local[0] - vb_nom[0]
        b = vb_local[1] - vb_nom[1]
        return a * a + b * b
    if kind == ACT_OMEGA:
        s = 1.0
        for j in (_ILQ, _ILD, _VOQ, _VOD, _IOQ, _IOD):
            s += x[j] * x[j]
        return mags[1] * mags[1] * s
    if kind == ACT_VN:
        return mags[2] * mags[2]
    sd = mags[5] * mags[5]
    for j in (_Q, _PHI_D, _GAM_D, _ILD, _ILQ, _VOD, _VOQ, _IOD):
        sd += x[j] * x[j]
    sq = 0.0
    for j in (_PHI_Q, _GAM_Q, _ILD, _ILQ, _VOD, _VOQ, _IOQ):
        sq += x[j] * x[j]
    return mags[3] * mags[3] * sd + mags[4] * mags[4] * sq


@njit(cache=True)
def run_steps(z, k0, n_steps, dt, sys, net, obs, events, w_all, v_all,
              record_every, J_out, w2_out, f2_out, z_rec, r_rec, vb_rec):
    """Advance ``z`` in place by ``n_steps`` RK4 steps starting at step ``k0``.

    Every ``record_every``-th step (counted within this call) the state,
    residuals and bus voltages at the start of the step are stored.

    ``events`` rows: (kind, gfm, bus, t_on, t_off, resistance, d_wn, d_vn,
    d_eta_d, d_eta_q, v_n).  Faults are sampled at the start of each step.
    Returns the index of the first non-finite step or -1.
    """
    A = sys[0]
    G = A.shape[0]
    NB = net[5].shape[0]
    n = z.shape[0]
    vb_nom = obs[2]

    g_fault = np.zeros(NB)
    d_wn = np.zeros(G)
    d_vn = np.zeros(G)
    d_eta = np.zeros((G, 2))
    resid = np.zeros((G, NY))
    w_eff = np.zeros((G, NU))
    vbus = np.zeros((NB, 2))
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    zt = np.empty(n)
    r_tmp = np.zeros((G, NY))
    w_tmp = np.zeros((G, NU))
    vb_tmp = np.zeros((NB, 2))
    own = np.zeros(G, dtype=np.int64)
    mags = np.zeros(6)

    for s in range(n_steps):
        k = k0 + s
        t = k * dt
        g_fault[:] = 0.0
        d_wn[:] = 0.0
        d_vn[:] = 0.0
        d_eta[:, :] = 0.0
        own[:] = -1
        for e in range(events.shape[0]):
            if events[e, 3] <= t < events[e, 4]:
                kind = int(events[e, 0])
                g = int(events[e, 1])
                own[g] = e
                if kind == BUSBAR:
                    g_fault[int(events[e, 2])] += 1.0 / events[e, 5]
                elif kind == ACT_OMEGA:
                    d_wn[g] += events[e, 6]
                elif kind == ACT_VN:
                    d_vn[g] += events[e, 7]
                else:
                    d_eta[g, 0] += events[e, 8]
                    d_eta[g, 1] += events[e, 9]
        w = w_all[s]
        vn = v_all[s]
        drive = (g_fault, d_wn, d_vn, d_eta, w, vn)

        derivatives(z, sys, net, obs, drive, k1, resid, w_eff, vbus)
        for g in range(G):
            acc = 0.0
            for j in range(NY):
                acc += resid[g, j] * resid[g, j]
            J_out[s, g] = np.sqrt(acc)
            acc = 0.0
            for j in range(NU):
                acc += w_eff[g, j] * w_eff[g, j]
            w2_out[s, g] = acc
            f2 = 0.0
            e = own[g]
            if e >= 0:
                base = NX * g
                b = int(events[e, 2])
                ca = np.cos(z[base])
                sa = np.sin(z[base])
                vl = np.empty(2)
                vl[0] = ca * vbus[b, 0] + sa * vbus[b, 1]
                vl[1] = -sa * vbus[b, 0] + ca * vbus[b, 1]
                for j in range(6):
                    mags[j] = events[e, 5 + j]
                f2 = fault_norm2(int(events[e, 0]), z[base:base + NX], vl, vb_nom[g], mags)
            f2_out[s, g] = f2
        if s % record_every == 0:
            row = s // record_every
            z_rec[row, :] = z
            r_rec[row, :, :] = resid
            vb_rec[row, :, :] = vbus

        for i in range(n):
            zt[i] = z[i] + 0.5 * dt * k1[i]
        derivatives(zt, sys, net, obs, drive, k2, r_tmp, w_tmp, vb_tmp)
        for i in range(n):
            zt[i] = z[i] + 0.5 * dt * k2[i]
        derivatives(zt, sys, net, obs, drive, k3, r_tmp, w_tmp, vb_tmp)
        for i in range(n):
            zt[i] = z[i] + dt * k3[i]
        derivatives(zt, sys, net, obs, drive, k4, r_tmp, w_tmp, vb_tmp)
        bad = False
        for i in range(n):
            z[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            if not np.isfinite(z[i]):
                bad = True
        if bad:
            return k
    return -1
