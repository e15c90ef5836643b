"""One semi-implicit substep of the articulated rigid-body system.

Forces: gravity, joint anchor spring-dampers, PD joint torques decomposed
on the joint axes, corner penalty contact with a Coulomb cap on the
tangential force, and an optional upright-restoring torque on the root.
Velocities update first, then positions with the new velocities; rotations
integrate through the exponential map and are renormalized.

step_vjp is the hand-written reverse pass of step: it recomputes the
forward intermediates and pushes cotangents through every force term,
including the PD error's log-map and the friction cap, with max/where
branches frozen at their forward values.
"""

import numpy as np

from ..transforms import (
    orthonormalize,
    orthonormalize_vjp,
    rodrigues,
    rodrigues_vjp,
    so3_log,
    so3_log_vjp,
)
from .model import SimConfig, SimModel, SimState

_UP = np.array([0.0, 1.0, 0.0])
_TINY = 1e-12


def _force_pass(rot, pos, vel, omg, targets, model, cfg, upright_local):
    """Accumulate forces and torques; returns (force, tau, cache)."""
    b_count = rot.shape[0]
    force = np.zeros((b_count, 3))
    tau = np.zeros((b_count, 3))
    cache = {}

    # gravity
    force[:, 1] -= model.masses * cfg.gravity

    # joint anchor spring-dampers
    if model.joint_count:
        p = model.joint_parent
        c = model.joint_child
        rp = rot[p]
        rc = rot[c]
        ra_p = np.einsum("jik,jk->ji", rp, model.anchor_parent)
        ra_c = np.einsum("jik,jk->ji", rc, model.anchor_child)
        delta = (pos[p] + ra_p) - (pos[c] + ra_c)
        va = vel[p] + np.cross(omg[p], ra_p)
        vc = vel[c] + np.cross(omg[c], ra_c)
        dvel = va - vc
        fj = cfg.joint_stiffness * delta + cfg.joint_damping * dvel
        np.add.at(force, c, fj)
        np.add.at(force, p, -fj)
        np.add.at(tau, c, np.cross(ra_c, fj))
        np.add.at(tau, p, np.cross(ra_p, -fj))
        cache["spring"] = (rp, rc, ra_p, ra_c, fj)

        # PD torques about the joint axes
        if targets is not None and (cfg.pd_stiffness > 0 or cfg.pd_damping > 0):
            tgt = np.asarray(targets, dtype=np.float64)
            if tgt.shape != (model.joint_count, 3):
                raise ValueError(f"targets must be ({model.joint_count},3), got {tgt.shape}")
            pc_mat = np.einsum("jki,jkl->jil", rp, rc)           # Rp^T Rc
            rj = np.einsum("jil,jml->jim", pc_mat, model.rest_rot)
            u1 = model.axes[:, 0, :] * tgt[:, 0, None]
            u2 = model.axes[:, 1, :] * tgt[:, 1, None]
            u3 = model.axes[:, 2, :] * tgt[:, 2, None]
            r1 = rodrigues(u1)
            r2 = rodrigues(u2)
            r3 = rodrigues(u3)
            r32 = r3 @ r2
            rtgt = r32 @ r1
            rerr = np.einsum("jik,jlk->jil", rtgt, rj)           # rtgt @ rj^T
            evec = so3_log(rerr)
            ce = np.einsum("jik,jk->ji", model.axes_inv, evec)
            womega = omg[c] - omg[p]
            wrel = np.einsum("jki,jk->ji", rp, womega)
            cd = np.einsum("jik,jk->ji", model.axes_inv, wrel)
            gains = cfg.axis_gain_scale if cfg.axis_gain_scale is not None else 1.0
            mcoef = gains * (cfg.pd_stiffness * ce - cfg.pd_damping * cd)
            tau_loc = np.einsum("jl,jlk->jk", mcoef, model.axes)
            tau_w = np.einsum("jik,jk->ji", rp, tau_loc)
            np.add.at(tau, c, tau_w)
            np.add.at(tau, p, -tau_w)
            cache["pd"] = (tgt, pc_mat, rj, u1, u2, u3, r1, r2, r3, r32,
                           rtgt, rerr, womega, gains, tau_loc)

    # corner penalty contact
    if cfg.ground:
        arm = np.einsum("bik,bck->bci", rot, model.corners)      # (B,8,3)
        cw_y = pos[:, None, 1] + arm[..., 1]
        u = vel[:, None, :] + np.cross(omg[:, None, :], arm)
        pen = np.maximum(-cw_y, 0.0)
        active = pen > 0.0
        raw = cfg.contact_stiffness * pen - cfg.contact_damping * u[..., 1]
        fn = np.where(active, np.maximum(raw, 0.0), 0.0)
        ft_raw = np.zeros_like(u)
        ft_raw[..., 0] = -cfg.friction_damping * u[..., 0]
        ft_raw[..., 2] = -cfg.friction_damping * u[..., 2]
        ft_raw *= active[..., None]
        ftn = np.linalg.norm(ft_raw, axis=-1)
        cap = cfg.friction_mu * fn
        clamped = ftn > cap
        scale = np.where(clamped, cap / np.maximum(ftn, _TINY), 1.0)
        f_pts = ft_raw * scale[..., None]
        f_pts[..., 1] += fn
        force += f_pts.sum(axis=1)
        tau += np.cross(arm, f_pts).sum(axis=1)
        cache["contact"] = (arm, u, active, raw, fn, ft_raw, ftn, cap, clamped, scale, f_pts)

    # upright restoring torque on the root
    if upright_local is not None and cfg.upright_gain > 0:
        u_cur = rot[0] @ upright_local
        tau[0] += cfg.upright_gain * np.cross(u_cur, _UP)
        cache["upright"] = u_cur

    return force, tau, cache


def accumulate_forces(state: SimState, model: SimModel, config: SimConfig,
                      targets=None, upright_local=None):
    """Net force and torque on every bone for the current state."""
    force, tau, _ = _force_pass(
        state.rotations, state.positions, state.velocities, state.omegas,
        targets, model, config, upright_local,
    )
    return force, tau


def step(state: SimState, model: SimModel, config: SimConfig,
         targets=None, upright_local=None) -> SimState:
    """Advance the state by one substep."""
    rot, pos = state.rotations, state.positions
    vel, omg = state.velocities, state.omegas
    force, tau, _ = _force_pass(rot, pos, vel, omg, targets, model, config, upright_local)
    dt = config.dt

    v2 = vel + dt * force / model.masses[:, None]
    w_body = np.einsum("bji,bj->bi", rot, omg)
    l_world = np.einsum("bik,bk->bi", rot, model.inertia * w_body)
    gyro = np.cross(omg, l_world)
    s = tau - gyro
    y = np.einsum("bji,bj->bi", rot, s)
    wdot = np.einsum("bik,bk->bi", rot, y / model.inertia)
    w2 = omg + dt * wdot
    x2 = pos + dt * v2
    rot2 = orthonormalize(rodrigues(dt * w2) @ rot)
    return SimState(rot2, x2, v2, w2)


def step_vjp(state: SimState, model: SimModel, config: SimConfig, out_bars,
             targets=None, upright_local=None):
    """Reverse pass of step.

    out_bars: (rot2_bar, pos2_bar, vel2_bar, omg2_bar) cotangents of the
    produced state. Returns ((rot_bar, pos_bar, vel_bar, omg_bar),
    targets_bar) with targets_bar None when no PD targets were given.
    """
    rot, pos = state.rotations, state.positions
    vel, omg = state.velocities, state.omegas
    force, tau, cache = _force_pass(rot, pos, vel, omg, targets, model, config, upright_local)
    dt = config.dt
    masses = model.masses
    inertia = model.inertia

    # forward integration intermediates
    v2 = vel + dt * force / masses[:, None]
    w_body = np.einsum("bji,bj->bi", rot, omg)
    q = inertia * w_body
    l_world = np.einsum("bik,bk->bi", rot, q)
    gyro = np.cross(omg, l_world)
    s = tau - gyro
    y = np.einsum("bji,bj->bi", rot, s)
    z = y / inertia
    wdot = np.einsum("bik,bk->bi", rot, z)
    w2 = omg + dt * wdot
    rvec = dt * w2
    e_mat = rodrigues(rvec)
    rot_m = e_mat @ rot

    rot2_bar, pos2_bar, vel2_bar, omg2_bar = (
        np.asarray(b, dtype=np.float64) for b in out_bars
    )

    # rot2 = orthonormalize(e_mat @ rot)
    m_bar = orthonormalize_vjp(rot_m, rot2_bar)
    e_bar = np.einsum("bij,bkj->bik", m_bar, rot)        # m_bar @ rot^T
    rot_bar = np.einsum("bji,bjk->bik", e_mat, m_bar)    # e^T @ m_bar
    w2_bar = omg2_bar + dt * rodrigues_vjp(rvec, e_bar)

    # x2 = pos + dt v2
    pos_bar = pos2_bar.copy()
    v2_bar = vel2_bar + dt * pos2_bar

    # w2 = omg + dt wdot
    omg_bar = w2_bar.copy()
    wdot_bar = dt * w2_bar

    # wdot = R (R^T s / I)
    z_bar = np.einsum("bji,bj->bi", rot, wdot_bar)
    rot_bar += np.einsum("bi,bk->bik", wdot_bar, z)
    y_bar = z_bar / inertia
    s_bar = np.einsum("bik,bk->bi", rot, y_bar)
    rot_bar += np.einsum("bj,bi->bji", s, y_bar)

    # s = tau - omg x l_world
    tau_bar = s_bar.copy()
    gyro_bar = -s_bar
    omg_bar += np.cross(l_world, gyro_bar)
    l_bar = np.cross(gyro_bar, omg)

    # l_world = R (I (R^T omg))
    q_bar = np.einsum("bji,bj->bi", rot, l_bar)
    rot_bar += np.einsum("bi,bk->bik", l_bar, q)
    w_body_bar = inertia * q_bar
    omg_bar += np.einsum("bik,bk->bi", rot, w_body_bar)
    rot_bar += np.einsum("bj,bi->bji", omg, w_body_bar)

    # v2 = vel + dt force / m
    vel_bar = v2_bar.copy()
    force_bar = dt * v2_bar / masses[:, None]

    targets_bar = None

    # upright torque
    if "upright" in cache:
        u_cur = cache["upright"]
        u_cur_bar = config.upright_gain * np.cross(_UP, tau_bar[0])
        rot_bar[0] += np.outer(u_cur_bar, upright_local)

    # contact
    if "contact" in cache:
        arm, u, active, raw, fn, ft_raw, ftn, cap, clamped, scale, f_pts = cache["contact"]
        f_pts_bar = np.broadcast_to(force_bar[:, None, :], f_pts.shape).copy()
        arm_bar = np.cross(f_pts, tau_bar[:, None, :])
        f_pts_bar += np.cross(tau_bar[:, None, :], arm)
        fn_bar = f_pts_bar[..., 1].copy()
        scale_bar = np.einsum("bck,bck->bc", f_pts_bar, ft_raw)
        ft_raw_bar = f_pts_bar * scale[..., None]
        cap_bar = np.where(clamped, scale_bar / np.maximum(ftn, _TINY), 0.0)
        ftn_bar = np.where(
            clamped, -scale_bar * cap / np.maximum(ftn, _TINY) ** 2, 0.0
        )
        fn_bar += config.friction_mu * cap_bar
        safe = np.maximum(ftn, _TINY)[..., None]
        ft_raw_bar += ftn_bar[..., None] * ft_raw / safe
        u_bar = np.zeros_like(u)
        act = active.astype(np.float64)
        u_bar[..., 0] = -config.friction_damping * ft_raw_bar[..., 0] * act
        u_bar[..., 2] = -config.friction_damping * ft_raw_bar[..., 2] * act
        raw_bar = np.where(active & (raw > 0.0), fn_bar, 0.0)
        pen_bar = config.contact_stiffness * raw_bar
        u_bar[..., 1] -= config.contact_damping * raw_bar
        cw_y_bar = np.where(active, -pen_bar, 0.0)
        vel_bar += u_bar.sum(axis=1)
        omg_bar += np.cross(arm, u_bar).sum(axis=1)
        arm_bar += np.cross(u_bar, omg[:, None, :])
        pos_bar[:, 1] += cw_y_bar.sum(axis=1)
        arm_bar[..., 1] += cw_y_bar
        rot_bar += np.einsum("bci,bck->bik", arm_bar, model.corners)

    if model.joint_count:
        p = model.joint_parent
        c = model.joint_child
        rp = rot[p]
        rc = rot[c]

        # PD torques
        if "pd" in cache:
            (tgt, pc_mat, rj, u1, u2, u3, r1, r2, r3, r32,
             rtgt, rerr, womega, gains, tau_loc) = cache["pd"]
            tau_w_bar = tau_bar[c] - tau_bar[p]
            tau_loc_bar = np.einsum("jki,jk->ji", rp, tau_w_bar)
            rp_bar = np.einsum("ji,jk->jik", tau_w_bar, tau_loc)
            mcoef_bar = np.einsum("jk,jlk->jl", tau_loc_bar, model.axes)
            ce_bar = gains * config.pd_stiffness * mcoef_bar
            cd_bar = -gains * config.pd_damping * mcoef_bar
            wrel_bar = np.einsum("jki,jk->ji", model.axes_inv, cd_bar)
            womega_bar = np.einsum("jik,jk->ji", rp, wrel_bar)
            rp_bar += np.einsum("ja,jb->jab", womega, wrel_bar)
            np.add.at(omg_bar, c, womega_bar)
            np.add.at(omg_bar, p, -womega_bar)
            evec_bar = np.einsum("jki,jk->ji", model.axes_inv, ce_bar)
            rerr_bar = so3_log_vjp(rerr, evec_bar)
            # rerr = rtgt @ rj^T
            rtgt_bar = np.einsum("jik,jkl->jil", rerr_bar, rj)
            rj_bar = np.einsum("jki,jkl->jil", rerr_bar, rtgt)
            # rtgt = r32 @ r1, r32 = r3 @ r2
            r32_bar = np.einsum("jik,jlk->jil", rtgt_bar, r1)
            r1_bar = np.einsum("jki,jkl->jil", r32, rtgt_bar)
            r3_bar = np.einsum("jik,jlk->jil", r32_bar, r2)
            r2_bar = np.einsum("jki,jkl->jil", r3, r32_bar)
            targets_bar = np.empty_like(tgt)
            targets_bar[:, 0] = np.einsum(
                "jk,jk->j", rodrigues_vjp(u1, r1_bar), model.axes[:, 0, :]
            )
            targets_bar[:, 1] = np.einsum(
                "jk,jk->j", rodrigues_vjp(u2, r2_bar), model.axes[:, 1, :]
            )
            targets_bar[:, 2] = np.einsum(
                "jk,jk->j", rodrigues_vjp(u3, r3_bar), model.axes[:, 2, :]
            )
            # rj = pc_mat @ rest^T; pc_mat = rp^T rc
            pc_bar = np.einsum("jik,jkl->jil", rj_bar, model.rest_rot)
            rp_bar += np.einsum("jik,jlk->jil", rc, pc_bar)
            rc_bar = np.einsum("jik,jkl->jil", rp, pc_bar)
            np.add.at(rot_bar, p, rp_bar)
            np.add.at(rot_bar, c, rc_bar)

        # joint anchor spring-dampers
        rp_sp, rc_sp, ra_p, ra_c, fj = cache["spring"]
        fj_bar = force_bar[c] - force_bar[p]
        ra_c_bar = np.cross(fj, tau_bar[c])
        fj_bar += np.cross(tau_bar[c], ra_c)
        ra_p_bar = np.cross(-fj, tau_bar[p])
        fj_bar -= np.cross(tau_bar[p], ra_p)
        delta_bar = config.joint_stiffness * fj_bar
        dvel_bar = config.joint_damping * fj_bar
        np.add.at(pos_bar, p, delta_bar)
        np.add.at(pos_bar, c, -delta_bar)
        ra_p_bar += delta_bar
        ra_c_bar -= delta_bar
        np.add.at(vel_bar, p, dvel_bar)
        np.add.at(vel_bar, c, -dvel_bar)
        np.add.at(omg_bar, p, np.cross(ra_p, dvel_bar))
        np.add.at(omg_bar, c, -np.cross(ra_c, dvel_bar))
        ra_p_bar += np.cross(dvel_bar, omg[p])
        ra_c_bar -= np.cross(dvel_bar, omg[c])
        np.add.at(rot_bar, p, np.einsum("ji,jk->jik", ra_p_bar, model.anchor_parent))
        np.add.at(rot_bar, c, np.einsum("ji,jk->jik", ra_c_bar, model.anchor_child))

    return (rot_bar, pos_bar, vel_bar, omg_bar), targets_bar
