"""Joint Levenberg-Marquardt bundle adjustment over keyframe poses and
point/line landmarks.

The normal equations are solved with a Schur complement on the landmarks
(their Hessian is block diagonal: 3x3 per point, 6x6 per line), so the dense
solve is only over the free pose variables.  Gauge freedom is removed by
fixing the poses listed in `fixed`.  Accepted steps never increase the
robustified cost; the whole history is recorded for the monotonicity checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .estimation import huber_weights, line_batch, point_batch
from .geometry import PoseSE3, StereoCamera, renormalize_rotation, se3_exp


@dataclass
class BAParams:
    max_iters: int = 15
    lambda0: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    step_tol: float = 1e-8
    cost_tol: float = 1e-9
    huber_delta: float = 2.0
    edge_margin: float = 20.0


@dataclass
class BAProblem:
    """Poses are world-from-camera; observations reference them by index."""

    cam: StereoCamera
    poses: list                       # list[PoseSE3]
    fixed: set                        # gauge pose indices
    points: np.ndarray                # (P, 3)
    lines: np.ndarray                 # (L, 2, 3) start/end world endpoints
    point_obs: list = field(default_factory=list)  # (kf, pt_idx, u, v)
    line_obs: list = field(default_factory=list)   # (kf, ln_idx, det_s, det_e)


@dataclass
class BAResult:
    poses: list
    points: np.ndarray
    lines: np.ndarray
    cost_history: list
    iterations: int
    converged: bool
    initial_rms: float
    final_rms: float
    skipped: bool = False
    message: str = ""


def _group_obs(problem: BAProblem):
    """Per-keyframe observation arrays for vectorized assembly."""
    K = len(problem.poses)
    pt_by_kf = [[] for _ in range(K)]
    ln_by_kf = [[] for _ in range(K)]
    for kf, pi, u, v in problem.point_obs:
        pt_by_kf[kf].append((pi, u, v))
    for kf, li, s, e in problem.line_obs:
        ln_by_kf[kf].append((li, s, e))
    pts, lns = [], []
    for k in range(K):
        if pt_by_kf[k]:
            idx = np.array([p[0] for p in pt_by_kf[k]], dtype=np.int64)
            uv = np.array([[p[1], p[2]] for p in pt_by_kf[k]])
        else:
            idx, uv = np.zeros(0, dtype=np.int64), np.zeros((0, 2))
        pts.append((idx, uv))
        if ln_by_kf[k]:
            lidx = np.array([l[0] for l in ln_by_kf[k]], dtype=np.int64)
            dets = np.array([l[1] for l in ln_by_kf[k]])
            dete = np.array([l[2] for l in ln_by_kf[k]])
        else:
            lidx = np.zeros(0, dtype=np.int64)
            dets = dete = np.zeros((0, 2))
        lns.append((lidx, dets, dete))
    return pts, lns


class _Normal:
    """Accumulator for the Schur-structured normal equations."""

    def __init__(self, n_pose, P, L):
        self.Hpp = np.zeros((n_pose, n_pose))
        self.B = np.zeros((n_pose, 3 * P + 6 * L))
        self.g_pose = np.zeros(n_pose)
        self.Hpt = np.zeros((P, 3, 3))
        self.Hln = np.zeros((L, 6, 6))
        self.g_pt = np.zeros((P, 3))
        self.g_ln = np.zeros((L, 6))
        self.P, self.L = P, L
        self.n_pose = n_pose

    def add_point_obs(self, col, pidx, w, r, Jp, Jl):
        np.add.at(self.Hpt, pidx, w[:, None, None] * np.einsum("nki,nkj->nij", Jl, Jl))
        np.add.at(self.g_pt, pidx, w[:, None] * np.einsum("nki,nk->ni", Jl, r))
        if col is not None:
            self.Hpp[col:col + 6, col:col + 6] += np.einsum("nki,n,nkj->ij", Jp, w, Jp)
            self.g_pose[col:col + 6] += np.einsum("nki,n,nk->i", Jp, w, r)
            blocks = w[:, None, None] * np.einsum("nki,nkj->nij", Jp, Jl)  # (n, 6, 3)
            cols = 3 * pidx
            flat = ((col + np.arange(6))[None, :, None] * self.B.shape[1]
                    + cols[:, None, None] + np.arange(3)[None, None, :])
            np.add.at(self.B.reshape(-1), flat.ravel(), blocks.ravel())

    def add_line_obs(self, col, lidx, w_v, r_v, J_v, Jl_v, w_h, r_h, J_h, Jl_h):
        base = 3 * self.P
        blk_v = w_v[:, None, None] * np.einsum("nki,nkj->nij", Jl_v, Jl_v)
        blk_h = w_h[:, None, None] * np.einsum("nki,nkj->nij", Jl_h, Jl_h)
        np.add.at(self.Hln, lidx, blk_v + blk_h)
        gv = w_v[:, None] * np.einsum("nki,nk->ni", Jl_v, r_v)
        gh = (w_h * r_h)[:, None] * Jl_h[:, 0, :]
        np.add.at(self.g_ln, lidx, gv + gh)
        if col is not None:
            self.Hpp[col:col + 6, col:col + 6] += (
                np.einsum("nki,n,nkj->ij", J_v, w_v, J_v)
                + np.einsum("ni,n,nj->ij", J_h, w_h, J_h))
            self.g_pose[col:col + 6] += (np.einsum("nki,n,nk->i", J_v, w_v, r_v)
                                         + np.einsum("ni,n->i", J_h, w_h * r_h))
            Bv = w_v[:, None, None] * np.einsum("nki,nkj->nij", J_v, Jl_v)  # (n, 6, 6)
            Bh = w_h[:, None, None] * np.einsum("ni,nj->nij", J_h, Jl_h[:, 0, :])
            cols = base + 6 * lidx
            flat = ((col + np.arange(6))[None, :, None] * self.B.shape[1]
                    + cols[:, None, None] + np.arange(6)[None, None, :])
            np.add.at(self.B.reshape(-1), flat.ravel(), (Bv + Bh).ravel())


def solve_ba(problem: BAProblem, params: Optional[BAParams] = None) -> BAResult:
    params = params or BAParams()
    cam = problem.cam
    K = len(problem.poses)
    P = int(problem.points.shape[0])
    L = int(problem.lines.shape[0])
    free = [k for k in range(K) if k not in problem.fixed]
    pose_col = {k: 6 * i for i, k in enumerate(free)}
    n_pose = 6 * len(free)

    pt_group, ln_group = _group_obs(problem)
    h_gates = []
    for lidx, dets, dete in ln_group:
        if len(lidx):
            h_gates.append(cam.in_bounds(dets, margin=params.edge_margin)
                           & cam.in_bounds(dete, margin=params.edge_margin))
        else:
            h_gates.append(np.zeros(0, dtype=bool))

    def poses_cw(poses):
        return [(p.inverse().rotation, p.inverse().translation) for p in poses]

    def evaluate(cw, points, lines, want):
        cost = 0.0
        sq_sum, sq_cnt = 0.0, 0
        normal = _Normal(n_pose, P, L) if want else None
        for k in range(K):
            R, t = cw[k]
            col = pose_col.get(k)
            pidx, uv = pt_group[k]
            if len(pidx):
                r, Jp, Jl, valid = point_batch(R, t, points[pidx], uv, cam,
                                               want_lm_jac=want)
                norms = np.linalg.norm(r, axis=1)
                w, c = huber_weights(norms, params.huber_delta)
                cost += float(c[valid].sum())
                sq_sum += float((norms[valid] ** 2).sum())
                sq_cnt += int(valid.sum())
                if want:
                    normal.add_point_obs(col, pidx, w * valid, r, Jp, Jl)
            lidx, dets, dete = ln_group[k]
            if len(lidx):
                r_v, J_v, r_h, J_h, valid, Jl_v, Jl_h = line_batch(
                    R, t, lines[lidx, 0], lines[lidx, 1], dets, dete, cam,
                    want_lm_jac=want)
                norms_v = np.linalg.norm(r_v, axis=1)
                w_v, c_v = huber_weights(norms_v, params.huber_delta)
                cost += float(c_v[valid].sum())
                sq_sum += float((norms_v[valid] ** 2).sum())
                sq_cnt += int(valid.sum())
                gate = valid & h_gates[k]
                norms_h = np.abs(r_h)
                w_h, c_h = huber_weights(norms_h, params.huber_delta)
                cost += float(c_h[gate].sum())
                sq_sum += float((norms_h[gate] ** 2).sum())
                sq_cnt += int(gate.sum())
                if want:
                    normal.add_line_obs(col, lidx, w_v * valid, r_v, J_v, Jl_v,
                                        w_h * gate, r_h, J_h, Jl_h)
        rms = np.sqrt(sq_sum / sq_cnt) if sq_cnt else 0.0
        return cost, rms, normal

    def damped_inverses(normal, lam):
        """Marquardt-damped landmark blocks and their batched inverses."""
        inv_pt = inv_ln = None
        if P:
            blocks = normal.Hpt.copy()
            d = np.maximum(np.einsum("nii->ni", normal.Hpt), 1e-12)
            blocks[:, np.arange(3), np.arange(3)] += lam * d
            try:
                inv_pt = np.linalg.inv(blocks)
            except np.linalg.LinAlgError:
                return None, None
        if L:
            blocks = normal.Hln.copy()
            d = np.maximum(np.einsum("nii->ni", normal.Hln), 1e-12)
            blocks[:, np.arange(6), np.arange(6)] += lam * d
            try:
                inv_ln = np.linalg.inv(blocks)
            except np.linalg.LinAlgError:
                return None, None
        return inv_pt, inv_ln

    poses = list(problem.poses)
    points = problem.points.copy().reshape(P, 3)
    lines = problem.lines.copy().reshape(L, 2, 3)
    cw = poses_cw(poses)

    cost, rms0, normal = evaluate(cw, points, lines, want=True)
    history = [cost]
    lam = params.lambda0
    converged = False
    iters = 0
    final_rms = rms0

    for iters in range(1, params.max_iters + 1):
        inv_pt, inv_ln = damped_inverses(normal, lam)
        if (P and inv_pt is None) or (L and inv_ln is None):
            return BAResult(poses=poses, points=points, lines=lines,
                            cost_history=history, iterations=iters - 1,
                            converged=False, initial_rms=rms0, final_rms=final_rms,
                            skipped=True, message="singular landmark block")

        gl = np.concatenate([normal.g_pt.ravel(), normal.g_ln.ravel()])
        if n_pose:
            W = np.zeros_like(normal.B)
            if P:
                Bp = normal.B[:, :3 * P].reshape(n_pose, P, 3)
                W[:, :3 * P] = np.einsum("kpi,pij->kpj", Bp, inv_pt).reshape(n_pose, -1)
            if L:
                Bl = normal.B[:, 3 * P:].reshape(n_pose, L, 6)
                W[:, 3 * P:] = np.einsum("kli,lij->klj", Bl, inv_ln).reshape(n_pose, -1)
            Hpp_d = normal.Hpp + lam * np.diag(np.maximum(np.diag(normal.Hpp), 1e-12))
            S = Hpp_d - W @ normal.B.T
            rhs = -normal.g_pose + W @ gl
            try:
                dp = np.linalg.solve(S, rhs)
            except np.linalg.LinAlgError:
                if iters == 1:
                    return BAResult(poses=poses, points=points, lines=lines,
                                    cost_history=history, iterations=0,
                                    converged=False, initial_rms=rms0,
                                    final_rms=final_rms, skipped=True,
                                    message="singular reduced system")
                lam *= params.lambda_up
                continue
            resid = gl + normal.B.T @ dp
        else:
            dp = np.zeros(0)
            resid = gl
        dl = np.zeros(3 * P + 6 * L)
        if P:
            dl[:3 * P] = -np.einsum("pij,pj->pi", inv_pt,
                                    resid[:3 * P].reshape(P, 3)).ravel()
        if L:
            dl[3 * P:] = -np.einsum("lij,lj->li", inv_ln,
                                    resid[3 * P:].reshape(L, 6)).ravel()

        step_norm = np.sqrt(float(dp @ dp) + float(dl @ dl))
        if step_norm < params.step_tol:
            converged = True
            break

        new_poses = list(poses)
        new_cw = list(cw)
        for k in free:
            c = pose_col[k]
            step = se3_exp(dp[c:c + 6])
            R_new = renormalize_rotation(step.rotation @ cw[k][0])
            t_new = step.rotation @ cw[k][1] + step.translation
            new_cw[k] = (R_new, t_new)
            new_poses[k] = PoseSE3(R_new, t_new).inverse()
        new_points = points + dl[:3 * P].reshape(P, 3) if P else points
        new_lines = lines + dl[3 * P:].reshape(L, 2, 3) if L else lines

        new_cost, new_rms, normal_new = evaluate(new_cw, new_points, new_lines, want=True)
        if new_cost < cost:
            rel = (cost - new_cost) / max(cost, 1e-300)
            poses, points, lines, cw = new_poses, new_points, new_lines, new_cw
            cost, normal = new_cost, normal_new
            final_rms = new_rms
            history.append(cost)
            lam = max(lam * params.lambda_down, 1e-12)
            if rel < params.cost_tol:
                converged = True
                break
        else:
            lam *= params.lambda_up

    return BAResult(poses=poses, points=points, lines=lines, cost_history=history,
                    iterations=iters, converged=converged, initial_rms=rms0,
                    final_rms=final_rms)
