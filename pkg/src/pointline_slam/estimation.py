"""Frame-to-frame pose estimation: nonlinear least squares over point
reprojection residuals and line vertical/horizontal residuals.

The optimization variable is the camera-from-world transform, updated by
left multiplication with exp(delta).  Point residuals are measured in pixels;
line residuals are measured on the normalized plane and multiplied by fx so
every block shares one noise scale.  All Jacobians are exact analytic
derivatives (including the dependence of the projected line direction and its
normalization on the pose), verified against central finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import PoseSE3, StereoCamera, renormalize_rotation, se3_exp

MIN_DEPTH = 1e-6


class TrackingLost(RuntimeError):
    """Raised when the pose problem is under-constrained or degenerate."""


@dataclass
class LMParams:
    lambda0: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    max_iters: int = 30
    step_tol: float = 1e-8
    cost_tol: float = 1e-9
    huber_delta: float = 2.0     # pixels, gates each block's raw residual norm
    edge_margin: float = 20.0    # pixels, horizontal-residual visibility gate
    min_blocks: int = 3


@dataclass(frozen=True)
class NormalizedLine:
    """Projected line on the z=1 plane: start (x1, y1) and direction (l, m)."""

    x1: float
    y1: float
    l: float
    m: float


@dataclass
class ResidualBlock:
    kind: str                    # "point" | "line_vertical" | "line_horizontal"
    index: int                   # position in the input arrays
    residual: np.ndarray
    weight: float                # robust (Huber) weight at the solution
    information: float = 1.0


@dataclass
class PoseEstimate:
    pose: PoseSE3                # world-from-camera
    cost: float
    iterations: int
    converged: bool
    blocks: list = field(default_factory=list)
    cost_history: list = field(default_factory=list)   # accepted-step costs
    n_point: int = 0
    n_line_vertical: int = 0
    n_line_horizontal: int = 0

    def inlier_ratio(self, residual_px: float = 3.0) -> float:
        if not self.blocks:
            return 0.0
        good = sum(1 for b in self.blocks if np.linalg.norm(b.residual) <= residual_px)
        return good / len(self.blocks)


# ------------------------------------------------------------------ batches

def _normalized_proj(X_c: np.ndarray):
    """Projection onto z=1 and its (n, 2, 3) Jacobian w.r.t. camera coords."""
    x, y, z = X_c[:, 0], X_c[:, 1], X_c[:, 2]
    p = np.stack([x / z, y / z], axis=1)
    J = np.zeros((X_c.shape[0], 2, 3))
    inv_z = 1.0 / z
    J[:, 0, 0] = inv_z
    J[:, 0, 2] = -x * inv_z ** 2
    J[:, 1, 1] = inv_z
    J[:, 1, 2] = -y * inv_z ** 2
    return p, J


def _pose_point_jacobian(X_c: np.ndarray) -> np.ndarray:
    """(n, 3, 6) derivative of exp(delta) @ X_c at delta = 0: [I | -skew(X_c)]."""
    n = X_c.shape[0]
    J = np.zeros((n, 3, 6))
    J[:, 0, 0] = J[:, 1, 1] = J[:, 2, 2] = 1.0
    J[:, 0, 4] = X_c[:, 2]
    J[:, 0, 5] = -X_c[:, 1]
    J[:, 1, 3] = -X_c[:, 2]
    J[:, 1, 5] = X_c[:, 0]
    J[:, 2, 3] = X_c[:, 1]
    J[:, 2, 4] = -X_c[:, 0]
    return J


def point_batch(R_cw, t_cw, X_w, obs_uv, cam: StereoCamera,
                want_lm_jac: bool = False):
    """Pixel residuals (obs - projection) with pose and optional landmark
    Jacobians for a stack of point observations."""
    X_c = X_w @ R_cw.T + t_cw
    valid = X_c[:, 2] > MIN_DEPTH
    Xs = np.where(valid[:, None], X_c, np.array([0.0, 0.0, 1.0]))
    pn, Jn = _normalized_proj(Xs)
    proj = np.stack([cam.fx * pn[:, 0] + cam.cx, cam.fy * pn[:, 1] + cam.cy], axis=1)
    r = obs_uv - proj
    F = np.array([[cam.fx, 0.0], [0.0, cam.fy]])
    dpix = F[None, :, :] @ Jn                       # (n, 2, 3)
    J_pose = -dpix @ _pose_point_jacobian(Xs)       # (n, 2, 6)
    J_lm = -dpix @ R_cw[None, :, :] if want_lm_jac else None
    return r, J_pose, J_lm, valid


def _line_terms(p1, p2, qs, qe):
    """Vertical distances (d_s, d_e), horizontal component h, and their exact
    derivatives w.r.t. the projected endpoints p1, p2 (all on the z=1 plane)."""
    l = p2[:, 0] - p1[:, 0]
    m = p2[:, 1] - p1[:, 1]
    D2 = l * l + m * m
    D = np.sqrt(D2)
    vs_x = qs[:, 0] - p1[:, 0]
    vs_y = qs[:, 1] - p1[:, 1]
    ve_x = qe[:, 0] - p2[:, 0]
    ve_y = qe[:, 1] - p2[:, 1]

    Ns = vs_x * m - vs_y * l
    Ne = ve_x * m - ve_y * l
    Ms = vs_x * l + vs_y * m
    Me = ve_x * l + ve_y * m
    d_s, d_e = Ns / D, Ne / D
    h_s, h_e = Ms / D, Me / D

    dD = np.stack([-l / D, -m / D, l / D, m / D], axis=1)   # d D / d(x1,y1,x2,y2)
    dNs = np.stack([-m + vs_y, -vs_x + l, -vs_y, vs_x], axis=1)
    dNe = np.stack([ve_y, -ve_x, -m - ve_y, ve_x + l], axis=1)
    dMs = np.stack([-l - vs_x, -m - vs_y, vs_x, vs_y], axis=1)
    dMe = np.stack([-ve_x, -ve_y, -l + ve_x, -m + ve_y], axis=1)

    d_ds = (dNs - d_s[:, None] * dD) / D[:, None]
    d_de = (dNe - d_e[:, None] * dD) / D[:, None]
    d_h = 0.5 * ((dMs - h_s[:, None] * dD) + (dMe - h_e[:, None] * dD)) / D[:, None]
    h = 0.5 * (h_s + h_e)
    return d_s, d_e, h, d_ds, d_de, d_h, D2


def line_batch(R_cw, t_cw, Xs_w, Xe_w, det_s_uv, det_e_uv, cam: StereoCamera,
               want_lm_jac: bool = False, degenerate_d2: float = 1e-16):
    """Vertical (n, 2) and horizontal (n,) residuals scaled by fx, with pose
    Jacobians (n, 2, 6) / (n, 6) and optional Jacobians w.r.t. the stacked
    endpoint variable [Xs, Xe]."""
    Xs_c = Xs_w @ R_cw.T + t_cw
    Xe_c = Xe_w @ R_cw.T + t_cw
    valid = (Xs_c[:, 2] > MIN_DEPTH) & (Xe_c[:, 2] > MIN_DEPTH)
    Xs_safe = np.where(valid[:, None], Xs_c, np.array([0.0, 0.0, 1.0]))
    Xe_safe = np.where(valid[:, None], Xe_c, np.array([1.0, 0.0, 1.0]))

    p1, Jn1 = _normalized_proj(Xs_safe)
    p2, Jn2 = _normalized_proj(Xe_safe)
    qs = cam.normalized(det_s_uv)
    qe = cam.normalized(det_e_uv)

    d_s, d_e, h, d_ds, d_de, d_h, D2 = _line_terms(p1, p2, qs, qe)
    valid = valid & (D2 > degenerate_d2)

    Jp1_pose = Jn1 @ _pose_point_jacobian(Xs_safe)   # (n, 2, 6)
    Jp2_pose = Jn2 @ _pose_point_jacobian(Xe_safe)

    def chain(dterm):
        # dterm (n, 4) w.r.t. (x1, y1, x2, y2) -> (n, 6) through both endpoints
        return (np.einsum("ni,nij->nj", dterm[:, :2], Jp1_pose)
                + np.einsum("ni,nij->nj", dterm[:, 2:], Jp2_pose))

    fx = cam.fx
    r_v = fx * np.stack([d_s, d_e], axis=1)
    J_v = fx * np.stack([chain(d_ds), chain(d_de)], axis=1)
    r_h = fx * h
    J_h = fx * chain(d_h)

    J_v_lm = J_h_lm = None
    if want_lm_jac:
        Jp1_lm = Jn1 @ R_cw[None, :, :]              # (n, 2, 3)
        Jp2_lm = Jn2 @ R_cw[None, :, :]

        def chain_lm(dterm):
            a = np.einsum("ni,nij->nj", dterm[:, :2], Jp1_lm)
            b = np.einsum("ni,nij->nj", dterm[:, 2:], Jp2_lm)
            return np.concatenate([a, b], axis=1)    # (n, 6): [d/dXs, d/dXe]

        J_v_lm = fx * np.stack([chain_lm(d_ds), chain_lm(d_de)], axis=1)
        J_h_lm = fx * chain_lm(d_h)[:, None, :]
    return r_v, J_v, r_h, J_h, valid, J_v_lm, J_h_lm


# ------------------------------------------------------------------ op-level

def point_residual(X_w, obs_uv, pose_wc: PoseSE3, cam: StereoCamera):
    """Single-point residual (2,) and pose Jacobian (2, 6); None if the point
    falls behind the camera."""
    inv = pose_wc.inverse()
    r, J, _, valid = point_batch(inv.rotation, inv.translation,
                                 np.asarray(X_w, dtype=np.float64)[None, :],
                                 np.asarray(obs_uv, dtype=np.float64)[None, :], cam)
    if not valid[0]:
        return None
    return r[0], J[0]


def project_line(Xs_w, Xe_w, pose_wc: PoseSE3, cam: StereoCamera) -> Optional[NormalizedLine]:
    inv = pose_wc.inverse()
    Xs_c = inv.apply(np.asarray(Xs_w, dtype=np.float64))
    Xe_c = inv.apply(np.asarray(Xe_w, dtype=np.float64))
    if Xs_c[2] <= MIN_DEPTH or Xe_c[2] <= MIN_DEPTH:
        return None
    x1, y1 = Xs_c[0] / Xs_c[2], Xs_c[1] / Xs_c[2]
    x2, y2 = Xe_c[0] / Xe_c[2], Xe_c[1] / Xe_c[2]
    if (x2 - x1) ** 2 + (y2 - y1) ** 2 <= 1e-16:
        return None
    return NormalizedLine(x1=x1, y1=y1, l=x2 - x1, m=y2 - y1)


def line_vertical_residual(Xs_w, Xe_w, det_start_uv, det_end_uv,
                           pose_wc: PoseSE3, cam: StereoCamera):
    """Signed perpendicular distances (d_s, d_e) on the normalized plane and
    their exact (2, 6) pose Jacobian (both unscaled: pixel scaling is applied
    at block-assembly time).  None on degenerate projection."""
    inv = pose_wc.inverse()
    r_v, J_v, _, _, valid, _, _ = line_batch(
        inv.rotation, inv.translation,
        np.asarray(Xs_w, dtype=np.float64)[None, :],
        np.asarray(Xe_w, dtype=np.float64)[None, :],
        np.asarray(det_start_uv, dtype=np.float64)[None, :],
        np.asarray(det_end_uv, dtype=np.float64)[None, :], cam)
    if not valid[0]:
        return None
    return r_v[0] / cam.fx, J_v[0] / cam.fx


def line_horizontal_residual(Xs_w, Xe_w, det_start_uv, det_end_uv,
                             pose_wc: PoseSE3, cam: StereoCamera,
                             edge_margin: float = 20.0):
    """Mean along-line displacement of the detected endpoints (normalized
    plane) and its (6,) Jacobian; None when either endpoint sits within
    `edge_margin` pixels of an image border or the projection degenerates."""
    det_s = np.asarray(det_start_uv, dtype=np.float64)
    det_e = np.asarray(det_end_uv, dtype=np.float64)
    if not (cam.in_bounds(det_s, margin=edge_margin) and cam.in_bounds(det_e, margin=edge_margin)):
        return None
    inv = pose_wc.inverse()
    _, _, r_h, J_h, valid, _, _ = line_batch(
        inv.rotation, inv.translation,
        np.asarray(Xs_w, dtype=np.float64)[None, :],
        np.asarray(Xe_w, dtype=np.float64)[None, :],
        det_s[None, :], det_e[None, :], cam)
    if not valid[0]:
        return None
    return float(r_h[0] / cam.fx), J_h[0] / cam.fx


# ------------------------------------------------------------------ solver

def huber_weights(norms: np.ndarray, delta: float):
    """IRLS weights and robust cost terms for block residual norms."""
    w = np.ones_like(norms)
    big = norms > delta
    w[big] = delta / norms[big]
    cost = np.where(big, delta * (2.0 * norms - delta), norms ** 2)
    return w, cost


def estimate_pose(point_landmarks, point_obs, line_starts, line_ends,
                  line_det_start, line_det_end, init_pose_wc: PoseSE3,
                  cam: StereoCamera, params: Optional[LMParams] = None,
                  point_info=None, line_info=None) -> PoseEstimate:
    """Levenberg-Marquardt pose solve from a constant-velocity initial guess.

    Landmarks are world-frame arrays; observations are left-image pixels.
    Raises TrackingLost when fewer than `min_blocks` usable residual blocks
    exist or the normal equations are degenerate at the initial guess.
    """
    params = params or LMParams()
    Xp = np.asarray(point_landmarks, dtype=np.float64).reshape(-1, 3)
    up = np.asarray(point_obs, dtype=np.float64).reshape(-1, 2)
    Xs = np.asarray(line_starts, dtype=np.float64).reshape(-1, 3)
    Xe = np.asarray(line_ends, dtype=np.float64).reshape(-1, 3)
    ds = np.asarray(line_det_start, dtype=np.float64).reshape(-1, 2)
    de = np.asarray(line_det_end, dtype=np.float64).reshape(-1, 2)
    n_pt, n_ln = Xp.shape[0], Xs.shape[0]
    w_pt = np.ones(n_pt) if point_info is None else np.asarray(point_info, dtype=np.float64)
    w_ln = np.ones(n_ln) if line_info is None else np.asarray(line_info, dtype=np.float64)

    # horizontal blocks only for lines detected away from the image border
    h_gate = np.zeros(n_ln, dtype=bool)
    if n_ln:
        h_gate = cam.in_bounds(ds, margin=params.edge_margin) \
            & cam.in_bounds(de, margin=params.edge_margin)

    inv = init_pose_wc.inverse()
    R, t = inv.rotation.copy(), inv.translation.copy()

    def evaluate(R, t, want_jac):
        blocks = []   # (norms, weights_info, r_flat, J_flat) accumulators
        H = np.zeros((6, 6))
        g = np.zeros(6)
        cost = 0.0
        detail = []
        if n_pt:
            r, J, _, valid = point_batch(R, t, Xp, up, cam)
            norms = np.linalg.norm(r, axis=1)
            wH, c = huber_weights(norms, params.huber_delta)
            use = valid
            cost += float((w_pt * c)[use].sum())
            if want_jac:
                w = (w_pt * wH) * use
                H += np.einsum("nki,n,nkj->ij", J, w, J)
                g += np.einsum("nki,n,nk->i", J, w, r)
            detail.append(("point", r, valid, wH))
        if n_ln:
            r_v, J_v, r_h, J_h, valid, _, _ = line_batch(R, t, Xs, Xe, ds, de, cam)
            norms_v = np.linalg.norm(r_v, axis=1)
            wH_v, c_v = huber_weights(norms_v, params.huber_delta)
            cost += float((w_ln * c_v)[valid].sum())
            use_h = valid & h_gate
            norms_h = np.abs(r_h)
            wH_h, c_h = huber_weights(norms_h, params.huber_delta)
            cost += float((w_ln * c_h)[use_h].sum())
            if want_jac:
                w_v = (w_ln * wH_v) * valid
                H += np.einsum("nki,n,nkj->ij", J_v, w_v, J_v)
                g += np.einsum("nki,n,nk->i", J_v, w_v, r_v)
                w_h = (w_ln * wH_h) * use_h
                H += np.einsum("ni,n,nj->ij", J_h, w_h, J_h)
                g += np.einsum("ni,n,n->i", J_h, w_h, r_h)
            detail.append(("line_vertical", r_v, valid, wH_v))
            detail.append(("line_horizontal", r_h[:, None], use_h, wH_h))
        return cost, H, g, detail

    n_blocks = n_pt + n_ln + int(h_gate.sum())
    if n_blocks < params.min_blocks:
        raise TrackingLost(f"only {n_blocks} residual blocks, need {params.min_blocks}")

    cost, H, g, detail = evaluate(R, t, want_jac=True)
    usable = sum(int(v.sum()) for _, _, v, _ in detail)
    if usable < params.min_blocks:
        raise TrackingLost(f"only {usable} usable residual blocks after visibility")

    lam = params.lambda0
    converged = False
    iters = 0
    cost_history = [cost]
    for iters in range(1, params.max_iters + 1):
        diag = np.maximum(np.diag(H), 1e-12)
        try:
            delta = np.linalg.solve(H + lam * np.diag(diag), g)
        except np.linalg.LinAlgError:
            if iters == 1:
                raise TrackingLost("normal equations are singular")
            lam *= params.lambda_up
            continue
        delta = -delta
        if np.linalg.norm(delta) < params.step_tol:
            converged = True
            break
        step = se3_exp(delta)
        R_new = renormalize_rotation(step.rotation @ R)
        t_new = step.rotation @ t + step.translation
        new_cost, H_new, g_new, detail_new = evaluate(R_new, t_new, want_jac=True)
        if new_cost < cost:
            rel = (cost - new_cost) / max(cost, 1e-300)
            R, t = R_new, t_new
            cost, H, g, detail = new_cost, H_new, g_new, detail_new
            cost_history.append(cost)
            lam = max(lam * params.lambda_down, 1e-12)
            if rel < params.cost_tol:
                converged = True
                break
        else:
            lam *= params.lambda_up

    blocks = []
    counts = {"point": 0, "line_vertical": 0, "line_horizontal": 0}
    for kind, r, valid, wH in detail:
        for k in np.flatnonzero(valid):
            blocks.append(ResidualBlock(kind=kind, index=int(k),
                                        residual=r[k].copy(), weight=float(wH[k])))
            counts[kind] += 1
    pose_cw = PoseSE3(R, t)
    return PoseEstimate(pose=pose_cw.inverse(), cost=cost, iterations=iters,
                        converged=converged, blocks=blocks,
                        cost_history=cost_history,
                        n_point=counts["point"],
                        n_line_vertical=counts["line_vertical"],
                        n_line_horizontal=counts["line_horizontal"])
