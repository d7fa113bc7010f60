"""Place recognition on keyframe gray-histogram descriptors, loop
verification, and pose-graph correction.

Candidate search ranks historical keyframes by descriptor dissimilarity,
skipping the most recent keyframes.  Verification solves the current
keyframe's pose against the looped keyframe's landmarks (reusing the point
mismatch filter), gates on the inlier ratio and on the geometric gap of the
measured relative transform, then checks that the looped keyframe's temporal
neighbors look similar to the current view as well.  An accepted loop becomes
one extra edge in a pose graph over all keyframes (sequential odometry edges
plus covisibility edges with enough shared features), which is optimized with
Levenberg-Marquardt; landmarks follow their anchor keyframe's correction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adjustment import BAParams, BAResult
from .association import PointMatch, filter_point_matches
from .estimation import LMParams, TrackingLost, estimate_pose
from .geometry import PointFeature2D, PoseSE3, renormalize_rotation, se3_exp, se3_log, skew
from .ggs import ggs_dissimilarity
from .mapping import LocalMap


@dataclass
class LoopConfig:
    exclusion_window: int = 30
    sim_threshold: Optional[float] = None   # None: 2x median consecutive sim
    sim_threshold_factor: float = 2.0
    neighbor_factor: float = 1.5
    lc_alpha: float = 0.001
    lc_rat_threshold: float = 0.2
    inlier_min: float = 0.5
    inlier_px: float = 3.0
    min_common: int = 6
    max_drift_frac: float = 0.1
    min_drift_floor: float = 0.5            # meters of allowed gap regardless
    strict_paper_lcd: bool = False
    max_candidates: int = 3


@dataclass
class LoopCandidate:
    current_kf: int
    looped_kf: int
    sim_v: float
    relative: Optional[PoseSE3] = None      # T_i_meas * T_j^-1
    ratio_inl: float = 0.0
    lc_rat: float = 0.0
    accepted: bool = False
    reason: str = ""


@dataclass
class PoseGraphEdge:
    i: int
    j: int
    measurement: PoseSE3                    # expected T_i^-1 * T_j
    information: np.ndarray
    kind: str


@dataclass
class PoseGraph:
    nodes: list                             # list[PoseSE3]
    edges: list = field(default_factory=list)
    fixed: set = field(default_factory=set)


@dataclass
class PGOResult:
    nodes: list
    cost_history: list
    iterations: int
    converged: bool


# ------------------------------------------------------------------ search

def find_loop_candidates(map_: LocalMap, current_kf: int,
                         config: Optional[LoopConfig] = None) -> list:
    """Historical keyframes whose descriptor dissimilarity to the current one
    falls below the (adaptive) threshold, sorted most-similar first."""
    config = config or LoopConfig()
    order = sorted(map_.keyframes)
    if current_kf not in order:
        return []
    pos = order.index(current_kf)
    eligible = order[:max(0, pos - config.exclusion_window)]
    cur = map_.keyframes[current_kf].ggs
    if cur is None or not eligible:
        return []
    sims = []
    for k in eligible:
        g = map_.keyframes[k].ggs
        if g is not None:
            sims.append((k, ggs_dissimilarity(cur, g)))
    if not sims:
        return []
    threshold = config.sim_threshold
    if threshold is None:
        consecutive = []
        for a, b in zip(order, order[1:]):
            ga, gb = map_.keyframes[a].ggs, map_.keyframes[b].ggs
            if ga is not None and gb is not None:
                consecutive.append(ggs_dissimilarity(ga, gb))
        threshold = (config.sim_threshold_factor * float(np.median(consecutive))
                     if consecutive else float("inf"))
    out = [LoopCandidate(current_kf=current_kf, looped_kf=k, sim_v=s)
           for k, s in sims if s < threshold]
    out.sort(key=lambda c: (c.sim_v, c.looped_kf))
    return out[:config.max_candidates]


# ------------------------------------------------------------------ verify

def _path_length(map_: LocalMap, a: int, b: int) -> float:
    order = [k for k in sorted(map_.keyframes) if min(a, b) <= k <= max(a, b)]
    total = 0.0
    for u, v in zip(order, order[1:]):
        tu = map_.keyframes[u].pose.translation
        tv = map_.keyframes[v].pose.translation
        total += float(np.linalg.norm(tv - tu))
    return total


def verify_candidate(map_: LocalMap, candidate: LoopCandidate,
                     config: Optional[LoopConfig] = None,
                     lm_params: Optional[LMParams] = None) -> LoopCandidate:
    """Two-stage check: feature-metric relative pose quality, then descriptor
    consistency of the looped keyframe's temporal neighbors."""
    config = config or LoopConfig()
    i, j = candidate.current_kf, candidate.looped_kf
    kf_i, kf_j = map_.keyframes[i], map_.keyframes[j]

    common = sorted(set(kf_i.point_obs) & set(kf_j.point_obs) & set(map_.points))
    if len(common) < config.min_common:
        candidate.reason = f"only {len(common)} common features"
        return candidate

    matches = []
    for fid in common:
        uj, vj, _ = kf_j.point_obs[fid]
        ui, vi, _ = kf_i.point_obs[fid]
        matches.append(PointMatch(prev=PointFeature2D(uj, vj, id=fid),
                                  curr=PointFeature2D(ui, vi, id=fid),
                                  grid_prev=(0, 0), grid_curr=(0, 0)))
    # reuse the point mismatch filter on the image-wide pool
    inliers, _ = filter_point_matches(matches, singleton="image")
    if len(inliers) < config.min_common:
        candidate.reason = "mismatch filter left too few correspondences"
        return candidate

    ids = [m.prev.id for m in inliers]
    X = np.array([map_.points[f] for f in ids])
    obs = np.array([[kf_i.point_obs[f][0], kf_i.point_obs[f][1]] for f in ids])
    try:
        est = estimate_pose(X, obs, np.zeros((0, 3)), np.zeros((0, 3)),
                            np.zeros((0, 2)), np.zeros((0, 2)),
                            kf_j.pose, map_.cam, lm_params or LMParams())
    except TrackingLost as exc:
        candidate.reason = f"relative pose unsolvable: {exc}"
        return candidate

    good = sum(1 for b in est.blocks
               if np.linalg.norm(b.residual) <= config.inlier_px)
    ratio = good / len(common)
    relative = est.pose.compose(kf_j.pose.inverse())
    gap = float(np.linalg.norm(se3_log(relative)))
    candidate.relative = relative
    candidate.ratio_inl = ratio
    candidate.lc_rat = config.lc_alpha * gap * ratio

    if config.strict_paper_lcd:
        # literal reading: candidates with lc_rat below the threshold are outliers
        if candidate.lc_rat < config.lc_rat_threshold:
            candidate.reason = "lc_rat below threshold (strict mode)"
            return candidate
    else:
        if ratio < config.inlier_min:
            candidate.reason = f"inlier ratio {ratio:.2f} below {config.inlier_min}"
            return candidate
        allowed = max(config.min_drift_floor,
                      config.max_drift_frac * _path_length(map_, j, i))
        if gap > allowed:
            candidate.reason = f"relative gap {gap:.3f} exceeds drift bound {allowed:.3f}"
            return candidate

    # stage 2: the looped keyframe's temporal neighbors must look similar too
    order = sorted(map_.keyframes)
    pos = order.index(j)
    cur_g = kf_i.ggs
    if cur_g is not None and candidate.sim_v > 0.0:
        for n in (pos - 1, pos + 1):
            if 0 <= n < len(order) and order[n] != i:
                g = map_.keyframes[order[n]].ggs
                if g is None:
                    continue
                if ggs_dissimilarity(cur_g, g) > config.neighbor_factor * candidate.sim_v:
                    candidate.reason = f"neighbor {order[n]} fails consistency"
                    return candidate

    candidate.accepted = True
    candidate.reason = "accepted"
    return candidate


# ------------------------------------------------------------------ PGO

def se3_adjoint(T: PoseSE3) -> np.ndarray:
    A = np.zeros((6, 6))
    A[:3, :3] = T.rotation
    A[:3, 3:] = skew(T.translation) @ T.rotation
    A[3:, 3:] = T.rotation
    return A


def build_pose_graph(map_: LocalMap, loop: Optional[LoopCandidate] = None,
                     covis_share: float = 0.2,
                     odometry_info: float = 1.0,
                     loop_info: float = 1.0) -> PoseGraph:
    """Graph over all keyframes: sequential odometry edges, covisibility edges
    between keyframes sharing at least `covis_share` of their features, and
    the accepted loop edge."""
    order = sorted(map_.keyframes)
    index = {k: n for n, k in enumerate(order)}
    nodes = [map_.keyframes[k].pose for k in order]
    graph = PoseGraph(nodes=nodes, fixed={0} if nodes else set())

    def rel(a: int, b: int) -> PoseSE3:
        return map_.keyframes[a].pose.inverse().compose(map_.keyframes[b].pose)

    for a, b in zip(order, order[1:]):
        graph.edges.append(PoseGraphEdge(
            i=index[a], j=index[b], measurement=rel(a, b),
            information=odometry_info * np.eye(6), kind="odometry"))
    for a_i, a in enumerate(order):
        for b in order[a_i + 2:]:
            na = map_.keyframes[a].n_observations()
            nb = map_.keyframes[b].n_observations()
            base = min(na, nb)
            if base == 0:
                continue
            if map_.graph.shared(a, b) / base >= covis_share:
                if loop is not None and {a, b} == {loop.looped_kf, loop.current_kf}:
                    continue
                graph.edges.append(PoseGraphEdge(
                    i=index[a], j=index[b], measurement=rel(a, b),
                    information=odometry_info * np.eye(6), kind="covisibility"))
    if loop is not None and loop.relative is not None:
        j, i = loop.looped_kf, loop.current_kf
        T_i_meas = loop.relative.compose(map_.keyframes[j].pose)
        Z = map_.keyframes[j].pose.inverse().compose(T_i_meas)
        graph.edges.append(PoseGraphEdge(
            i=index[j], j=index[i], measurement=Z,
            information=loop_info * np.eye(6), kind="loop"))
    return graph


def optimize_pose_graph(graph: PoseGraph, max_iters: int = 50,
                        lambda0: float = 1e-6, step_tol: float = 1e-10,
                        cost_tol: float = 1e-12) -> PGOResult:
    """LM over the node poses with between-edge residuals
    log(Z^-1 T_i^-1 T_j); fixed nodes keep their exact values."""
    nodes = list(graph.nodes)
    K = len(nodes)
    free = [k for k in range(K) if k not in graph.fixed]
    col = {k: 6 * i for i, k in enumerate(free)}
    n_var = 6 * len(free)

    def residuals(nodes):
        rs = []
        for e in graph.edges:
            X = e.measurement.inverse().compose(
                nodes[e.i].inverse().compose(nodes[e.j]))
            rs.append(se3_log(X))
        return rs

    def cost_of(rs):
        return sum(float(r @ e.information @ r) for r, e in zip(rs, graph.edges))

    rs = residuals(nodes)
    cost = cost_of(rs)
    history = [cost]
    lam = lambda0
    converged = False
    iters = 0
    for iters in range(1, max_iters + 1):
        H = np.zeros((n_var, n_var))
        g = np.zeros(n_var)
        for e, r in zip(graph.edges, rs):
            # Gauss-Newton with the small-residual approximation of the inverse
            # right Jacobian (identity); the LM accept test guards convergence
            A = se3_adjoint(nodes[e.j].inverse())
            Ji = -A
            Jj = A
            for (ni, Jn) in ((e.i, Ji), (e.j, Jj)):
                if ni not in col:
                    continue
                ci = col[ni]
                g[ci:ci + 6] += Jn.T @ e.information @ r
                H[ci:ci + 6, ci:ci + 6] += Jn.T @ e.information @ Jn
            if e.i in col and e.j in col:
                ci, cj = col[e.i], col[e.j]
                blk = Ji.T @ e.information @ Jj
                H[ci:ci + 6, cj:cj + 6] += blk
                H[cj:cj + 6, ci:ci + 6] += blk.T
        if np.linalg.norm(g) == 0.0:
            converged = True
            break
        try:
            delta = -np.linalg.solve(H + lam * np.diag(np.maximum(np.diag(H), 1e-12)), g)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        if np.linalg.norm(delta) < step_tol:
            converged = True
            break
        new_nodes = list(nodes)
        for k in free:
            c = col[k]
            step = se3_exp(delta[c:c + 6])
            R = renormalize_rotation(step.rotation @ nodes[k].rotation)
            t = step.rotation @ nodes[k].translation + step.translation
            new_nodes[k] = PoseSE3(R, t)
        new_rs = residuals(new_nodes)
        new_cost = cost_of(new_rs)
        if new_cost < cost:
            rel_drop = (cost - new_cost) / max(cost, 1e-300)
            nodes, rs, cost = new_nodes, new_rs, new_cost
            history.append(cost)
            lam = max(lam * 0.5, 1e-12)
            if rel_drop < cost_tol:
                converged = True
                break
        else:
            lam *= 10.0
    return PGOResult(nodes=nodes, cost_history=history, iterations=iters,
                     converged=converged)


# ------------------------------------------------------------------ correction

def correct_loop(map_: LocalMap, candidate: LoopCandidate,
                 config: Optional[LoopConfig] = None,
                 covis_share: float = 0.2) -> Optional[PGOResult]:
    """Pose-graph correction after an accepted loop.  Keyframe poses are
    replaced by the optimized ones and every landmark follows its anchor
    (first observing) keyframe.  On divergence the map is left unchanged."""
    if not candidate.accepted or candidate.relative is None:
        return None
    graph = build_pose_graph(map_, loop=candidate, covis_share=covis_share)
    result = optimize_pose_graph(graph)
    if not result.cost_history or result.cost_history[-1] > result.cost_history[0]:
        return None
    order = sorted(map_.keyframes)
    old_poses = {k: map_.keyframes[k].pose for k in order}
    for n, k in enumerate(order):
        map_.keyframes[k].pose = result.nodes[n]
    # landmarks move with the correction of their anchor keyframe
    for fid, observers in map_.point_observers.items():
        if not observers:
            continue
        anchor = min(observers)
        corr = map_.keyframes[anchor].pose.compose(old_poses[anchor].inverse())
        map_.points[fid] = corr.apply(map_.points[fid])
    for fid, observers in map_.line_observers.items():
        if not observers:
            continue
        anchor = min(observers)
        corr = map_.keyframes[anchor].pose.compose(old_poses[anchor].inverse())
        map_.lines[fid] = corr.apply(map_.lines[fid])
    return result


def global_bundle_adjust(map_: LocalMap, params: Optional[BAParams] = None) -> Optional[BAResult]:
    """Final full BA over all keyframes (first fixed) and all landmarks."""
    return map_.bundle_adjust_all(params)
