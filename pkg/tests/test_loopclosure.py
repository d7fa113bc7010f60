import numpy as np
import pytest

from pointline_slam.geometry import PoseSE3, StereoCamera, se3_exp, se3_log
from pointline_slam.ggs import compute_ggs, ggs_dissimilarity
from pointline_slam.loopclosure import (
    LoopCandidate,
    LoopConfig,
    PoseGraph,
    PoseGraphEdge,
    build_pose_graph,
    correct_loop,
    find_loop_candidates,
    global_bundle_adjust,
    optimize_pose_graph,
    verify_candidate,
)
from pointline_slam.mapping import LocalMap

CAM = StereoCamera(fx=700.0, fy=700.0, cx=620.0, cy=188.0, baseline=0.5,
                   width=1242, height=376)


def panorama_image(k, step=6, width=48, height=30, loop_cols=None, seed=0):
    """Window k*step into a wrapped random panorama; frames one loop apart
    see identical pixels."""
    rng = np.random.default_rng(seed)
    total = loop_cols if loop_cols else 10_000
    pan = rng.integers(0, 256, size=(height, total), dtype=np.uint8)
    cols = (k * step + np.arange(width)) % total
    return pan[:, cols]


def empty_map_with_descriptors(n, loop_period=None, step=6):
    m = LocalMap(CAM)
    loop_cols = loop_period * step if loop_period else None
    for k in range(n):
        img = panorama_image(k, step=step, loop_cols=loop_cols)
        m.insert_keyframe(k, k, 0.1 * k, PoseSE3(np.eye(3), np.array([0.05 * k, 0, 0])),
                          ggs=compute_ggs(img))
    return m


def test_candidates_respect_exclusion_window():
    m = empty_map_with_descriptors(20)
    cfg = LoopConfig(exclusion_window=30)
    assert find_loop_candidates(m, 19, cfg) == []
    cfg = LoopConfig(exclusion_window=5, sim_threshold=float("inf"))
    cands = find_loop_candidates(m, 19, cfg)
    assert cands
    assert all(c.looped_kf <= 13 for c in cands)


def test_identical_descriptor_is_top_candidate_with_zero_sim():
    m = empty_map_with_descriptors(50, loop_period=40)
    cfg = LoopConfig(exclusion_window=5, sim_threshold=float("inf"))
    cands = find_loop_candidates(m, 40, cfg)   # frame 40 revisits frame 0
    assert cands[0].looped_kf == 0
    assert cands[0].sim_v == 0.0


def test_revisit_found_on_loop_sequence():
    m = empty_map_with_descriptors(70, loop_period=50)
    cfg = LoopConfig(exclusion_window=30)
    for cur in range(55, 70):
        cands = find_loop_candidates(m, cur, cfg)
        assert cands, f"no candidate at kf {cur}"
        assert abs(cands[0].looped_kf - (cur - 50)) <= 2


# ------------------------------------------------------------------ verify

def stereo_obs(pose, X):
    inv = pose.inverse()
    out = {}
    for i, x in enumerate(X):
        Xc = inv.apply(x)
        if Xc[2] < 0.5:
            continue
        uv = CAM.project(Xc)
        if CAM.in_bounds(uv):
            out[i] = (float(uv[0]), float(uv[1]), float(CAM.disparity_of(Xc)))
    return out


def map_with_revisit(n_mid=3, scramble_ratio=0.0, seed=0):
    """KF 0 and KF n observe the same landmarks from the same pose; the
    keyframes in between look elsewhere."""
    rng = np.random.default_rng(seed)
    X = np.column_stack([rng.uniform(-5, 5, 60), rng.uniform(-2, 2, 60),
                         rng.uniform(5, 20, 60)])
    m = LocalMap(CAM)
    img0 = panorama_image(0)
    pose0 = PoseSE3.identity()
    m.insert_keyframe(0, 0, 0.0, pose0, ggs=compute_ggs(img0),
                      point_feats=stereo_obs(pose0, X))
    for k in range(1, n_mid + 1):
        pose = PoseSE3(np.eye(3), np.array([0.0, 0.0, 0.5 * k]))
        m.insert_keyframe(k, k, 0.1 * k, pose, ggs=compute_ggs(panorama_image(3 * k)),
                          point_feats=stereo_obs(pose, X))
    cur = n_mid + 1
    obs = stereo_obs(pose0, X)
    if scramble_ratio > 0.0:
        ids = sorted(obs)
        n_bad = int(len(ids) * scramble_ratio)
        for fid in ids[:n_bad]:
            u, v, d = obs[fid]
            obs[fid] = (float(rng.uniform(0, CAM.width)),
                        float(rng.uniform(0, CAM.height)), d)
    m.insert_keyframe(cur, cur, 0.1 * cur, pose0, ggs=compute_ggs(img0),
                      point_feats=obs)
    return m, cur


def test_verify_self_comparison_accepts():
    m, cur = map_with_revisit()
    cand = LoopCandidate(current_kf=cur, looped_kf=0,
                         sim_v=ggs_dissimilarity(m.keyframes[cur].ggs,
                                                 m.keyframes[0].ggs))
    assert cand.sim_v == 0.0
    out = verify_candidate(m, cand)
    assert out.accepted
    assert out.ratio_inl == pytest.approx(1.0)
    assert np.linalg.norm(se3_log(out.relative)) < 1e-6
    assert out.lc_rat == pytest.approx(0.0, abs=1e-9)


def test_verify_low_inlier_ratio_rejected():
    m, cur = map_with_revisit(scramble_ratio=0.9, seed=3)
    cand = LoopCandidate(current_kf=cur, looped_kf=0, sim_v=0.0)
    out = verify_candidate(m, cand)
    assert not out.accepted
    assert out.ratio_inl < 0.5


def test_strict_paper_mode_inverts_acceptance():
    """The literal rule rejects candidates whose lc_rat falls below the
    threshold, which includes a geometrically perfect loop (lc_rat ~ 0)."""
    m, cur = map_with_revisit()
    cand = LoopCandidate(current_kf=cur, looped_kf=0, sim_v=0.0)
    out = verify_candidate(m, cand, LoopConfig(strict_paper_lcd=True))
    assert not out.accepted
    assert "strict" in out.reason
    assert out.lc_rat < 0.2


def test_verify_decoy_rejected_by_neighbor_consistency():
    """A keyframe with a similar descriptor but dissimilar temporal neighbors
    must fail stage 2 even when the geometry checks out."""
    rng = np.random.default_rng(5)
    X = np.column_stack([rng.uniform(-5, 5, 50), rng.uniform(-2, 2, 50),
                         rng.uniform(5, 20, 50)])
    m = LocalMap(CAM)
    pose0 = PoseSE3.identity()
    base = panorama_image(0)
    near = panorama_image(0).copy()
    near[:, :2] = 255 - near[:, :2]          # slightly different: sim_v > 0
    rng2 = np.random.default_rng(99)
    unrelated1 = rng2.integers(0, 256, size=base.shape, dtype=np.uint8)
    unrelated2 = rng2.integers(0, 256, size=base.shape, dtype=np.uint8)
    obs = stereo_obs(pose0, X)
    m.insert_keyframe(0, 0, 0.0, pose0, ggs=compute_ggs(unrelated1), point_feats=obs)
    m.insert_keyframe(1, 1, 0.1, pose0, ggs=compute_ggs(near), point_feats=obs)
    m.insert_keyframe(2, 2, 0.2, pose0, ggs=compute_ggs(unrelated2), point_feats=obs)
    m.insert_keyframe(3, 3, 0.3, pose0, ggs=compute_ggs(base), point_feats=obs)
    sim = ggs_dissimilarity(m.keyframes[3].ggs, m.keyframes[1].ggs)
    assert sim > 0.0
    cand = LoopCandidate(current_kf=3, looped_kf=1, sim_v=sim)
    out = verify_candidate(m, cand)
    assert not out.accepted
    assert "neighbor" in out.reason


# ------------------------------------------------------------------ PGO

def circle_poses(n, radius=10.0):
    poses = []
    for k in range(n):
        ang = 2.0 * np.pi * k / n
        c, s = np.cos(ang), np.sin(ang)
        R = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        t = np.array([radius * np.sin(ang), 0.0, radius * (1.0 - np.cos(ang))])
        poses.append(PoseSE3(R, t))
    return poses


def test_pgo_consistent_graph_is_noop():
    true = circle_poses(12)
    graph = PoseGraph(nodes=list(true), fixed={0})
    for k in range(11):
        Z = true[k].inverse().compose(true[k + 1])
        graph.edges.append(PoseGraphEdge(i=k, j=k + 1, measurement=Z,
                                         information=np.eye(6), kind="odometry"))
    Zl = true[0].inverse().compose(true[11])
    graph.edges.append(PoseGraphEdge(i=0, j=11, measurement=Zl,
                                     information=np.eye(6), kind="loop"))
    res = optimize_pose_graph(graph)
    for a, b in zip(res.nodes, true):
        assert np.abs(a.matrix() - b.matrix()).max() < 1e-9


def test_pgo_two_node_splits_discrepancy():
    rng = np.random.default_rng(7)
    A = se3_exp(rng.normal(scale=0.3, size=6))
    B = se3_exp(rng.normal(scale=0.3, size=6))
    graph = PoseGraph(nodes=[PoseSE3.identity(), A], fixed={0})
    graph.edges.append(PoseGraphEdge(i=0, j=1, measurement=A,
                                     information=np.eye(6), kind="odometry"))
    graph.edges.append(PoseGraphEdge(i=0, j=1, measurement=B,
                                     information=np.eye(6), kind="loop"))
    res = optimize_pose_graph(graph, max_iters=300)
    mid = A.compose(se3_exp(0.5 * se3_log(A.inverse().compose(B))))
    got = res.nodes[1]
    assert np.abs(got.matrix() - mid.matrix()).max() < 1e-6


def ate(poses, truth):
    return float(np.sqrt(np.mean([np.linalg.norm(p.translation - t.translation) ** 2
                                  for p, t in zip(poses, truth)])))


def test_pgo_reduces_drift_by_half():
    n = 40
    true = circle_poses(n)
    # yaw-dominated odometry bias: the realistic drift mode, and the one a
    # single loop edge corrects best
    bias = se3_exp(np.array([0.002, 0.001, -0.001, 0.0, 0.008, 0.0]))
    est = [true[0]]
    odo = []
    for k in range(n - 1):
        Z = true[k].inverse().compose(true[k + 1]).compose(bias)
        odo.append(Z)
        est.append(est[-1].compose(Z))
    graph = PoseGraph(nodes=list(est), fixed={0})
    for k, Z in enumerate(odo):
        graph.edges.append(PoseGraphEdge(i=k, j=k + 1, measurement=Z,
                                         information=np.eye(6), kind="odometry"))
    Zl = true[0].inverse().compose(true[n - 1])
    graph.edges.append(PoseGraphEdge(i=0, j=n - 1, measurement=Zl,
                                     information=np.eye(6), kind="loop"))
    pre = ate(est, true)
    res = optimize_pose_graph(graph)
    post = ate(res.nodes, true)
    assert post <= 0.5 * pre
    assert np.all(np.diff(res.cost_history) <= 0.0)
    # gauge node untouched
    assert np.array_equal(res.nodes[0].matrix(), true[0].matrix())


# ------------------------------------------------------------------ correction

def test_correct_loop_updates_map_and_landmarks():
    rng = np.random.default_rng(11)
    X = np.column_stack([rng.uniform(-5, 5, 80), rng.uniform(-2, 2, 80),
                         rng.uniform(6, 25, 80)])
    n = 8
    m = LocalMap(CAM)
    true = []
    drift = se3_exp(np.array([0.02, 0.0, 0.01, 0.0, 0.004, 0.0]))
    acc = PoseSE3.identity()
    for k in range(n):
        true_pose = PoseSE3(np.eye(3), np.array([0.0, 0.0, 0.25 * k]))
        true.append(true_pose)
        est_pose = acc
        acc = acc.compose(true[0].inverse().compose(true_pose) if k == 0 else
                          true[k - 1].inverse().compose(true_pose)).compose(drift)
        m.insert_keyframe(k, k, 0.1 * k, est_pose,
                          ggs=compute_ggs(panorama_image(k)),
                          point_feats=stereo_obs(true_pose, X))
    # measured loop between first and last: relative = T_i_meas * T_j^-1
    T_i_meas = true[n - 1]
    cand = LoopCandidate(current_kf=n - 1, looped_kf=0, sim_v=0.0,
                         relative=T_i_meas.compose(true[0].inverse()),
                         ratio_inl=1.0, accepted=True)
    # wait: looped kf pose in-map equals true[0] (k=0 inserted before drift)
    pre_err = ate([m.keyframes[k].pose for k in range(n)], true)
    lm_before = m.points[next(iter(m.points))].copy()
    res = correct_loop(m, cand)
    assert res is not None
    post_err = ate([m.keyframes[k].pose for k in range(n)], true)
    assert post_err < pre_err
    # gauge keyframe exactly preserved
    assert np.array_equal(m.keyframes[0].pose.matrix(), PoseSE3.identity().matrix())
    # landmarks anchored to keyframe 0 stay put; others moved with their anchor
    fid = next(iter(m.points))
    anchor = min(m.point_observers[fid])
    if anchor == 0:
        assert np.array_equal(m.points[fid], lm_before)


def test_correct_loop_requires_accepted_candidate():
    m = empty_map_with_descriptors(4)
    cand = LoopCandidate(current_kf=3, looped_kf=0, sim_v=0.0, accepted=False)
    assert correct_loop(m, cand) is None


def test_global_ba_smoke():
    rng = np.random.default_rng(13)
    X = np.column_stack([rng.uniform(-5, 5, 50), rng.uniform(-2, 2, 50),
                         rng.uniform(6, 25, 50)])
    m = LocalMap(CAM)
    for k in range(3):
        pose = PoseSE3(np.eye(3), np.array([0.1 * k, 0.0, 0.3 * k]))
        m.insert_keyframe(k, k, 0.1 * k, pose, point_feats=stereo_obs(pose, X))
    for fid in m.points:
        m.points[fid] = m.points[fid] + rng.normal(scale=0.02, size=3)
    res = global_bundle_adjust(m)
    assert res is not None
    assert res.final_rms < 1e-6
    assert np.all(np.diff(res.cost_history) <= 0.0)
    assert m.keyframes[0].pose.almost_equal(PoseSE3(np.eye(3), np.zeros(3)), tol=0.0)
