import numpy as np
import pytest

from pointline_slam.association import build_llgs, line_match, point_match
from pointline_slam.dynamics import (
    DynamicGridMap,
    MotionModel,
    detect_dynamic_grids,
    detect_dynamic_llgs,
    line_dynamic_error,
    predict_point,
)
from pointline_slam.geometry import (
    Landmark3D,
    LineFeature2D,
    PointFeature2D,
    PoseSE3,
    StereoCamera,
    se3_exp,
)

W, H = 1242, 376
CAM = StereoCamera(fx=700.0, fy=700.0, cx=620.0, cy=188.0, baseline=0.5,
                   width=W, height=H)
IDENTITY = MotionModel(T_pp=PoseSE3.identity())


def feat_for(X, fid=0):
    uv = CAM.project(X)
    return PointFeature2D(uv[0], uv[1], disparity=float(CAM.disparity_of(X)), id=fid)


def match_for(X_prev, T_pp, fid=0, detected=None):
    """Match whose current observation is the exact image of X_prev under T_pp
    unless an explicit detection is given."""
    prev = feat_for(X_prev, fid)
    Xc = T_pp.apply(X_prev)
    uv = CAM.project(Xc) if detected is None else np.asarray(detected)
    curr = PointFeature2D(uv[0], uv[1], disparity=float(CAM.disparity_of(Xc)), id=fid)
    return point_match(prev, curr, W, H)


def test_predict_identity_motion():
    X = np.array([1.0, -0.5, 8.0])
    f = feat_for(X)
    pred = predict_point(f, IDENTITY, CAM)
    assert np.abs(pred - f.uv()).max() < 1e-9


def test_predict_known_motion_matches_projection_oracle():
    rng = np.random.default_rng(3)
    T = se3_exp(np.array([0.1, -0.05, 0.3, 0.01, 0.02, -0.015]))
    model = MotionModel(T_pp=T)
    for _ in range(25):
        X = np.array([rng.uniform(-4, 4), rng.uniform(-1.5, 1.5), rng.uniform(3, 30)])
        pred = predict_point(feat_for(X), model, CAM)
        expected = CAM.project(T.apply(X))
        assert np.abs(pred - expected).max() < 1e-6


def test_predict_behind_camera_excluded():
    X = np.array([0.0, 0.0, 2.0])
    back = MotionModel(T_pp=PoseSE3(np.eye(3), np.array([0.0, 0.0, -5.0])))
    assert predict_point(feat_for(X), back, CAM) is None


def test_predict_requires_depth():
    f = PointFeature2D(100.0, 100.0, disparity=None)
    assert predict_point(f, IDENTITY, CAM) is None


def test_static_scene_exact_model_flags_nothing():
    rng = np.random.default_rng(5)
    T = se3_exp(np.array([0.05, 0.0, 0.4, 0.0, 0.01, 0.0]))
    matches = []
    for i in range(120):
        X = np.array([rng.uniform(-5, 5), rng.uniform(-1.5, 1.5), rng.uniform(4, 30)])
        if T.apply(X)[2] < 1.0:
            continue
        m = match_for(X, T, fid=i)
        if CAM.in_bounds(m.curr.uv()).all():
            matches.append(m)
    gm = detect_dynamic_grids(matches, MotionModel(T_pp=T), CAM)
    assert not gm.mask.any()
    assert not gm.over_threshold.any()


def test_moving_object_grids_flagged_with_neighbors():
    rng = np.random.default_rng(7)
    matches = []
    # static background consistent with identity motion
    for i in range(80):
        X = np.array([rng.uniform(-5, 5), rng.uniform(-1.5, 1.5), rng.uniform(6, 30)])
        m = match_for(X, PoseSE3.identity(), fid=i)
        if CAM.in_bounds(m.curr.uv()).all():
            matches.append(m)
    # object displaced ~20 px against the prediction, confined to a pixel patch
    cols, rows = 64, 48
    object_ids = []
    for i in range(30):
        u = rng.uniform(200.0, 260.0)
        v = rng.uniform(100.0, 125.0)
        z = 10.0
        X = np.array([(u - CAM.cx) * z / CAM.fx, (v - CAM.cy) * z / CAM.fy, z])
        m = match_for(X, PoseSE3.identity(), fid=1000 + i, detected=(u + 20.0, v))
        matches.append(m)
        object_ids.append(1000 + i)
    gm = detect_dynamic_grids(matches, IDENTITY, CAM)
    flagged_cells = {(r, c) for r, c in zip(*np.nonzero(gm.over_threshold))}
    assert flagged_cells, "object cells must be over threshold"
    # mask closed under the 8-neighbor dilation of over-threshold cells
    for r, c in flagged_cells:
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    assert gm.mask[rr, cc]
    # every object feature's (current) cell is flagged, statics away from the
    # object stay clean
    for m in matches:
        if m.prev.id in object_ids:
            assert gm.is_dynamic(m.curr.u, m.curr.v)
        elif abs(m.curr.u - 240.0) > 120 or abs(m.curr.v - 112.0) > 80:
            assert not gm.is_dynamic(m.curr.u, m.curr.v)


def test_mask_equals_dilation_of_over_threshold():
    rng = np.random.default_rng(9)
    matches = []
    for i in range(60):
        X = np.array([rng.uniform(-5, 5), rng.uniform(-1.5, 1.5), rng.uniform(4, 25)])
        offset = (rng.uniform(-9, 9), rng.uniform(-9, 9)) if rng.uniform() < 0.3 else (0, 0)
        uv = CAM.project(X)
        m = match_for(X, PoseSE3.identity(), fid=i,
                      detected=(uv[0] + offset[0], uv[1] + offset[1]))
        if CAM.in_bounds(m.curr.uv()).all():
            matches.append(m)
    gm = detect_dynamic_grids(matches, IDENTITY, CAM)
    ref = np.zeros_like(gm.over_threshold)
    rs, cs = np.nonzero(gm.over_threshold)
    for r, c in zip(rs, cs):
        ref[max(0, r - 1):r + 2, max(0, c - 1):c + 2] = True
    assert np.array_equal(gm.mask, ref)


def test_grid_detection_permutation_invariant():
    rng = np.random.default_rng(11)
    matches = []
    for i in range(50):
        X = np.array([rng.uniform(-5, 5), rng.uniform(-1.5, 1.5), rng.uniform(4, 25)])
        uv = CAM.project(X)
        m = match_for(X, PoseSE3.identity(), fid=i,
                      detected=(uv[0] + (15.0 if i % 7 == 0 else 0.0), uv[1]))
        matches.append(m)
    a = detect_dynamic_grids(matches, IDENTITY, CAM)
    b = detect_dynamic_grids(list(reversed(matches)), IDENTITY, CAM)
    assert np.array_equal(a.mask, b.mask)
    assert np.allclose(a.mean_error, b.mean_error, equal_nan=True)


# ---------------------------------------------------------------- lines

def line_pair(Xs, Xe, T_pp, lid, detected=None):
    """(LineMatch, prev 3-D line) where the current detection is the image of
    the moved line unless given explicitly."""
    prev2d = LineFeature2D(CAM.project(Xs), CAM.project(Xe), id=lid)
    cs, ce = T_pp.apply(Xs), T_pp.apply(Xe)
    if detected is None:
        curr2d = LineFeature2D(CAM.project(cs), CAM.project(ce), id=lid)
    else:
        curr2d = LineFeature2D(detected[0], detected[1], id=lid)
    return line_match(prev2d, curr2d), Landmark3D.line(Xs, Xe)


def test_line_error_static_exact_model_zero():
    T = se3_exp(np.array([0.02, -0.01, 0.2, 0.005, -0.01, 0.002]))
    m, lm = line_pair(np.array([1.0, 0.2, 8.0]), np.array([2.0, -0.3, 9.0]),
                      T, lid=0)
    err = line_dynamic_error(lm, m.curr, MotionModel(T_pp=T), CAM)
    assert err == pytest.approx(0.0, abs=1e-12)


def test_line_error_parallel_offset():
    Xs, Xe = np.array([-1.0, 0.0, 10.0]), np.array([1.0, 0.0, 10.0])
    prev2d = LineFeature2D(CAM.project(Xs), CAM.project(Xe), id=0)
    # detected line displaced 3 px perpendicular to itself
    curr2d = LineFeature2D(prev2d.start + [0.0, 3.0], prev2d.end + [0.0, 3.0], id=0)
    m = line_match(prev2d, curr2d)
    err = line_dynamic_error(Landmark3D.line(Xs, Xe), m.curr, IDENTITY, CAM)
    assert err == pytest.approx(9.0)


def test_line_error_matches_geometry_oracle():
    rng = np.random.default_rng(13)
    T = se3_exp(np.array([0.1, 0.05, 0.2, 0.01, -0.02, 0.03]))
    model = MotionModel(T_pp=T)
    for _ in range(30):
        Xs = np.array([rng.uniform(-3, 3), rng.uniform(-1, 1), rng.uniform(4, 20)])
        Xe = Xs + rng.normal(size=3)
        det_s = rng.uniform([0, 0], [W, H])
        det_e = det_s + rng.uniform(-100, 100, size=2)
        if np.allclose(det_s, det_e):
            continue
        m, lm = line_pair(Xs, Xe, T, lid=0, detected=(det_s, det_e))
        got = line_dynamic_error(lm, m.curr, model, CAM)
        # brute-force point-to-line distances
        ps, pe = CAM.project(T.apply(Xs)), CAM.project(T.apply(Xe))
        dvec = det_e - det_s
        nrm = np.linalg.norm(dvec)
        ds = abs((ps[0] - det_s[0]) * dvec[1] - (ps[1] - det_s[1]) * dvec[0]) / nrm
        de = abs((pe[0] - det_s[0]) * dvec[1] - (pe[1] - det_s[1]) * dvec[0]) / nrm
        assert got == pytest.approx(((ds + de) / 2.0) ** 2, rel=1e-9)


def test_line_error_degenerate_projection_excluded():
    back = MotionModel(T_pp=PoseSE3(np.eye(3), np.array([0.0, 0.0, -12.0])))
    m, lm = line_pair(np.array([0.0, 0.0, 5.0]), np.array([1.0, 0.0, 5.0]), PoseSE3.identity(), 0)
    assert line_dynamic_error(lm, m.curr, back, CAM) is None


def test_static_scene_no_dynamic_llgs():
    rng = np.random.default_rng(15)
    T = se3_exp(np.array([0.05, 0.02, 0.3, 0.0, 0.01, 0.0]))
    entries, curr_lines = [], []
    for i in range(12):
        Xs = np.array([rng.uniform(-4, 4), rng.uniform(-1.5, 1.5), rng.uniform(5, 20)])
        Xe = Xs + rng.normal(size=3)
        m, lm = line_pair(Xs, Xe, T, lid=i)
        entries.append((m, lm))
        curr_lines.append(m.curr)
    llgs = build_llgs(curr_lines)
    out = detect_dynamic_llgs(entries, llgs, MotionModel(T_pp=T), CAM)
    assert out.flagged == set()
    assert out.dynamic_line_ids == set()


def test_moving_object_llg_flagged():
    """Moving object A -> B carrying three lines; background stays static."""
    entries, curr_lines = [], []
    # three overlapping object lines displaced ~25 px against the prediction
    for i, (s, e) in enumerate([((300, 150), (360, 160)), ((320, 140), (380, 170)),
                                ((340, 155), (390, 150))]):
        z = 9.0
        Xs = np.array([(s[0] - CAM.cx) * z / CAM.fx, (s[1] - CAM.cy) * z / CAM.fy, z])
        Xe = np.array([(e[0] - CAM.cx) * z / CAM.fx, (e[1] - CAM.cy) * z / CAM.fy, z])
        det = (np.array(s, dtype=float) + [25.0, 5.0], np.array(e, dtype=float) + [25.0, 5.0])
        m, lm = line_pair(Xs, Xe, PoseSE3.identity(), lid=i, detected=det)
        entries.append((m, lm))
        curr_lines.append(m.curr)
    # far-away static lines (their own LLG)
    for i, (s, e) in enumerate([((900, 300), (960, 310)), ((920, 290), (980, 320))], start=10):
        z = 14.0
        Xs = np.array([(s[0] - CAM.cx) * z / CAM.fx, (s[1] - CAM.cy) * z / CAM.fy, z])
        Xe = np.array([(e[0] - CAM.cx) * z / CAM.fx, (e[1] - CAM.cy) * z / CAM.fy, z])
        m, lm = line_pair(Xs, Xe, PoseSE3.identity(), lid=i)
        entries.append((m, lm))
        curr_lines.append(m.curr)
    llgs = build_llgs(curr_lines)
    out = detect_dynamic_llgs(entries, llgs, IDENTITY, CAM)
    flagged_members = {llgs[g].members for g in out.flagged}
    assert flagged_members == {(0, 1, 2)}
    assert out.dynamic_line_ids == {0, 1, 2}


def test_rho_infinite_flags_nothing():
    entries, curr_lines = [], []
    for i in range(4):
        Xs = np.array([-1.0 + i, 0.0, 8.0])
        Xe = Xs + [1.0, 0.3, 0.5]
        det_s = CAM.project(Xs) + [40.0, 0.0]
        det_e = CAM.project(Xe) + [40.0, 0.0]
        m, lm = line_pair(Xs, Xe, PoseSE3.identity(), lid=i, detected=(det_s, det_e))
        entries.append((m, lm))
        curr_lines.append(m.curr)
    llgs = build_llgs(curr_lines)
    out = detect_dynamic_llgs(entries, llgs, IDENTITY, CAM, rho=np.inf)
    assert out.flagged == set()


def test_llg_sum_mode_differs_from_mean():
    entries, curr_lines = [], []
    for i in range(3):
        Xs = np.array([-1.0 + i * 0.5, 0.0, 8.0])
        Xe = Xs + [1.0, 0.1, 0.0]
        det_s = CAM.project(Xs) + [0.0, 1.5]
        det_e = CAM.project(Xe) + [0.0, 1.5]
        m, lm = line_pair(Xs, Xe, PoseSE3.identity(), lid=i, detected=(det_s, det_e))
        entries.append((m, lm))
        curr_lines.append(m.curr)
    llgs = build_llgs(curr_lines)
    assert len(llgs) == 1
    # per-line error is 1.5^2 = 2.25: mean stays under rho=4, sum exceeds it
    mean_mode = detect_dynamic_llgs(entries, llgs, IDENTITY, CAM, rho=4.0)
    sum_mode = detect_dynamic_llgs(entries, llgs, IDENTITY, CAM, rho=4.0, use_sum=True)
    assert mean_mode.flagged == set()
    assert sum_mode.flagged == {0}
