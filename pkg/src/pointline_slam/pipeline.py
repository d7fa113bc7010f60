"""End-to-end tracking / local-mapping / loop-closure pipeline.

Per frame: build features, match to the previous frame by id, run the two
mismatch filters, reject dynamic features with the constant-velocity motion
model, estimate the pose by point+line least squares, then decide keyframing
with the descriptor threshold rule.  Keyframes enter the map, trigger local
bundle adjustment, and are probed for loop closures; the final trajectory is
re-anchored through each frame's reference keyframe so keyframe corrections
propagate to every frame.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adjustment import BAParams
from .association import (
    build_llgs,
    filter_line_matches,
    filter_point_matches,
    line_match,
    point_matches,
)
from .config import RunConfig
from .dynamics import MotionModel, detect_dynamic_grids, detect_dynamic_llgs
from .estimation import LMParams, TrackingLost, estimate_pose
from .geometry import (
    LineFeature2D,
    PointFeature2D,
    PoseSE3,
    StereoCamera,
    triangulate_line,
    triangulate_point,
)
from .ggs import compute_ggs, ggs_dissimilarity, is_new_keyframe, keyframe_threshold
from .loopclosure import LoopConfig, correct_loop, find_loop_candidates, verify_candidate
from .mapping import LocalMap
from .sequence_io import FrameInput


@dataclass
class FrameRecord:
    index: int
    timestamp: float
    ref_kf: int
    rel_to_kf: PoseSE3
    is_keyframe: bool
    tracking_ok: bool = True


@dataclass
class SlamResult:
    trajectory: list                 # (timestamp, PoseSE3) per frame
    keyframes: list                  # (kf_id, frame_index, timestamp)
    loop_events: list                # LoopCandidate (verified, accepted or not)
    dynamics_log: list               # (frame, kind, ident, value, flagged)
    timings: list                    # (stage, frame, millis)
    tracking_failures: int
    map: LocalMap


@dataclass
class _PrevFrame:
    index: int
    pose: PoseSE3
    points: dict                     # id -> PointFeature2D
    lines: dict                      # id -> (LineFeature2D, right (2,2) or None)
    points_cam: dict = field(default_factory=dict)   # id -> (3,) camera frame
    lines_cam: dict = field(default_factory=dict)    # id -> Landmark3D camera frame

    def point_cam(self, fid, cam, min_disparity):
        if fid not in self.points_cam:
            self.points_cam[fid] = triangulate_point(self.points[fid], cam,
                                                     min_disparity)
        return self.points_cam[fid]

    def line_cam(self, fid, cam, min_disparity):
        if fid not in self.lines_cam:
            feat, right = self.lines[fid]
            if right is None:
                self.lines_cam[fid] = None
            else:
                self.lines_cam[fid] = triangulate_line(
                    feat, LineFeature2D(right[0], right[1]), cam, min_disparity)
        return self.lines_cam[fid]


class SlamSystem:
    def __init__(self, cam: StereoCamera, config: Optional[RunConfig] = None):
        self.cam = cam
        self.config = config or RunConfig()
        c = self.config
        self.map = LocalMap(cam, covis_min=c.covis_min_shared,
                            min_disparity=c.min_disparity)
        self.records: list = []
        self.loop_events: list = []
        self.dynamics_log: list = []
        self.timings: list = []
        self.tracking_failures = 0
        self.prev: Optional[_PrevFrame] = None
        self.motion: Optional[PoseSE3] = None       # prev-cam -> curr-cam map
        self._kf_tracked_pose: PoseSE3 = PoseSE3.identity()
        self.last_kf_id: Optional[int] = None
        self.last_kf_ggs = None
        self._scalar_pkf = 0.0
        self._scalar_pkf_next: Optional[float] = None
        self._scalar_ppkf_next = 0.0
        self._frames_since_kf = 0
        self._lm_params = LMParams(
            lambda0=c.lm_lambda0, lambda_up=c.lm_lambda_up,
            lambda_down=c.lm_lambda_down, max_iters=c.lm_max_iters,
            step_tol=c.lm_step_tol, cost_tol=c.lm_cost_tol,
            huber_delta=c.huber_delta_px, edge_margin=c.edge_margin_px)
        self._ba_params = BAParams(
            max_iters=c.ba_max_iters, huber_delta=c.huber_delta_px,
            edge_margin=c.edge_margin_px)
        self._loop_config = LoopConfig(
            exclusion_window=c.exclusion_window,
            sim_threshold_factor=c.sim_threshold_factor,
            neighbor_factor=c.neighbor_factor, lc_alpha=c.lc_alpha,
            lc_rat_threshold=c.lc_rat_threshold, inlier_min=c.inlier_min,
            inlier_px=c.lc_inlier_px, min_common=c.lc_min_common,
            max_drift_frac=c.max_drift_frac, min_drift_floor=c.min_drift_floor_m,
            strict_paper_lcd=c.strict_paper_lcd)

    # ------------------------------------------------------------- helpers

    def _features_of(self, frame: FrameInput):
        pts = {}
        for p in frame.points:
            pts[p.id] = PointFeature2D(u=p.uL, v=p.vL, disparity=p.disparity, id=p.id)
        lns = {}
        if self.config.enable_lines:
            for l in frame.lines:
                try:
                    feat = LineFeature2D(l.left[0], l.left[1], id=l.id)
                except ValueError:
                    continue
                right = l.right if l.right is not None else None
                lns[l.id] = (feat, right)
        return pts, lns

    def _kf_insert_payload(self, pts, lns, drop_pt_ids, drop_ln_ids):
        point_feats = {fid: (f.u, f.v, f.disparity)
                       for fid, f in pts.items() if fid not in drop_pt_ids}
        line_feats = {}
        for fid, (f, right) in lns.items():
            if fid in drop_ln_ids:
                continue
            rs = right[0] if right is not None else None
            re = right[1] if right is not None else None
            line_feats[fid] = (f.start, f.end, rs, re)
        return point_feats, line_feats

    def _pose_of_record(self, rec: FrameRecord) -> PoseSE3:
        return self.map.keyframes[rec.ref_kf].pose.compose(rec.rel_to_kf)

    # ------------------------------------------------------------- pipeline

    def process_frame(self, frame: FrameInput) -> FrameRecord:
        c = self.config
        cam = self.cam
        stages = {}

        t0 = time.perf_counter()
        ggs = compute_ggs(frame.image, c.ggs_scale) if frame.image is not None else None
        stages["ggs"] = time.perf_counter() - t0

        pts, lns = self._features_of(frame)

        if self.prev is None:
            pose = PoseSE3.identity()
            self._insert_keyframe(frame, pose, pts, lns, set(), set(), ggs, scalar=0.0)
            self._kf_tracked_pose = pose
            rec = FrameRecord(index=frame.index, timestamp=frame.timestamp,
                              ref_kf=frame.index, rel_to_kf=PoseSE3.identity(),
                              is_keyframe=True)
            self.records.append(rec)
            self.prev = _PrevFrame(index=frame.index, pose=pose, points=pts, lines=lns)
            self._flush_timings(frame.index, stages)
            return rec

        # ---------------- association + filters
        t0 = time.perf_counter()
        common_pts = sorted(set(self.prev.points) & set(pts))
        p_matches = point_matches([self.prev.points[i] for i in common_pts],
                                  [pts[i] for i in common_pts],
                                  cam.width, cam.height,
                                  grid=(c.point_grid_cols, c.point_grid_rows))
        common_lns = sorted(set(self.prev.lines) & set(lns))
        l_matches = [line_match(self.prev.lines[i][0], lns[i][0]) for i in common_lns]
        stages["match"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        p_inl, p_out = filter_point_matches(
            p_matches, alpha=c.alpha_point, eps_px2=c.point_filter_eps_px2,
            singleton=c.point_filter_singleton)
        if l_matches:
            llgs_prev = build_llgs([f for f, _ in self.prev.lines.values()])
            l_inl, l_out = filter_line_matches(
                l_matches, llgs_prev, ratio=c.line_filter_ratio,
                angle_floor=c.line_angle_floor_rad, dist_floor=c.line_dist_floor_px)
        else:
            l_inl, l_out = [], []
        stages["filter"] = time.perf_counter() - t0

        # ---------------- dynamic rejection
        t0 = time.perf_counter()
        dyn_pt_ids, dyn_ln_ids = set(), set()
        if c.enable_dynamics and self.motion is not None:
            model = MotionModel(T_pp=self.motion)
            grid_map = detect_dynamic_grids(p_inl, model, cam, tau_pt=c.tau_pt,
                                            grid=(c.point_grid_cols, c.point_grid_rows),
                                            min_disparity=c.min_disparity)
            if p_inl:
                flags = grid_map.flags_for(np.array([m.curr.u for m in p_inl]),
                                           np.array([m.curr.v for m in p_inl]))
                for m, flagged in zip(p_inl, flags):
                    if flagged:
                        dyn_pt_ids.add(m.curr.id)
                    self.dynamics_log.append((frame.index, "point", m.curr.id, 0.0,
                                              bool(flagged)))
            rs, cs = np.nonzero(grid_map.over_threshold)
            for r, col in zip(rs, cs):
                self.dynamics_log.append((frame.index, "grid", f"{r}:{col}",
                                          float(grid_map.mean_error[r, col]), True))
            if l_inl:
                entries = []
                for m in l_inl:
                    lm = self.prev.line_cam(m.prev.id, cam, c.min_disparity)
                    if lm is not None:
                        entries.append((m, lm))
                llgs_curr = build_llgs([m.curr for m in l_inl])
                dyn = detect_dynamic_llgs(entries, llgs_curr, model, cam,
                                          rho=c.rho, use_sum=c.dyn_llg_use_sum)
                dyn_ln_ids = dyn.dynamic_line_ids
                for gi, err in sorted(dyn.errors.items()):
                    self.dynamics_log.append((frame.index, "llg", str(gi),
                                              float(err), gi in dyn.flagged))
                for m in l_inl:
                    self.dynamics_log.append((frame.index, "line", m.curr.id, 0.0,
                                              m.curr.id in dyn_ln_ids))
        stages["dynamics"] = time.perf_counter() - t0

        # ---------------- pose estimation
        t0 = time.perf_counter()
        Xp_cam, up = [], []
        for m in p_inl:
            if m.curr.id in dyn_pt_ids:
                continue
            X_c = self.prev.point_cam(m.prev.id, cam, c.min_disparity)
            if X_c is None:
                continue
            Xp_cam.append(X_c)
            up.append([m.curr.u, m.curr.v])
        Xp = (self.prev.pose.apply(np.array(Xp_cam)) if Xp_cam else [])
        Xs, Xe, ds, de = [], [], [], []
        for m in l_inl:
            if m.curr.id in dyn_ln_ids:
                continue
            lm = self.prev.line_cam(m.prev.id, cam, c.min_disparity)
            if lm is None:
                continue
            Xs.append(self.prev.pose.apply(lm.start))
            Xe.append(self.prev.pose.apply(lm.end))
            ds.append(m.curr.start)
            de.append(m.curr.end)

        init = (self.prev.pose.compose(self.motion.inverse())
                if self.motion is not None else self.prev.pose)
        tracking_ok = True
        try:
            est = estimate_pose(
                np.array(Xp).reshape(-1, 3), np.array(up).reshape(-1, 2),
                np.array(Xs).reshape(-1, 3), np.array(Xe).reshape(-1, 3),
                np.array(ds).reshape(-1, 2), np.array(de).reshape(-1, 2),
                init, cam, self._lm_params)
            pose = est.pose
        except TrackingLost:
            pose = init
            tracking_ok = False
            self.tracking_failures += 1
        stages["pose"] = time.perf_counter() - t0

        self.motion = pose.inverse().compose(self.prev.pose)

        # ---------------- keyframe decision
        t0 = time.perf_counter()
        self._frames_since_kf += 1
        make_kf = False
        scalar = None
        if ggs is not None and self.last_kf_ggs is not None:
            scalar = ggs_dissimilarity(ggs, self.last_kf_ggs)
            if self._scalar_pkf_next is None:
                self._scalar_pkf_next = scalar
            th = keyframe_threshold(self._scalar_pkf, self._scalar_pkf_next,
                                    self._scalar_ppkf_next, coeff=c.kf_coeff)
            make_kf = is_new_keyframe(scalar, th)
        else:
            make_kf = self._frames_since_kf >= c.kf_fallback_interval

        if make_kf:
            drop_pts = dyn_pt_ids | {m.curr.id for m in p_out}
            drop_lns = dyn_ln_ids | {m.curr.id for m in l_out}
            self._insert_keyframe(frame, pose, pts, lns, drop_pts, drop_lns,
                                  ggs, scalar=scalar if scalar is not None else 0.0)
            self._kf_tracked_pose = pose
        stages["keyframe"] = time.perf_counter() - t0

        # records anchor to the keyframe through the *tracked* pose chain, so
        # BA / loop corrections of the keyframe propagate rigidly at finalize
        ref = frame.index if make_kf else self.last_kf_id
        rel = (PoseSE3.identity() if make_kf
               else self._kf_tracked_pose.inverse().compose(pose))
        rec = FrameRecord(index=frame.index, timestamp=frame.timestamp, ref_kf=ref,
                          rel_to_kf=rel, is_keyframe=make_kf, tracking_ok=tracking_ok)
        self.records.append(rec)
        self.prev = _PrevFrame(index=frame.index, pose=pose, points=pts, lines=lns)
        self._flush_timings(frame.index, stages)
        return rec

    def _insert_keyframe(self, frame, pose, pts, lns, drop_pts, drop_lns, ggs, scalar):
        c = self.config
        point_feats, line_feats = self._kf_insert_payload(pts, lns, drop_pts, drop_lns)
        self.map.insert_keyframe(frame.index, frame.index, frame.timestamp, pose,
                                 ggs=ggs, point_feats=point_feats,
                                 line_feats=line_feats,
                                 attach_gate_px=c.kf_attach_gate_px or None)
        self.map.local_bundle_adjust(
            frame.index, self._ba_params,
            max_neighbors=c.ba_local_max_neighbors or None)
        if c.enable_loop and ggs is not None:
            for cand in find_loop_candidates(self.map, frame.index, self._loop_config):
                out = verify_candidate(self.map, cand, self._loop_config,
                                       self._lm_params)
                self.loop_events.append(out)
                if out.accepted:
                    correct_loop(self.map, out, self._loop_config,
                                 covis_share=c.pgo_covis_share)
                    break
        # keyframe scalar bookkeeping for the threshold rule
        self._scalar_ppkf_next = (self._scalar_pkf_next
                                  if self._scalar_pkf_next is not None else 0.0)
        self._scalar_pkf = scalar
        self._scalar_pkf_next = None
        self._frames_since_kf = 0
        self.last_kf_id = frame.index
        self.last_kf_ggs = ggs

    def _flush_timings(self, frame_index, stages):
        for stage, seconds in stages.items():
            self.timings.append((stage, frame_index, seconds * 1000.0))

    # ------------------------------------------------------------- results

    def finalize(self, run_global_ba: bool = True) -> SlamResult:
        t0 = time.perf_counter()
        if run_global_ba and len(self.map.keyframes) >= 2:
            self.map.bundle_adjust_all(self._ba_params)
        self.timings.append(("global_ba", -1, (time.perf_counter() - t0) * 1000.0))
        trajectory = [(r.timestamp, self._pose_of_record(r)) for r in self.records]
        keyframes = [(k, kf.frame_index, kf.timestamp)
                     for k, kf in sorted(self.map.keyframes.items())]
        return SlamResult(trajectory=trajectory, keyframes=keyframes,
                          loop_events=self.loop_events,
                          dynamics_log=self.dynamics_log, timings=self.timings,
                          tracking_failures=self.tracking_failures, map=self.map)


def run_sequence(seq, config: Optional[RunConfig] = None) -> SlamResult:
    """Track every frame of a SequenceSource (or any FrameInput iterable)."""
    cam = getattr(seq, "cam", None)
    if cam is None:
        raise ValueError("sequence must carry calibration (SequenceSource)")
    system = SlamSystem(cam, config)
    for frame in seq:
        system.process_frame(frame)
    return system.finalize()
