"""Keyframe map: covisibility bookkeeping, landmark creation, local BA.

The map is a single-writer resource: the tracking loop reads pose snapshots,
while keyframe insertion, bundle adjustment, and loop correction mutate it
sequentially.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adjustment import BAParams, BAProblem, BAResult, solve_ba
from .geometry import (
    LineFeature2D,
    PointFeature2D,
    PoseSE3,
    StereoCamera,
    triangulate_line,
    triangulate_point,
)

COVIS_MIN_SHARED = 20


@dataclass
class KeyFrame:
    kf_id: int
    frame_index: int
    timestamp: float
    pose: PoseSE3                       # world-from-camera, kept in sync with BA
    ggs: Optional[object] = None
    point_obs: dict = field(default_factory=dict)   # lm id -> (u, v, disparity)
    line_obs: dict = field(default_factory=dict)    # lm id -> (det_s, det_e)

    def n_observations(self) -> int:
        return len(self.point_obs) + len(self.line_obs)


class CovisibilityGraph:
    """Keyframe nodes with edges weighted by exact shared-landmark counts;
    an edge exists only at or above `min_shared`."""

    def __init__(self, min_shared: int = COVIS_MIN_SHARED):
        self.min_shared = min_shared
        self.counts: dict = {}          # (a, b) a < b -> shared landmark count

    def set_count(self, a: int, b: int, count: int):
        key = (min(a, b), max(a, b))
        if count > 0:
            self.counts[key] = count
        else:
            self.counts.pop(key, None)

    def shared(self, a: int, b: int) -> int:
        return self.counts.get((min(a, b), max(a, b)), 0)

    def has_edge(self, a: int, b: int) -> bool:
        return self.shared(a, b) >= self.min_shared

    def weight(self, a: int, b: int) -> int:
        return self.shared(a, b) if self.has_edge(a, b) else 0

    def neighbors(self, kf_id: int) -> list:
        out = []
        for (a, b), c in self.counts.items():
            if c < self.min_shared:
                continue
            if a == kf_id:
                out.append((b, c))
            elif b == kf_id:
                out.append((a, c))
        out.sort(key=lambda t: (-t[1], t[0]))
        return [k for k, _ in out]


class LocalMap:
    def __init__(self, cam: StereoCamera, covis_min: int = COVIS_MIN_SHARED,
                 min_disparity: float = 1.0):
        self.cam = cam
        self.min_disparity = min_disparity
        self.keyframes: dict = {}       # kf_id -> KeyFrame (insertion ordered)
        self.points: dict = {}          # lm id -> (3,) world position
        self.lines: dict = {}           # lm id -> (2, 3) world endpoints
        self.point_observers: dict = {}
        self.line_observers: dict = {}
        self.graph = CovisibilityGraph(covis_min)

    # ------------------------------------------------------------- insertion

    def _reprojects_within(self, X_w, u, v, pose_cw, gate_px) -> bool:
        X_c = pose_cw.apply(X_w)
        if X_c[2] <= 1e-6:
            return False
        proj = self.cam.project(X_c)
        return (proj[0] - u) ** 2 + (proj[1] - v) ** 2 <= gate_px ** 2

    def insert_keyframe(self, kf_id: int, frame_index: int, timestamp: float,
                        pose: PoseSE3, ggs=None,
                        point_feats: Optional[dict] = None,
                        line_feats: Optional[dict] = None,
                        attach_gate_px: Optional[float] = None) -> KeyFrame:
        """Add a keyframe: extend feature-landmark associations, triangulate
        new landmarks, and recompute covisibility edges for the new node.

        `point_feats` maps feature id -> (u, v, disparity-or-None);
        `line_feats` maps feature id -> (left start, left end, right start,
        right end) with the right endpoints possibly None.

        With `attach_gate_px` set, an observation only attaches to an existing
        landmark when the landmark reprojects within that many pixels; this
        keeps stale ids (for instance a moving feature that escaped the
        dynamic filter in an earlier frame) from chaining inconsistent
        constraints through bundle adjustment.
        """
        if kf_id in self.keyframes:
            raise ValueError(f"keyframe {kf_id} already inserted")
        kf = KeyFrame(kf_id=kf_id, frame_index=frame_index, timestamp=timestamp,
                      pose=pose, ggs=ggs)
        pose_cw = pose.inverse()
        for fid, (u, v, disp) in (point_feats or {}).items():
            if fid not in self.points:
                X_c = triangulate_point(PointFeature2D(u, v, disp), self.cam,
                                        self.min_disparity)
                if X_c is None:
                    continue
                self.points[fid] = pose.apply(X_c)
                self.point_observers[fid] = set()
            elif attach_gate_px is not None and not self._reprojects_within(
                    self.points[fid], u, v, pose_cw, attach_gate_px):
                continue
            kf.point_obs[fid] = (float(u), float(v), disp)
            self.point_observers[fid].add(kf_id)
        for fid, ends in (line_feats or {}).items():
            ls, le, rs, re = ends
            if fid not in self.lines:
                if rs is None or re is None:
                    continue
                lm = triangulate_line(LineFeature2D(ls, le),
                                      LineFeature2D(rs, re),
                                      self.cam, self.min_disparity)
                if lm is None:
                    continue
                self.lines[fid] = np.stack([pose.apply(lm.start), pose.apply(lm.end)])
                self.line_observers[fid] = set()
            elif attach_gate_px is not None:
                endpoints = self.lines[fid]
                if not (self._reprojects_within(endpoints[0], ls[0], ls[1],
                                                pose_cw, attach_gate_px)
                        and self._reprojects_within(endpoints[1], le[0], le[1],
                                                    pose_cw, attach_gate_px)):
                    continue
            kf.line_obs[fid] = (np.asarray(ls, dtype=np.float64),
                                np.asarray(le, dtype=np.float64))
            self.line_observers[fid].add(kf_id)
        self.keyframes[kf_id] = kf
        self._update_covisibility(kf_id)
        return kf

    def _update_covisibility(self, kf_id: int):
        kf = self.keyframes[kf_id]
        pts = set(kf.point_obs)
        lns = set(kf.line_obs)
        for other_id, other in self.keyframes.items():
            if other_id == kf_id:
                continue
            shared = len(pts & set(other.point_obs)) + len(lns & set(other.line_obs))
            self.graph.set_count(kf_id, other_id, shared)

    def recount_shared(self, a: int, b: int) -> int:
        """Brute-force shared-landmark recount from the observation lists."""
        ka, kb = self.keyframes[a], self.keyframes[b]
        return (len(set(ka.point_obs) & set(kb.point_obs))
                + len(set(ka.line_obs) & set(kb.line_obs)))

    def prune_dangling(self):
        """Drop landmarks that no keyframe observes (never one with >= 1)."""
        for fid in [f for f, obs in self.point_observers.items() if not obs]:
            del self.points[fid]
            del self.point_observers[fid]
        for fid in [f for f, obs in self.line_observers.items() if not obs]:
            del self.lines[fid]
            del self.line_observers[fid]

    # ------------------------------------------------------------- adjustment

    def _build_problem(self, kf_ids: list, gauge: int) -> tuple:
        kf_ids = list(kf_ids)
        kf_index = {k: i for i, k in enumerate(kf_ids)}
        in_set = set(kf_ids)
        pt_ids = sorted({fid for k in kf_ids
                         for fid in self.keyframes[k].point_obs if fid in self.points})
        ln_ids = sorted({fid for k in kf_ids
                         for fid in self.keyframes[k].line_obs if fid in self.lines})
        pt_index = {f: i for i, f in enumerate(pt_ids)}
        ln_index = {f: i for i, f in enumerate(ln_ids)}
        problem = BAProblem(
            cam=self.cam,
            poses=[self.keyframes[k].pose for k in kf_ids],
            fixed={kf_index[gauge]},
            points=np.array([self.points[f] for f in pt_ids]).reshape(-1, 3),
            lines=np.array([self.lines[f] for f in ln_ids]).reshape(-1, 2, 3))
        for k in kf_ids:
            kf = self.keyframes[k]
            for fid, (u, v, _) in kf.point_obs.items():
                if fid in pt_index:
                    problem.point_obs.append((kf_index[k], pt_index[fid], u, v))
            for fid, (s, e) in kf.line_obs.items():
                if fid in ln_index:
                    problem.line_obs.append((kf_index[k], ln_index[fid], s, e))
        assert gauge in in_set
        return problem, kf_ids, pt_ids, ln_ids

    def _write_back(self, result: BAResult, kf_ids, pt_ids, ln_ids):
        for i, k in enumerate(kf_ids):
            self.keyframes[k].pose = result.poses[i]
        for i, f in enumerate(pt_ids):
            self.points[f] = result.points[i]
        for i, f in enumerate(ln_ids):
            self.lines[f] = result.lines[i]

    def local_bundle_adjust(self, anchor_id: int,
                            params: Optional[BAParams] = None,
                            max_neighbors: Optional[int] = None) -> Optional[BAResult]:
        """Optimize the anchor, its covisibility neighborhood, and their
        landmarks; the oldest keyframe in the neighborhood is held fixed.
        Returns None when fewer than two keyframes are covisible."""
        neighbors = self.graph.neighbors(anchor_id)
        if max_neighbors is not None:
            neighbors = neighbors[:max_neighbors]
        kf_ids = sorted({anchor_id, *neighbors})
        if len(kf_ids) < 2:
            return None
        gauge = min(kf_ids)
        problem, kf_ids, pt_ids, ln_ids = self._build_problem(kf_ids, gauge)
        result = solve_ba(problem, params)
        if not result.skipped:
            self._write_back(result, kf_ids, pt_ids, ln_ids)
        return result

    def bundle_adjust_all(self, params: Optional[BAParams] = None) -> Optional[BAResult]:
        """Full BA over every keyframe and landmark; first keyframe fixed."""
        kf_ids = sorted(self.keyframes)
        if len(kf_ids) < 2:
            return None
        problem, kf_ids, pt_ids, ln_ids = self._build_problem(kf_ids, kf_ids[0])
        result = solve_ba(problem, params)
        if not result.skipped:
            self._write_back(result, kf_ids, pt_ids, ln_ids)
        return result

    # ------------------------------------------------------------- export

    def dump(self) -> str:
        """Text map dump: keyframes with row-major pose matrices, then
        landmarks; used for golden-file regression."""
        lines = []
        for k in sorted(self.keyframes):
            kf = self.keyframes[k]
            vals = np.concatenate([kf.pose.rotation, kf.pose.translation[:, None]],
                                  axis=1).ravel()
            lines.append("KF " + str(k) + " " + " ".join(f"{v:.9f}" for v in vals))
        for f in sorted(self.points):
            p = self.points[f]
            lines.append("LM " + str(f) + " point " + " ".join(f"{v:.9f}" for v in p))
        for f in sorted(self.lines):
            e = self.lines[f].ravel()
            lines.append("LM " + str(f) + " line " + " ".join(f"{v:.9f}" for v in e))
        return "\n".join(lines) + "\n"
