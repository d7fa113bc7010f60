"""Dynamic-feature rejection driven by a constant-velocity motion model.

Points: each tracked match is triangulated in the previous frame, pushed
through the inter-frame motion model, and reprojected; the squared pixel
distance to the detection is averaged per 64x48 grid cell, and cells over
threshold are flagged together with their 8-neighborhoods.

Lines: the same prediction is applied to both 3-D endpoints and the squared
distance of the predicted endpoints to the detected infinite line is averaged
per current-frame local line group; a group over threshold marks all its
member lines dynamic.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .association import POINT_GRID_COLS, POINT_GRID_ROWS, LineMatch, PointMatch
from .geometry import Landmark3D, PointFeature2D, PoseSE3, StereoCamera, triangulate_point
from .grids import cell_of

DEFAULT_TAU_PT = 4.0
DEFAULT_RHO = 4.0
MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class MotionModel:
    """Constant-velocity prior: `T_pp` maps previous-frame camera coordinates to
    a prediction of current-frame camera coordinates."""

    T_pp: PoseSE3


@dataclass
class DynamicGridMap:
    """Boolean dynamic mask over the point grid plus per-cell mean squared
    prediction error (NaN where no feature landed)."""

    mask: np.ndarray          # (rows, cols) bool, 8-neighborhood dilated
    mean_error: np.ndarray    # (rows, cols) float
    over_threshold: np.ndarray
    width: int
    height: int

    def is_dynamic(self, u: float, v: float) -> bool:
        c = int(cell_of(u, self.mask.shape[1], self.width))
        r = int(cell_of(v, self.mask.shape[0], self.height))
        return bool(self.mask[r, c])

    def flags_for(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Vectorized is_dynamic for coordinate arrays."""
        cc = cell_of(np.asarray(u), self.mask.shape[1], self.width)
        rr = cell_of(np.asarray(v), self.mask.shape[0], self.height)
        return self.mask[rr, cc]


@dataclass
class DynamicLLGSet:
    flagged: set                 # indices into the llgs_curr list
    errors: dict                 # llg index -> mean (or summed) squared distance
    dynamic_line_ids: set        # ids of all member lines of flagged groups


def predict_point(prev_feat: PointFeature2D, model: MotionModel, cam: StereoCamera,
                  point_cam_prev: Optional[np.ndarray] = None,
                  min_disparity: float = 1.0) -> Optional[np.ndarray]:
    """Predicted current-frame pixel of a previously observed feature, or None
    when the feature has no usable depth or lands behind the camera."""
    X = point_cam_prev
    if X is None:
        X = triangulate_point(prev_feat, cam, min_disparity)
    if X is None:
        return None
    Xc = model.T_pp.apply(X)
    if Xc[2] <= MIN_DEPTH:
        return None
    return cam.project(Xc)


def _dilate8(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    rows, cols = mask.shape
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            src = mask[max(0, -dr):rows - max(0, dr), max(0, -dc):cols - max(0, dc)]
            out[max(0, dr):rows - max(0, -dr), max(0, dc):cols - max(0, -dc)] |= src
    return out


def detect_dynamic_grids(matches: Sequence[PointMatch], model: MotionModel,
                         cam: StereoCamera, tau_pt: float = DEFAULT_TAU_PT,
                         grid=(POINT_GRID_COLS, POINT_GRID_ROWS),
                         min_disparity: float = 1.0) -> DynamicGridMap:
    """Flag grid cells whose mean squared prediction error exceeds tau_pt,
    plus their 8-neighborhoods (clipped at the image border)."""
    cols, rows = grid
    err_sum = np.zeros((rows, cols))
    err_cnt = np.zeros((rows, cols), dtype=np.int64)
    if matches:
        prev_u = np.array([m.prev.u for m in matches])
        prev_v = np.array([m.prev.v for m in matches])
        disp = np.array([m.prev.disparity if m.prev.disparity is not None else 0.0
                         for m in matches])
        curr_u = np.array([m.curr.u for m in matches])
        curr_v = np.array([m.curr.v for m in matches])
        ok = disp > min_disparity
        z = np.where(ok, cam.fx * cam.baseline / np.where(ok, disp, 1.0), 1.0)
        X = np.stack([(prev_u - cam.cx) * z / cam.fx,
                      (prev_v - cam.cy) * z / cam.fy, z], axis=1)
        Xc = model.T_pp.apply(X)
        ok &= Xc[:, 2] > MIN_DEPTH
        zs = np.where(ok, Xc[:, 2], 1.0)
        pu = cam.fx * Xc[:, 0] / zs + cam.cx
        pv = cam.fy * Xc[:, 1] / zs + cam.cy
        d2 = (pu - curr_u) ** 2 + (pv - curr_v) ** 2
        cc = cell_of(curr_u, cols, cam.width)
        rr = cell_of(curr_v, rows, cam.height)
        np.add.at(err_sum, (rr[ok], cc[ok]), d2[ok])
        np.add.at(err_cnt, (rr[ok], cc[ok]), 1)
    with np.errstate(invalid="ignore"):
        mean = np.where(err_cnt > 0, err_sum / np.maximum(err_cnt, 1), np.nan)
    over = np.where(err_cnt > 0, mean > tau_pt, False)
    return DynamicGridMap(mask=_dilate8(over), mean_error=mean, over_threshold=over,
                          width=cam.width, height=cam.height)


def line_dynamic_error(prev_line_cam: Landmark3D, curr_line, model: MotionModel,
                       cam: StereoCamera) -> Optional[float]:
    """Squared dynamic distance of one line match: the two predicted endpoints'
    perpendicular distances to the detected infinite line are averaged, then
    squared.  None when the prediction degenerates (behind camera or zero
    projected length)."""
    ps = model.T_pp.apply(prev_line_cam.start)
    pe = model.T_pp.apply(prev_line_cam.end)
    if ps[2] <= MIN_DEPTH or pe[2] <= MIN_DEPTH:
        return None
    us = cam.project(ps)
    ue = cam.project(pe)
    if np.allclose(us, ue):
        return None
    d = curr_line.end - curr_line.start
    norm = np.linalg.norm(d)
    if norm <= 0.0:
        return None
    ds = abs((us[0] - curr_line.start[0]) * d[1] - (us[1] - curr_line.start[1]) * d[0]) / norm
    de = abs((ue[0] - curr_line.start[0]) * d[1] - (ue[1] - curr_line.start[1]) * d[0]) / norm
    return float(((ds + de) / 2.0) ** 2)


def _line_errors_batch(entries, model: MotionModel, cam: StereoCamera):
    """Vectorized line_dynamic_error over (match, prev 3-D line) pairs;
    None entries mark degenerate predictions."""
    if not entries:
        return []
    S = np.array([lm.start for _, lm in entries])
    E = np.array([lm.end for _, lm in entries])
    Sp = model.T_pp.apply(S)
    Ep = model.T_pp.apply(E)
    ok = (Sp[:, 2] > MIN_DEPTH) & (Ep[:, 2] > MIN_DEPTH)
    zs = np.where(ok, Sp[:, 2], 1.0)
    ze = np.where(ok, Ep[:, 2], 1.0)
    us = np.stack([cam.fx * Sp[:, 0] / zs + cam.cx,
                   cam.fy * Sp[:, 1] / zs + cam.cy], axis=1)
    ue = np.stack([cam.fx * Ep[:, 0] / ze + cam.cx,
                   cam.fy * Ep[:, 1] / ze + cam.cy], axis=1)
    ok &= ~np.all(np.isclose(us, ue), axis=1)
    det_s = np.array([m.curr.start for m, _ in entries])
    d = np.array([m.curr.end - m.curr.start for m, _ in entries])
    norm = np.linalg.norm(d, axis=1)
    ok &= norm > 0.0
    nrm = np.where(norm > 0.0, norm, 1.0)
    ds = np.abs((us[:, 0] - det_s[:, 0]) * d[:, 1]
                - (us[:, 1] - det_s[:, 1]) * d[:, 0]) / nrm
    de = np.abs((ue[:, 0] - det_s[:, 0]) * d[:, 1]
                - (ue[:, 1] - det_s[:, 1]) * d[:, 0]) / nrm
    err = ((ds + de) / 2.0) ** 2
    return [float(e) if good else None for e, good in zip(err, ok)]


def detect_dynamic_llgs(entries: Sequence[tuple], llgs_curr: Sequence,
                        model: MotionModel, cam: StereoCamera,
                        rho: float = DEFAULT_RHO, use_sum: bool = False) -> DynamicLLGSet:
    """Flag current-frame LLGs whose member squared dynamic distance exceeds rho.

    `entries` pairs each LineMatch with the previous-frame 3-D line (camera
    frame).  By default the member errors are averaged; `use_sum` switches to
    plain accumulation for fidelity experiments.
    """
    group_of = {}
    for gi, g in enumerate(llgs_curr):
        for lid in g.members:
            group_of[lid] = gi
    sums: dict = {}
    counts: dict = {}
    errors_per_entry = _line_errors_batch(entries, model, cam)
    for (m, _), e in zip(entries, errors_per_entry):
        if e is None:
            continue
        gi = group_of.get(m.curr.id)
        if gi is None:
            continue
        sums[gi] = sums.get(gi, 0.0) + e
        counts[gi] = counts.get(gi, 0) + 1
    errors = {}
    flagged = set()
    dyn_ids = set()
    for gi, s in sums.items():
        val = s if use_sum else s / counts[gi]
        errors[gi] = val
        if val > rho:
            flagged.add(gi)
            dyn_ids.update(llgs_curr[gi].members)
    return DynamicLLGSet(flagged=flagged, errors=errors, dynamic_line_ids=dyn_ids)
