"""Stereo and temporal feature correspondence plus the two mismatch filters.

The point filter works on a 64x48 image grid: for each tracked match it
compares the mean 2-D cross product between the target point and its
grid-mates across the two frames, and rejects matches whose cross-value
change exceeds `alpha` times the grid's mean absolute change plus a small
floor (the floor keeps a perfectly rigid grid, whose changes are all zero,
from rejecting itself).  Cross products are origin-dependent, so the
current-frame coordinates are first mapped back through the best-fit global
2-D rigid motion; without that step any camera translation would dominate
the statistic.

The line filter groups lines into local line groups (LLGs): connected
components under overlap of the circular domains centered on each midpoint
with the segment length as diameter.  A match is kept only when both its
angle change and its midpoint displacement stay within twice the mean of its
group; groups with a single matched member fall back to image-wide means.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .geometry import LineFeature2D, PointFeature2D, StereoCamera
from .grids import cell_of

POINT_GRID_COLS = 64
POINT_GRID_ROWS = 48
DEFAULT_ALPHA = 1.5
DEFAULT_EPS_PX2 = 1.0
DEFAULT_LINE_RATIO = 2.0


@dataclass(frozen=True)
class PointMatch:
    prev: PointFeature2D
    curr: PointFeature2D
    grid_prev: tuple
    grid_curr: tuple
    g_prev: Optional[float] = None
    g_curr: Optional[float] = None


@dataclass(frozen=True)
class LineMatch:
    prev: LineFeature2D
    curr: LineFeature2D
    angle_diff: float
    midpoint_dist: float


@dataclass(frozen=True)
class LocalLineGroup:
    """Connected set of lines whose circular domains chain-overlap.
    `members` are line feature ids; `domains` maps id -> (center, radius)."""

    members: tuple
    domains: dict


def point_match(prev: PointFeature2D, curr: PointFeature2D,
                width: int, height: int,
                grid=(POINT_GRID_COLS, POINT_GRID_ROWS)) -> PointMatch:
    cols, rows = grid
    gp = (int(cell_of(prev.u, cols, width)), int(cell_of(prev.v, rows, height)))
    gc = (int(cell_of(curr.u, cols, width)), int(cell_of(curr.v, rows, height)))
    return PointMatch(prev=prev, curr=curr, grid_prev=gp, grid_curr=gc)


def point_matches(prev_feats: Sequence[PointFeature2D],
                  curr_feats: Sequence[PointFeature2D],
                  width: int, height: int,
                  grid=(POINT_GRID_COLS, POINT_GRID_ROWS)) -> list:
    """Batch constructor: grid cells computed in one vectorized pass."""
    if not prev_feats:
        return []
    cols, rows = grid
    pu = np.array([f.u for f in prev_feats])
    pv = np.array([f.v for f in prev_feats])
    cu = np.array([f.u for f in curr_feats])
    cv = np.array([f.v for f in curr_feats])
    gp_c = cell_of(pu, cols, width)
    gp_r = cell_of(pv, rows, height)
    gc_c = cell_of(cu, cols, width)
    gc_r = cell_of(cv, rows, height)
    return [PointMatch(prev=p, curr=c,
                       grid_prev=(int(gp_c[i]), int(gp_r[i])),
                       grid_curr=(int(gc_c[i]), int(gc_r[i])))
            for i, (p, c) in enumerate(zip(prev_feats, curr_feats))]


def line_match(prev: LineFeature2D, curr: LineFeature2D) -> LineMatch:
    dp = prev.end - prev.start
    dc = curr.end - curr.start
    ang_p = np.arctan2(dp[1], dp[0])
    ang_c = np.arctan2(dc[1], dc[0])
    # detected endpoints may swap, so angles are compared modulo direction sign
    d = abs(ang_p - ang_c) % np.pi
    angle = min(d, np.pi - d)
    dist = float(np.linalg.norm(prev.midpoint - curr.midpoint))
    return LineMatch(prev=prev, curr=curr, angle_diff=float(angle), midpoint_dist=dist)


def match_stereo(left_feats: Sequence[PointFeature2D],
                 right_feats: Sequence[PointFeature2D],
                 cam: Optional[StereoCamera] = None, *,
                 by_id: bool = False,
                 descriptors: Optional[tuple] = None,
                 row_tol: float = 1.0,
                 max_disparity: float = 96.0) -> list:
    """Assign disparities to left features from a row-constrained search.

    With `by_id` the correspondence is taken from matching feature ids
    (synthetic / feature-file mode).  Otherwise candidates within `row_tol`
    rows and [0, max_disparity] pixels of horizontal offset are ranked by
    Hamming distance when `descriptors` = (left_desc, right_desc) uint8
    arrays are given, else by horizontal proximity.  Unmatched features are
    returned with disparity None (kept as 2-D only).
    """
    out = []
    if by_id:
        right_by_id = {f.id: f for f in right_feats}
        for f in left_feats:
            r = right_by_id.get(f.id)
            if r is not None and 0.0 <= f.u - r.u <= max_disparity:
                out.append(replace(f, disparity=f.u - r.u))
            else:
                out.append(replace(f, disparity=None))
        return out

    ru = np.array([r.u for r in right_feats])
    rv = np.array([r.v for r in right_feats])
    for li, f in enumerate(left_feats):
        if len(right_feats) == 0:
            out.append(replace(f, disparity=None))
            continue
        disp = f.u - ru
        ok = (np.abs(rv - f.v) <= row_tol) & (disp >= 0.0) & (disp <= max_disparity)
        idx = np.flatnonzero(ok)
        if idx.size == 0:
            out.append(replace(f, disparity=None))
            continue
        if descriptors is not None:
            dl, dr = descriptors
            bits = np.unpackbits(dl[li][None, :] ^ dr[idx], axis=1).sum(axis=1)
            best = idx[int(np.argmin(bits))]
        else:
            best = idx[int(np.argmin(disp[idx]))]
        out.append(replace(f, disparity=float(f.u - ru[best])))
    return out


def grid_cross_value(target: PointFeature2D, peers: Sequence[PointFeature2D]) -> float:
    """Mean 2-D scalar cross product between the target and each peer,
    in pixel coordinates relative to the image origin."""
    if len(peers) == 0:
        raise ValueError("singleton grid: no peers to compare against")
    sx = sum(p.u for p in peers)
    sy = sum(p.v for p in peers)
    return (target.u * sy - target.v * sx) / len(peers)


def fit_rigid_2d(prev_xy: np.ndarray, curr_xy: np.ndarray):
    """Least-squares 2-D rigid motion (R, t) with curr ~= R @ prev + t."""
    p_mean = prev_xy.mean(axis=0)
    c_mean = curr_xy.mean(axis=0)
    u = prev_xy - p_mean
    w = curr_xy - c_mean
    s_cross = float(np.sum(u[:, 0] * w[:, 1] - u[:, 1] * w[:, 0]))
    s_dot = float(np.sum(u[:, 0] * w[:, 0] + u[:, 1] * w[:, 1]))
    theta = np.arctan2(s_cross, s_dot) if (s_cross != 0.0 or s_dot != 0.0) else 0.0
    c, s = np.cos(theta), np.sin(theta)
    R = np.array([[c, -s], [s, c]])
    t = c_mean - R @ p_mean
    return R, t


def _mean_cross_values(xy: np.ndarray) -> np.ndarray:
    """g_k = mean over i != k of cross(p_k, p_i); the k = i term is zero, so the
    full sums can be used directly."""
    n = xy.shape[0]
    sx, sy = xy[:, 0].sum(), xy[:, 1].sum()
    return (xy[:, 0] * sy - xy[:, 1] * sx) / (n - 1)


def filter_point_matches(matches: Sequence[PointMatch],
                         alpha: float = DEFAULT_ALPHA,
                         eps_px2: float = DEFAULT_EPS_PX2,
                         singleton: str = "image",
                         compensate: bool = True):
    """Partition matches into (inliers, outliers) by grid cross-value consistency.

    `singleton` selects what happens to matches alone in their grid cell:
    "image" judges them against an image-wide pool (the default), "keep"
    accepts them outright (useful at production grid resolution where nearly
    every cell holds a single feature and the pool statistic is dominated by
    the image-origin lever arm).
    """
    if singleton not in ("image", "keep"):
        raise ValueError("singleton must be 'image' or 'keep'")
    matches = list(matches)
    n = len(matches)
    if n == 0:
        return [], []

    prev_xy = np.array([[m.prev.u, m.prev.v] for m in matches])
    curr_xy = np.array([[m.curr.u, m.curr.v] for m in matches])
    if compensate and n >= 2:
        R, t = fit_rigid_2d(prev_xy, curr_xy)
        curr_cmp = (curr_xy - t) @ R  # R^-1 (curr - t), mapped back to the prev frame
    else:
        curr_cmp = curr_xy

    cells = np.array([m.grid_prev for m in matches], dtype=np.int64)
    _, group, counts = np.unique(cells, axis=0, return_inverse=True,
                                 return_counts=True)
    group = group.ravel()
    n_groups = counts.shape[0]
    cnt = counts[group].astype(np.float64)
    multi = cnt >= 2

    def seg_sum(values):
        out = np.zeros(n_groups)
        np.add.at(out, group, values)
        return out

    reject = np.zeros(n, dtype=bool)
    g_prev_all = np.full(n, np.nan)
    g_curr_all = np.full(n, np.nan)

    if multi.any():
        # per-match mean cross value against grid-mates: the target's own
        # cross term is zero, so group sums can be used directly
        sx_p, sy_p = seg_sum(prev_xy[:, 0]), seg_sum(prev_xy[:, 1])
        sx_c, sy_c = seg_sum(curr_cmp[:, 0]), seg_sum(curr_cmp[:, 1])
        denom = np.maximum(cnt - 1.0, 1.0)
        gp = (prev_xy[:, 0] * sy_p[group] - prev_xy[:, 1] * sx_p[group]) / denom
        gc = (curr_cmp[:, 0] * sy_c[group] - curr_cmp[:, 1] * sx_c[group]) / denom
        delta = np.abs(gp - gc)
        # consensus scale: mean absolute change (the signed means cancel for
        # any symmetric field, which would reject everything above the floor)
        mean_abs = seg_sum(np.where(multi, delta, 0.0)) / np.maximum(counts, 1)
        threshold = alpha * mean_abs[group] + eps_px2
        reject[multi] = delta[multi] > threshold[multi]
        g_prev_all[multi] = gp[multi]
        g_curr_all[multi] = gc[multi]

    singles = ~multi
    if singles.any() and singleton == "image" and n >= 2:
        # pool statistics over every match, with image-wide peer sets
        gp = _mean_cross_values(prev_xy)
        gc = _mean_cross_values(curr_cmp)
        delta = np.abs(gp - gc)
        threshold = alpha * delta.mean() + eps_px2
        reject[singles] = delta[singles] > threshold
        g_prev_all[singles] = gp[singles]
        g_curr_all[singles] = gc[singles]

    inliers, outliers = [], []
    for k, m in enumerate(matches):
        gp_k = None if np.isnan(g_prev_all[k]) else float(g_prev_all[k])
        gc_k = None if np.isnan(g_curr_all[k]) else float(g_curr_all[k])
        enriched = replace(m, g_prev=gp_k, g_curr=gc_k)
        (outliers if reject[k] else inliers).append(enriched)
    return inliers, outliers


def build_llgs(lines: Sequence[LineFeature2D]) -> list:
    """Group lines into LLGs: connected components under circular-domain overlap
    (centers closer than the sum of the radii). Output is order-independent."""
    lines = list(lines)
    n = len(lines)
    if n == 0:
        return []
    mids = np.array([ln.midpoint for ln in lines])
    radii = np.array([ln.length / 2.0 for ln in lines])
    d2 = ((mids[:, None, :] - mids[None, :, :]) ** 2).sum(axis=2)
    limit = (radii[:, None] + radii[None, :]) ** 2
    adj = d2 < limit
    np.fill_diagonal(adj, False)

    seen = np.zeros(n, dtype=bool)
    order = np.argsort([ln.id for ln in lines], kind="stable")
    groups = []
    for root in order:
        if seen[root]:
            continue
        stack, comp = [root], []
        seen[root] = True
        while stack:
            k = stack.pop()
            comp.append(k)
            for j in np.flatnonzero(adj[k]):
                if not seen[j]:
                    seen[j] = True
                    stack.append(int(j))
        ids = tuple(sorted(lines[k].id for k in comp))
        domains = {lines[k].id: (mids[k].copy(), float(radii[k])) for k in comp}
        groups.append(LocalLineGroup(members=ids, domains=domains))
    groups.sort(key=lambda g: g.members[0])
    return groups


def filter_line_matches(matches: Sequence[LineMatch],
                        llgs_prev: Sequence[LocalLineGroup],
                        ratio: float = DEFAULT_LINE_RATIO,
                        angle_floor: float = 0.0,
                        dist_floor: float = 0.0):
    """Partition line matches into (inliers, outliers) with the LLG 2x-mean rule.

    Both the angle and midpoint-distance tests must pass for a match to stay.
    The floors are added to the thresholds; they default to zero (the literal
    rule) and exist so a noisy but static scene does not starve itself.
    """
    matches = list(matches)
    if not matches:
        return [], []
    group_of = {}
    for gi, g in enumerate(llgs_prev):
        for lid in g.members:
            group_of[lid] = gi

    by_group = {}
    for k, m in enumerate(matches):
        by_group.setdefault(group_of.get(m.prev.id, -1), []).append(k)

    angles = np.array([m.angle_diff for m in matches])
    dists = np.array([m.midpoint_dist for m in matches])
    mean_angle_all = float(angles.mean())
    mean_dist_all = float(dists.mean())

    keep = np.zeros(len(matches), dtype=bool)
    for gi, idx in by_group.items():
        idx = np.asarray(idx)
        if gi >= 0 and len(idx) >= 2:
            a_th = ratio * angles[idx].mean() + angle_floor
            d_th = ratio * dists[idx].mean() + dist_floor
        else:
            a_th = ratio * mean_angle_all + angle_floor
            d_th = ratio * mean_dist_all + dist_floor
        keep[idx] = (angles[idx] <= a_th) & (dists[idx] <= d_th)

    inliers = [m for k, m in enumerate(matches) if keep[k]]
    outliers = [m for k, m in enumerate(matches) if not keep[k]]
    return inliers, outliers
