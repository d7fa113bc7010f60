"""The two mismatch filters at work on constructed correspondences.

A rigid camera motion keeps every match; a single displaced point (a bad
track) is the only rejection.  Lines are grouped into local line groups by
circular-domain overlap and filtered by the twice-the-group-mean rule.
"""
import numpy as np

from pointline_slam.association import (
    build_llgs,
    filter_line_matches,
    filter_point_matches,
    line_match,
    point_matches,
)
from pointline_slam.geometry import LineFeature2D, PointFeature2D

W, H = 1242, 376
rng = np.random.default_rng(1)

# ---- point filter: rigid motion plus one bad track
base = np.column_stack([rng.uniform(100.5, 115.0, 9), rng.uniform(56.5, 62.0, 9)])
curr = base.copy()
curr[8] += [30.0, 0.0]                    # mis-tracked feature
prev_f = [PointFeature2D(x, y, id=i) for i, (x, y) in enumerate(base)]
curr_f = [PointFeature2D(x, y, id=i) for i, (x, y) in enumerate(curr)]
inl, out = filter_point_matches(point_matches(prev_f, curr_f, W, H))
print("point filter: 9 matches in one grid cell, one displaced 30 px")
print(f"  inliers {len(inl)}, rejected ids {[m.prev.id for m in out]}")

theta, tau = 0.15, np.array([25.0, -8.0])
c, s = np.cos(theta), np.sin(theta)
R = np.array([[c, -s], [s, c]])
field = np.column_stack([rng.uniform(0, W, 120), rng.uniform(0, H, 120)])
moved = (field - [W / 2, H / 2]) @ R.T + [W / 2, H / 2] + tau
prev_f = [PointFeature2D(x, y, id=i) for i, (x, y) in enumerate(field)]
curr_f = [PointFeature2D(x, y, id=i) for i, (x, y) in enumerate(moved)]
inl, out = filter_point_matches(point_matches(prev_f, curr_f, W, H))
print(f"  rigid rotation+translation field of 120: rejections = {len(out)}")
print()

# ---- line filter: an LLG with one wildly rotated member
def rot_about_mid(ln, deg):
    a = np.deg2rad(deg)
    Rm = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    mid = ln.midpoint
    return LineFeature2D((ln.start - mid) @ Rm.T + mid, (ln.end - mid) @ Rm.T + mid,
                         id=ln.id)

prev_lines = [LineFeature2D([100, 100], [180, 110], id=0),
              LineFeature2D([120, 95], [200, 120], id=1),
              LineFeature2D([140, 105], [210, 100], id=2),
              LineFeature2D([160, 90], [230, 125], id=3),
              LineFeature2D([900, 300], [950, 310], id=4)]   # isolated line
llgs = build_llgs(prev_lines)
print(f"line groups (by circular-domain overlap): {[g.members for g in llgs]}")
matches = [line_match(p, rot_about_mid(p, 2.0)) for p in prev_lines[:3]]
matches.append(line_match(prev_lines[3], rot_about_mid(prev_lines[3], 40.0)))
matches.append(line_match(prev_lines[4], rot_about_mid(prev_lines[4], 2.0)))
inl, out = filter_line_matches(matches, llgs)
print(f"  three members rotate 2 deg, one rotates 40 deg, singleton rotates 2 deg")
print(f"  inlier ids {[m.prev.id for m in inl]}, rejected ids {[m.prev.id for m in out]}")
