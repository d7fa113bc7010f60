"""Trajectory metrics: absolute translation RMSE and rotation RMSE after
rigid alignment of the first pose.

The first frame is pinned by the alignment and is not an error sample; the
RMSE is taken over the remaining frames (a two-frame fixture whose second
pose is off by 1 m scores exactly 1.0).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PoseSE3, se3_log


@dataclass
class TrajectoryMetrics:
    ate_rmse: float            # meters
    rot_rmse_deg: float
    translation_errors: np.ndarray
    rotation_errors_deg: np.ndarray


def evaluate_trajectory(estimated, ground_truth, timestamp_tol: float = 1e-9) -> TrajectoryMetrics:
    """Both arguments are sequences of (timestamp, PoseSE3) of equal length
    with matching timestamps."""
    if len(estimated) != len(ground_truth):
        raise ValueError(f"trajectory length mismatch: {len(estimated)} vs "
                         f"{len(ground_truth)}")
    if len(estimated) == 0:
        raise ValueError("empty trajectories")
    for (te, _), (tg, _) in zip(estimated, ground_truth):
        if abs(te - tg) > timestamp_tol:
            raise ValueError(f"timestamp mismatch: {te} vs {tg}")

    first_exact = (np.array_equal(estimated[0][1].rotation, ground_truth[0][1].rotation)
                   and np.array_equal(estimated[0][1].translation,
                                      ground_truth[0][1].translation))
    align = (PoseSE3.identity() if first_exact
             else ground_truth[0][1].compose(estimated[0][1].inverse()))
    t_errs, r_errs = [], []
    for (_, est), (_, gt) in zip(estimated[1:], ground_truth[1:]):
        aligned = align.compose(est)
        if (np.array_equal(aligned.rotation, gt.rotation)
                and np.array_equal(aligned.translation, gt.translation)):
            t_errs.append(0.0)
            r_errs.append(0.0)
            continue
        t_errs.append(float(np.linalg.norm(aligned.translation - gt.translation)))
        rel = gt.inverse().compose(aligned)
        r_errs.append(float(np.degrees(np.linalg.norm(se3_log(rel)[3:]))))
    t = np.array(t_errs) if t_errs else np.zeros(0)
    r = np.array(r_errs) if r_errs else np.zeros(0)
    ate = float(np.sqrt(np.mean(t ** 2))) if len(t) else 0.0
    rot = float(np.sqrt(np.mean(r ** 2))) if len(r) else 0.0
    return TrajectoryMetrics(ate_rmse=ate, rot_rmse_deg=rot,
                             translation_errors=t, rotation_errors_deg=r)
