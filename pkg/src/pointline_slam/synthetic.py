"""Synthetic stereo scenes with exact ground truth.

Observations are projections of the landmark set through the ground-truth
trajectory; dynamic rigid bodies follow their own linear trajectories; pixel
noise and outliers are applied last, so a zero-noise scene reprojects with
exactly zero residual.  Every observation carries a static/dynamic/outlier
label in a sidecar, which is what the dynamic-rejection precision/recall
harness consumes.

Left images are rendered as sliding windows into a wrapped random panorama
keyed to the frame index, so descriptor similarity tracks travelled distance
and revisits (loops) reproduce earlier images exactly.  They carry no
photometric relation to the feature set; they exist to drive the descriptor
machinery.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import PoseSE3, StereoCamera
from .sequence_io import (
    save_image,
    write_calibration,
    write_feature_file,
    write_tum,
)


class GenerationError(ValueError):
    pass


@dataclass
class BodySpec:
    n_points: int = 20
    n_lines: int = 5
    center: tuple = (0.0, 0.0, 10.0)
    size: float = 1.5
    velocity: tuple = (0.3, 0.0, 0.0)     # meters per frame, world
    # draw line directions perpendicular to this vector (e.g. the body's
    # apparent motion) so the perpendicular-distance metric can register the
    # motion; None keeps isotropic directions
    line_normal: Optional[tuple] = None


@dataclass
class SceneSpec:
    n_frames: int = 100
    width: int = 1242
    height: int = 376
    fx: float = 718.856
    fy: float = 718.856
    cx: float = 607.19
    cy: float = 185.22
    baseline: float = 0.54
    trajectory: str = "line"              # "line" | "circle"
    speed: float = 0.3                    # meters per frame along the path
    radius: float = 12.0                  # circle radius
    loop_frames: Optional[int] = None     # full circle / panorama wrap period
    n_points: int = 600
    n_lines: int = 150
    line_length_range: tuple = (0.5, 3.0)
    vis_depth: tuple = (1.5, 40.0)
    noise_px: float = 0.0
    outlier_rate: float = 0.0
    timestamp_step: float = 0.1
    texture_step_px: float = 4.0
    dynamic_bodies: list = field(default_factory=list)

    @staticmethod
    def from_json(path_or_text) -> "SceneSpec":
        if os.path.exists(str(path_or_text)):
            with open(path_or_text) as f:
                data = json.load(f)
        else:
            data = json.loads(path_or_text)
        bodies = [BodySpec(**b) for b in data.pop("dynamic_bodies", [])]
        spec = SceneSpec(**data)
        spec.dynamic_bodies = bodies
        return spec

    def to_json(self) -> str:
        data = dict(self.__dict__)
        data["dynamic_bodies"] = [dict(b.__dict__) for b in self.dynamic_bodies]
        data["vis_depth"] = list(self.vis_depth)
        return json.dumps(data, indent=2)

    def camera(self) -> StereoCamera:
        return StereoCamera(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
                            baseline=self.baseline, width=self.width,
                            height=self.height)


@dataclass
class FrameObs:
    index: int
    timestamp: float
    # (id, uL, vL, uR, vR, label) with label in {static, dynamic, outlier}
    points: list = field(default_factory=list)
    # (id, left (2,2), right (2,2), label)
    lines: list = field(default_factory=list)


@dataclass
class SyntheticScene:
    spec: SceneSpec
    cam: StereoCamera
    trajectory: list                     # per-frame PoseSE3, world-from-camera
    frames: list                         # list[FrameObs]
    static_points: np.ndarray
    static_lines: np.ndarray             # (L, 2, 3)
    panorama: np.ndarray

    def render_image(self, k: int) -> np.ndarray:
        step = self.spec.texture_step_px
        offset = int(round(k * step))
        cols = (offset + np.arange(self.spec.width)) % self.panorama.shape[1]
        return self.panorama[:, cols]


def _trajectory(spec: SceneSpec):
    poses = []
    if spec.trajectory == "line":
        for k in range(spec.n_frames):
            poses.append(PoseSE3(np.eye(3), np.array([0.0, 0.0, spec.speed * k])))
    elif spec.trajectory == "circle":
        period = spec.loop_frames or spec.n_frames
        for k in range(spec.n_frames):
            ang = 2.0 * np.pi * k / period
            c, s = np.cos(ang), np.sin(ang)
            R = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
            t = np.array([spec.radius * np.sin(ang), 0.0,
                          spec.radius * (1.0 - np.cos(ang))])
            poses.append(PoseSE3(R, t))
    else:
        raise GenerationError(f"unknown trajectory kind {spec.trajectory!r}")
    return poses


def _static_landmarks(spec: SceneSpec, rng):
    if spec.trajectory == "line":
        length = spec.speed * spec.n_frames
        lo = np.array([-12.0, -5.0, 2.0])
        hi = np.array([12.0, 5.0, length + spec.vis_depth[1]])
    else:
        reach = spec.radius * 2.0 + spec.vis_depth[1]
        lo = np.array([-reach, -5.0, -reach])
        hi = np.array([reach, 5.0, reach + spec.radius])
    pts = rng.uniform(lo, hi, size=(spec.n_points, 3))
    starts = rng.uniform(lo, hi, size=(spec.n_lines, 3))
    dirs = rng.normal(size=(spec.n_lines, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    lengths = rng.uniform(*spec.line_length_range, size=(spec.n_lines, 1))
    lines = np.stack([starts, starts + dirs * lengths], axis=1)
    return pts, lines


def _body_landmarks(spec: SceneSpec, rng):
    pts, lines = [], []
    for body in spec.dynamic_bodies:
        c = np.asarray(body.center, dtype=np.float64)
        p = c + rng.uniform(-body.size, body.size, size=(body.n_points, 3))
        s = c + rng.uniform(-body.size, body.size, size=(body.n_lines, 3))
        d = rng.normal(size=(body.n_lines, 3))
        if body.line_normal is not None:
            nrm = np.asarray(body.line_normal, dtype=np.float64)
            nrm = nrm / np.linalg.norm(nrm)
            d = d - np.outer(d @ nrm, nrm)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        ln = np.stack([s, s + d * rng.uniform(0.4, 1.2, size=(body.n_lines, 1))], axis=1)
        pts.append(p)
        lines.append(ln)
    return pts, lines


def generate_scene(spec: SceneSpec, seed: int = 0) -> SyntheticScene:
    """Deterministic for a fixed (spec, seed): the same inputs give
    bit-identical scenes and serialized sequences."""
    rng = np.random.default_rng(seed)
    cam = spec.camera()
    trajectory = _trajectory(spec)
    static_pts, static_lns = _static_landmarks(spec, rng)
    body_pts, body_lns = _body_landmarks(spec, rng)

    pan_rng = np.random.default_rng((seed ^ 0x9E3779B9) & 0xFFFFFFFF)
    if spec.loop_frames:
        # wrap period must equal the loop length so revisits repeat exactly
        pan_w = max(1, int(round(spec.loop_frames * spec.texture_step_px)))
    else:
        pan_w = int(round(spec.n_frames * spec.texture_step_px)) + spec.width + 1
    panorama = pan_rng.integers(0, 256, size=(spec.height, pan_w), dtype=np.uint8)

    z_near, z_far = spec.vis_depth

    def visible(X_c):
        if X_c[2] < z_near or X_c[2] > z_far:
            return None
        u = cam.fx * X_c[0] / X_c[2] + cam.cx
        v = cam.fy * X_c[1] / X_c[2] + cam.cy
        d = cam.fx * cam.baseline / X_c[2]
        if not (0.0 <= u < cam.width and 0.0 <= v < cam.height):
            return None
        if not (0.0 <= u - d < cam.width):
            return None
        return u, v, d

    frames = []
    n_line_ids = len(static_lns)
    for k, pose in enumerate(trajectory):
        inv = pose.inverse()
        obs = FrameObs(index=k, timestamp=k * spec.timestamp_step)
        for i, X in enumerate(static_pts):
            hit = visible(inv.apply(X))
            if hit:
                u, v, d = hit
                obs.points.append([i, u, v, u - d, v, "static"])
        for i, ln in enumerate(static_lns):
            hs = visible(inv.apply(ln[0]))
            he = visible(inv.apply(ln[1]))
            if hs and he:
                left = np.array([[hs[0], hs[1]], [he[0], he[1]]])
                right = np.array([[hs[0] - hs[2], hs[1]], [he[0] - he[2], he[1]]])
                obs.lines.append([i, left, right, "static"])
        pid_base = len(static_pts)
        lid_base = n_line_ids
        for b, body in enumerate(spec.dynamic_bodies):
            shift = np.asarray(body.velocity, dtype=np.float64) * k
            for i, X in enumerate(body_pts[b]):
                hit = visible(inv.apply(X + shift))
                if hit:
                    u, v, d = hit
                    obs.points.append([pid_base + i, u, v, u - d, v, "dynamic"])
            for i, ln in enumerate(body_lns[b]):
                hs = visible(inv.apply(ln[0] + shift))
                he = visible(inv.apply(ln[1] + shift))
                if hs and he:
                    left = np.array([[hs[0], hs[1]], [he[0], he[1]]])
                    right = np.array([[hs[0] - hs[2], hs[1]], [he[0] - he[2], he[1]]])
                    obs.lines.append([lid_base + i, left, right, "dynamic"])
            pid_base += len(body_pts[b])
            lid_base += len(body_lns[b])
        if not obs.points:
            raise GenerationError(f"frame {k} sees no point landmarks")
        frames.append(obs)

    # noise, then outliers; labels updated in place
    for obs in frames:
        if spec.noise_px > 0.0:
            for p in obs.points:
                p[1] += rng.normal(scale=spec.noise_px)
                p[2] += rng.normal(scale=spec.noise_px)
                p[3] += rng.normal(scale=spec.noise_px)
            for ln in obs.lines:
                ln[1] = ln[1] + rng.normal(scale=spec.noise_px, size=(2, 2))
                ln[2] = ln[2] + rng.normal(scale=spec.noise_px, size=(2, 2))
        if spec.outlier_rate > 0.0 and obs.points:
            n_out = int(np.floor(spec.outlier_rate * len(obs.points)))
            if n_out:
                chosen = rng.choice(len(obs.points), size=n_out, replace=False)
                for idx in np.sort(chosen):
                    p = obs.points[idx]
                    p[1] = rng.uniform(0.0, cam.width)
                    p[2] = rng.uniform(0.0, cam.height)
                    p[5] = "outlier"

    return SyntheticScene(spec=spec, cam=cam, trajectory=trajectory, frames=frames,
                          static_points=static_pts, static_lines=static_lns,
                          panorama=panorama)


def write_sequence(scene: SyntheticScene, out_dir, with_images: bool = True):
    """Serialize calibration, features, images, ground truth, and the label
    sidecar under `out_dir`."""
    os.makedirs(out_dir, exist_ok=True)
    spec = scene.spec
    write_calibration(os.path.join(out_dir, "calib.txt"),
                      spec.fx, spec.fy, spec.cx, spec.cy, spec.baseline)
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)
    if with_images:
        img_dir = os.path.join(out_dir, "left")
        os.makedirs(img_dir, exist_ok=True)
    sidecar = ["frame,kind,id,label"]
    for obs in scene.frames:
        pts = [(p[0], p[1], p[2], p[3], p[4]) for p in obs.points]
        lns = [(l[0], l[1], l[2]) for l in obs.lines]
        write_feature_file(os.path.join(feat_dir, f"{obs.index:06d}.feat"),
                           obs.index, obs.timestamp, pts, lns)
        for p in obs.points:
            sidecar.append(f"{obs.index},P,{p[0]},{p[5]}")
        for l in obs.lines:
            sidecar.append(f"{obs.index},L,{l[0]},{l[3]}")
        if with_images:
            save_image(os.path.join(img_dir, f"{obs.index:06d}.pgm"),
                       scene.render_image(obs.index))
    with open(os.path.join(out_dir, "sidecar.csv"), "w") as f:
        f.write("\n".join(sidecar) + "\n")
    write_tum(os.path.join(out_dir, "groundtruth.txt"),
              [(o.timestamp, p) for o, p in zip(scene.frames, scene.trajectory)])


def read_sidecar(path) -> dict:
    """-> {(frame, kind, id): label}"""
    out = {}
    with open(path) as f:
        next(f)
        for line in f:
            line = line.strip()
            if not line:
                continue
            frame, kind, fid, label = line.split(",")
            out[(int(frame), kind, int(fid))] = label
    return out
