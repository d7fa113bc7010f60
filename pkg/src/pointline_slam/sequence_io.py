"""Dataset ingestion and serialization.

A sequence directory holds:
    calib.txt            five lines: fx fy cx cy baseline
    features/NNNNNN.feat per-frame features (see below)
    left/NNNNNN.pgm|png  optional grayscale left images (needed for the
                         descriptor-based keyframe rule and loop closure)
    groundtruth.txt      optional TUM trajectory
    sidecar.csv          optional per-observation labels (synthetic scenes)

Feature file format, one file per frame:
    frame <index> <timestamp>
    P <id> <uL> <vL> <uR> <vR>          (uR = -1 when not stereo-matched)
    L <id> <sxL> <syL> <exL> <eyL> <sxR> <syR> <exR> <eyR>
    # comment lines are ignored
Temporal association is by feature id.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from PIL import Image

from .geometry import PoseSE3, StereoCamera
from scipy.spatial.transform import Rotation


class SequenceError(ValueError):
    pass


class MissingCalibrationError(SequenceError):
    pass


class FeatureParseError(SequenceError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class FrameOrderError(SequenceError):
    pass


@dataclass
class RawPoint:
    id: int
    uL: float
    vL: float
    uR: float      # -1 when unmatched
    vR: float

    @property
    def disparity(self) -> Optional[float]:
        if self.uR < 0.0:
            return None
        d = self.uL - self.uR
        return d if d > 0.0 else None


@dataclass
class RawLine:
    id: int
    left: np.ndarray    # (2, 2): start, end
    right: np.ndarray   # (2, 2)


@dataclass
class FrameInput:
    index: int
    timestamp: float
    points: list = field(default_factory=list)
    lines: list = field(default_factory=list)
    image: Optional[np.ndarray] = None


# ------------------------------------------------------------------ calibration

def read_calibration(path) -> tuple:
    if not os.path.exists(path):
        raise MissingCalibrationError(f"calibration file not found: {path}")
    values = []
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                values.append(float(line))
            except ValueError:
                raise MissingCalibrationError(
                    f"{path}:{line_no}: expected one number per line, got {line!r}")
    if len(values) != 5:
        raise MissingCalibrationError(
            f"{path}: expected 5 values (fx fy cx cy baseline), got {len(values)}")
    return tuple(values)


def write_calibration(path, fx, fy, cx, cy, baseline):
    with open(path, "w") as f:
        for v in (fx, fy, cx, cy, baseline):
            f.write(f"{v:.9f}\n")


# ------------------------------------------------------------------ features

def parse_feature_file(path) -> FrameInput:
    frame = None
    points, lines = [], []
    with open(path) as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            kind = parts[0]
            if kind == "frame":
                if len(parts) != 3:
                    raise FeatureParseError(path, line_no,
                                            "frame header needs index and timestamp")
                try:
                    frame = FrameInput(index=int(parts[1]), timestamp=float(parts[2]))
                except ValueError:
                    raise FeatureParseError(path, line_no, "malformed frame header")
            elif kind == "P":
                if len(parts) != 6:
                    raise FeatureParseError(path, line_no,
                                            f"P line needs 5 fields, got {len(parts) - 1}")
                try:
                    points.append(RawPoint(id=int(parts[1]), uL=float(parts[2]),
                                           vL=float(parts[3]), uR=float(parts[4]),
                                           vR=float(parts[5])))
                except ValueError:
                    raise FeatureParseError(path, line_no, "malformed P line")
            elif kind == "L":
                if len(parts) != 10:
                    raise FeatureParseError(path, line_no,
                                            f"L line needs 9 fields, got {len(parts) - 1}")
                try:
                    vals = [float(x) for x in parts[2:]]
                    lines.append(RawLine(id=int(parts[1]),
                                         left=np.array([[vals[0], vals[1]],
                                                        [vals[2], vals[3]]]),
                                         right=np.array([[vals[4], vals[5]],
                                                         [vals[6], vals[7]]])))
                except ValueError:
                    raise FeatureParseError(path, line_no, "malformed L line")
            else:
                raise FeatureParseError(path, line_no, f"unknown record {kind!r}")
    if frame is None:
        raise FeatureParseError(path, 1, "missing frame header")
    frame.points = points
    frame.lines = lines
    return frame


def write_feature_file(path, index, timestamp, points, lines):
    """`points` yields (id, uL, vL, uR, vR); `lines` yields (id, left(2,2), right(2,2))."""
    with open(path, "w") as f:
        f.write(f"frame {index} {timestamp:.6f}\n")
        for pid, uL, vL, uR, vR in points:
            f.write(f"P {pid} {uL:.4f} {vL:.4f} {uR:.4f} {vR:.4f}\n")
        for lid, left, right in lines:
            l = np.asarray(left).ravel()
            r = np.asarray(right).ravel()
            f.write("L " + str(lid) + " "
                    + " ".join(f"{v:.4f}" for v in l) + " "
                    + " ".join(f"{v:.4f}" for v in r) + "\n")


# ------------------------------------------------------------------ trajectory

def write_tum(path, trajectory):
    """`trajectory` yields (timestamp, PoseSE3); TUM line order is
    tx ty tz qx qy qz qw."""
    with open(path, "w") as f:
        for ts, pose in trajectory:
            q = Rotation.from_matrix(pose.rotation).as_quat()
            t = pose.translation
            f.write(f"{ts:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                    f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n")


def read_tum(path):
    out = []
    with open(path) as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise SequenceError(f"{path}:{line_no}: TUM line needs 8 fields")
            ts = float(parts[0])
            t = np.array([float(parts[1]), float(parts[2]), float(parts[3])])
            q = [float(parts[4]), float(parts[5]), float(parts[6]), float(parts[7])]
            R = Rotation.from_quat(q).as_matrix()
            out.append((ts, PoseSE3(R, t)))
    return out


# ------------------------------------------------------------------ images

def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def save_image(path, img: np.ndarray):
    Image.fromarray(np.asarray(img, dtype=np.uint8), mode="L").save(path)


# ------------------------------------------------------------------ sequences

_FRAME_RE = re.compile(r"^(\d+)\.feat$")


class SequenceSource:
    """Lazily readable stereo sequence; frames come in strictly increasing
    index order and calibration is constant."""

    def __init__(self, root, image_size: Optional[tuple] = None):
        self.root = str(root)
        calib = read_calibration(os.path.join(self.root, "calib.txt"))
        feat_dir = os.path.join(self.root, "features")
        if not os.path.isdir(feat_dir):
            raise SequenceError(f"no features/ directory under {self.root}")
        names = sorted(n for n in os.listdir(feat_dir) if _FRAME_RE.match(n))
        if not names:
            raise SequenceError(f"no .feat files under {feat_dir}")
        self._feat_paths = [os.path.join(feat_dir, n) for n in names]
        self._image_paths = self._find_images(len(names))
        indices = [self._header_index(p) for p in self._feat_paths]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise FrameOrderError(
                f"{self.root}: frame indices are not strictly increasing: {indices}")
        if image_size is not None:
            width, height = image_size
        elif self._image_paths:
            sample = load_image(self._image_paths[0])
            height, width = sample.shape
        else:
            raise SequenceError(
                f"{self.root}: no images found; pass image_size=(width, height)")
        fx, fy, cx, cy, baseline = calib
        self.cam = StereoCamera(fx=fx, fy=fy, cx=cx, cy=cy, baseline=baseline,
                                width=int(width), height=int(height))

    def _find_images(self, n_frames):
        left_dir = os.path.join(self.root, "left")
        if not os.path.isdir(left_dir):
            return []
        paths = sorted(os.path.join(left_dir, n) for n in os.listdir(left_dir)
                       if n.lower().endswith((".pgm", ".png")))
        return paths if len(paths) == n_frames else []

    @staticmethod
    def _header_index(path) -> int:
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if parts[0] != "frame" or len(parts) != 3:
                    raise FeatureParseError(path, 1, "first record must be the frame header")
                return int(parts[1])
        raise FeatureParseError(path, 1, "missing frame header")

    def __len__(self):
        return len(self._feat_paths)

    def __getitem__(self, k) -> FrameInput:
        frame = parse_feature_file(self._feat_paths[k])
        if self._image_paths:
            frame.image = load_image(self._image_paths[k])
        return frame

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]


def load_sequence(path, image_size: Optional[tuple] = None) -> SequenceSource:
    if not os.path.isdir(path):
        raise SequenceError(f"sequence directory not found: {path}")
    return SequenceSource(path, image_size=image_size)
