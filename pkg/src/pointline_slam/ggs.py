"""Global gray-distribution descriptor and its pairwise dissimilarity score.

A descriptor is 24 integer histograms of 256 bins: the 8-bit gray image and a
0.8-scaled copy are each split into a 3x4 grid and one histogram is kept per
cell.  Two descriptors are compared per cell index by the L1 distance between
histograms, minimized over the four (original/scaled x original/scaled)
pairings, summed over the 12 cells and divided by the original pixel count.
Lower means more similar; identical images score 0.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

try:
    from numba import njit as _njit
    _HAVE_NUMBA = True
except ImportError:      # pragma: no cover - numba is optional
    _HAVE_NUMBA = False

from .grids import grid_bounds

GRID_ROWS = 3
GRID_COLS = 4
SCALE_FACTOR = 0.8


def _round_half_away(x: np.ndarray) -> np.ndarray:
    # np.round is half-to-even; histograms must be bit-stable across platforms.
    return np.floor(x + 0.5)


@lru_cache(maxsize=32)
def _resample_index(n: int, out_n: int):
    j = np.arange(out_n, dtype=np.float64)
    a = j * n / out_n
    b = (j + 1.0) * n / out_n
    ia = np.floor(a).astype(np.int64)
    ib = np.minimum(np.floor(b).astype(np.int64), n - 1)
    return ia, ib, ia + 1.0 - a, b - ib


_workspaces: dict = {}


def _workspace(key, shape):
    # reusing large buffers avoids repeated mmap zero-fill page faults, which
    # dominate the cost of this function otherwise
    buf = _workspaces.get(key)
    if buf is None or buf.shape != shape:
        buf = np.empty(shape)
        if len(_workspaces) > 16:
            _workspaces.clear()
        _workspaces[key] = buf
    return buf


def _resample_rows_numpy(src, ia, ib, head_w, tail_w, scale, role):
    n, m = src.shape
    out_n = ia.shape[0]
    csum = _workspace(("csum", role, n, m), (n + 1, m))
    csum[0] = 0.0
    np.cumsum(src, axis=0, out=csum[1:])
    out = _workspace(("out", role, out_n, m), (out_n, m))
    tmp = _workspace(("tmp", role, out_n, m), (out_n, m))
    np.take(csum, ib, axis=0, out=out)
    np.take(csum, ia + 1, axis=0, out=tmp)
    out -= tmp
    np.take(src, ia, axis=0, out=tmp)
    tmp *= head_w[:, None]
    out += tmp
    np.take(src, ib, axis=0, out=tmp)
    tmp *= tail_w[:, None]
    out += tmp
    out *= scale
    return out


if _HAVE_NUMBA:
    @_njit(cache=True)
    def _resample_rows_jit(src, ia, ib, head_w, tail_w, scale, csum, out):  # pragma: no cover
        n, m = src.shape
        out_n = ia.shape[0]
        for j in range(m):
            csum[0, j] = 0.0
        for i in range(n):
            for j in range(m):
                csum[i + 1, j] = csum[i, j] + src[i, j]
        for k in range(out_n):
            a_row = ia[k]
            b_row = ib[k]
            hw = head_w[k]
            tw = tail_w[k]
            for j in range(m):
                v = csum[b_row, j] - csum[a_row + 1, j]
                v = v + hw * src[a_row, j]
                v = v + tw * src[b_row, j]
                out[k, j] = v * scale
        return out


def _resample_rows(src: np.ndarray, out_n: int, role: str) -> np.ndarray:
    """Exact box-filter (area average) resample of axis 0 to out_n samples.

    The covered area is full interior pixels (via the cumulative sum) plus the
    fractional end pixels; when an output cell falls inside one source pixel
    the same expression telescopes to (b - a) * src[ia], so no branch is
    needed.  The jit path replays the identical operation order, so both
    backends produce bit-identical results.
    """
    n = src.shape[0]
    m = src.shape[1]
    ia, ib, head_w, tail_w = _resample_index(n, out_n)
    if _HAVE_NUMBA:
        csum = _workspace(("csum", role, n, m), (n + 1, m))
        out = _workspace(("out", role, out_n, m), (out_n, m))
        return _resample_rows_jit(src, ia, ib, head_w, tail_w, out_n / n, csum, out)
    return _resample_rows_numpy(src, ia, ib, head_w, tail_w, out_n / n, role)


def scale_image(image: np.ndarray, factor: float = SCALE_FACTOR) -> np.ndarray:
    """Area-average the image to round(factor * size), rounding half away from zero."""
    h, w = image.shape
    out_h = max(1, int(_round_half_away(np.array(factor * h))))
    out_w = max(1, int(_round_half_away(np.array(factor * w))))
    t1 = _workspace(("T1", w, h), (w, h))
    np.copyto(t1, image.T, casting="unsafe")
    cols = _resample_rows(t1, out_w, role="w")       # (out_w, h)
    t2 = _workspace(("T2", h, out_w), (h, out_w))
    np.copyto(t2, cols.T)
    resized = _resample_rows(t2, out_h, role="h")    # (out_h, out_w)
    resized += 0.5
    np.floor(resized, out=resized)
    return np.clip(resized, 0, 255).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class GGSDescriptor:
    """hist has shape (2, 12, 256): level 0 original image, level 1 scaled."""

    hist: np.ndarray
    image_area: int
    scaled_area: int

    def __post_init__(self):
        h = np.asarray(self.hist, dtype=np.int64)
        if h.shape != (2, GRID_ROWS * GRID_COLS, 256):
            raise ValueError("descriptor must hold 24 histograms of 256 bins")
        h = h.copy()
        h.flags.writeable = False
        object.__setattr__(self, "hist", h)


def _level_histograms(image: np.ndarray) -> np.ndarray:
    h, w = image.shape
    ys = grid_bounds(GRID_ROWS, h)
    xs = grid_bounds(GRID_COLS, w)
    out = np.zeros((GRID_ROWS * GRID_COLS, 256), dtype=np.int64)
    for r in range(GRID_ROWS):
        for c in range(GRID_COLS):
            cell = image[ys[r]:ys[r + 1], xs[c]:xs[c + 1]]
            out[r * GRID_COLS + c] = np.bincount(cell.ravel(), minlength=256)
    return out


def compute_ggs(image: np.ndarray, scale: float = SCALE_FACTOR) -> GGSDescriptor:
    """Descriptor of an 8-bit grayscale raster; needs at least 4x3 pixels."""
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("expected a 2-D uint8 grayscale image")
    h, w = img.shape
    if w < GRID_COLS or h < GRID_ROWS:
        raise ValueError(f"image too small for a {GRID_ROWS}x{GRID_COLS} grid: {w}x{h}")
    scaled = scale_image(img, scale)
    hist = np.stack([_level_histograms(img), _level_histograms(scaled)])
    return GGSDescriptor(hist=hist, image_area=h * w,
                         scaled_area=scaled.shape[0] * scaled.shape[1])


def ggs_dissimilarity(a: GGSDescriptor, b: GGSDescriptor) -> float:
    """Min-over-levels L1 score; 0 for identical descriptors, symmetric."""
    if a.image_area != b.image_area:
        raise ValueError("descriptors come from different image resolutions")
    # (2, 2, 12): L1 between level p of a and level q of b, per cell
    diffs = np.abs(a.hist[:, None, :, :] - b.hist[None, :, :, :]).sum(axis=3)
    return float(diffs.min(axis=(0, 1)).sum()) / a.image_area


def dissimilarity_matrix(descriptors: list) -> np.ndarray:
    n = len(descriptors)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = ggs_dissimilarity(descriptors[i], descriptors[j])
    return out


def keyframe_threshold(ggs_pkf: float, ggs_pkf_next: float, ggs_ppkf_next: float,
                       coeff: float = 0.4) -> float:
    """Adaptive keyframe gate: previous-keyframe score plus a weighted rate term."""
    return ggs_pkf + coeff * (ggs_pkf_next - ggs_ppkf_next)


def is_new_keyframe(current_scalar: float, threshold: float) -> bool:
    """Strict inequality: a frame exactly at the threshold is not a keyframe."""
    return current_scalar > threshold


def dump_descriptor(d: GGSDescriptor) -> str:
    """One line per histogram, 256 space-separated integers (24 lines)."""
    lines = []
    for level in range(2):
        for cell in range(GRID_ROWS * GRID_COLS):
            lines.append(" ".join(str(int(v)) for v in d.hist[level, cell]))
    return "\n".join(lines) + "\n"
