"""Environment characterization: image metrics, FAST corners, binary
descriptors, marker matching, ROI cropping, texture classification and
scene-change detection.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError
from .scene import SyntheticImage

FAST_DEFAULT_THRESHOLD = 20
FINE_TEXTURE_CORNER_THRESHOLD = 250
CANONICAL_WIDTH = 320
CANONICAL_HEIGHT = 240

DESCRIPTOR_BITS = 256
DESCRIPTOR_PATTERN_SEED = 0x5EED
DESCRIPTOR_PATCH_HALF = 15       # 31x31 sampling patch
_SMOOTH_HALF = 2                 # 5x5 box filter
MATCH_HAMMING_THRESHOLD = 64

SCENE_CHANGE_BRIGHTNESS_DELTA = 15.0
SCENE_CHANGE_EDGE_RATIO = 0.5
SCENE_CHANGE_CORNER_DELTA = 100

ROI_MIN_COMPONENT_AREA = 100
ROI_MARGIN_PX = 4

# 16-pixel Bresenham circle of radius 3, clockwise from the top pixel.
FAST_CIRCLE = ((0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2),
               (1, 3), (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1),
               (-2, -2), (-1, -3))
FAST_ARC_LENGTH = 9


class TextureClass(enum.Enum):
    COARSE = "Coarse"
    FINE = "Fine"


@dataclass(frozen=True)
class Corner:
    x: int
    y: int
    score: int


@dataclass(frozen=True)
class Descriptor:
    bits: bytes          # 32 packed bytes, 256 bits
    anchor: Corner


@dataclass(frozen=True)
class MatchReport:
    matched: int
    reference_total: int

    @property
    def percentage(self) -> float:
        return 100.0 * self.matched / self.reference_total


@dataclass
class ImageMetrics:
    brightness: float
    contrast: float
    edge_strength: float
    corner_count: int
    illuminance: Optional[float] = None


def compute_metrics(image: SyntheticImage, lux: Optional[float] = None) -> ImageMetrics:
    if image.width < 32 or image.height < 32:
        raise InvalidArgumentError("image must be at least 32x32")
    # exact integer sums keep the results reproducible to the bit
    p = image.pixels.astype(np.int64)
    n = p.size
    s1 = int(p.sum())
    s2 = int((p * p).sum())
    brightness = s1 / n
    contrast = math.sqrt(max(s2 / n - brightness * brightness, 0.0))
    # 8-neighbour Laplacian (center 8, neighbours -1), valid region only
    lap = 8 * p[1:-1, 1:-1]
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            lap -= p[1 + dy:p.shape[0] - 1 + dy, 1 + dx:p.shape[1] - 1 + dx]
    ln = lap.size
    l1 = int(lap.sum())
    l2 = int((lap * lap).sum())
    lap_mean = l1 / ln
    edge_strength = l2 / ln - lap_mean * lap_mean
    corners = detect_fast_corners(image, FAST_DEFAULT_THRESHOLD)
    return ImageMetrics(brightness, contrast, edge_strength, len(corners), lux)


def _arc_qualifies(mask: np.ndarray) -> np.ndarray:
    """Any run of >= FAST_ARC_LENGTH contiguous True planes (circular)."""
    out = np.zeros(mask.shape[1:], dtype=bool)
    for start in range(16):
        acc = mask[start].copy()
        for k in range(1, FAST_ARC_LENGTH):
            acc &= mask[(start + k) % 16]
            if not acc.any():
                break
        out |= acc
    return out


def detect_fast_corners(image: SyntheticImage, threshold: int) -> List[Corner]:
    """FAST-9 segment-test corners with 3x3 non-max suppression.

    Score is the sum of |circle - center| over circle pixels beyond the
    threshold in the qualifying polarity. Ties in suppression resolve in
    row-major scan order (earlier pixel wins).
    """
    if threshold < 1:
        raise InvalidArgumentError("threshold must be >= 1")
    H, W = image.height, image.width
    if H < 7 or W < 7:
        return []
    a = image.pixels.astype(np.int32)
    center = a[3:H - 3, 3:W - 3]
    diffs = np.stack([a[3 + dy:H - 3 + dy, 3 + dx:W - 3 + dx] - center
                      for dx, dy in FAST_CIRCLE])
    brighter = diffs > threshold
    darker = diffs < -threshold
    is_b = _arc_qualifies(brighter)
    is_d = _arc_qualifies(darker)
    adiff = np.abs(diffs)
    score_valid = (np.where(is_b, (adiff * brighter).sum(axis=0), 0)
                   + np.where(is_d, (adiff * darker).sum(axis=0), 0))

    score = np.zeros((H, W), dtype=np.int64)
    score[3:H - 3, 3:W - 3] = score_valid
    keep = score > 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb = np.zeros_like(score)
            ys = slice(max(0, -dy), H - max(0, dy))
            yd = slice(max(0, dy), H - max(0, -dy))
            xs = slice(max(0, -dx), W - max(0, dx))
            xd = slice(max(0, dx), W - max(0, -dx))
            nb[ys, xs] = score[yd, xd]
            earlier = dy < 0 or (dy == 0 and dx < 0)
            keep &= (score > nb) if earlier else (score >= nb)
    ys_idx, xs_idx = np.nonzero(keep)
    return [Corner(int(x), int(y), int(score[y, x]))
            for y, x in zip(ys_idx, xs_idx)]


_DESCRIPTOR_PAIRS: Optional[np.ndarray] = None


def _descriptor_pairs() -> np.ndarray:
    """256 fixed (ax, ay, bx, by) offsets drawn once from a seeded uniform."""
    global _DESCRIPTOR_PAIRS
    if _DESCRIPTOR_PAIRS is None:
        rng = np.random.default_rng(DESCRIPTOR_PATTERN_SEED)
        _DESCRIPTOR_PAIRS = rng.integers(
            -DESCRIPTOR_PATCH_HALF, DESCRIPTOR_PATCH_HALF + 1,
            size=(DESCRIPTOR_BITS, 4))
    return _DESCRIPTOR_PAIRS


def extract_descriptors(image: SyntheticImage,
                        corners: List[Corner]) -> List[Descriptor]:
    """256-bit intensity-comparison descriptors over a box-smoothed patch.

    bit_i = 1 iff smoothed(a_i) < smoothed(b_i), strictly. Corners too close
    to the border for the full smoothed patch are skipped.
    """
    H, W = image.height, image.width
    margin = DESCRIPTOR_PATCH_HALF + _SMOOTH_HALF
    usable = [c for c in corners
              if margin <= c.x < W - margin and margin <= c.y < H - margin]
    if not usable:
        return []
    # exact integer 5x5 box sums; S[y, x] covers pixels [y, y+4] x [x, x+4]
    ii = np.zeros((H + 1, W + 1), dtype=np.int64)
    ii[1:, 1:] = np.cumsum(np.cumsum(image.pixels, axis=0), axis=1)
    box = (ii[5:, 5:] - ii[:-5, 5:] - ii[5:, :-5] + ii[:-5, :-5])
    # box[y, x] = sum of the 5x5 window centered at (x+2, y+2)
    pairs = _descriptor_pairs()
    cx = np.array([c.x for c in usable])
    cy = np.array([c.y for c in usable])
    ax = cx[:, None] + pairs[None, :, 0] - _SMOOTH_HALF
    ay = cy[:, None] + pairs[None, :, 1] - _SMOOTH_HALF
    bx = cx[:, None] + pairs[None, :, 2] - _SMOOTH_HALF
    by = cy[:, None] + pairs[None, :, 3] - _SMOOTH_HALF
    bits = box[ay, ax] < box[by, bx]
    packed = np.packbits(bits, axis=1)
    return [Descriptor(packed[i].tobytes(), c) for i, c in enumerate(usable)]


_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int32)


def _hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _POPCOUNT[a[:, None, :] ^ b[None, :, :]].sum(axis=2)


def match_against_reference(scene: List[Descriptor],
                            reference: List[Descriptor]) -> MatchReport:
    """Mutual-nearest-neighbour Hamming matching against the reference set.

    Scene descriptors are canonically ordered internally, so the report is
    invariant under permutation of the scene list.
    """
    if not reference:
        raise InvalidArgumentError("reference descriptor set is empty")
    if not scene:
        return MatchReport(0, len(reference))
    scene = sorted(scene, key=lambda d: (d.bits, d.anchor.x, d.anchor.y))
    s = np.frombuffer(b"".join(d.bits for d in scene),
                      dtype=np.uint8).reshape(len(scene), -1)
    r = np.frombuffer(b"".join(d.bits for d in reference),
                      dtype=np.uint8).reshape(len(reference), -1)
    dist = _hamming_matrix(s, r)
    nn_of_scene = dist.argmin(axis=1)
    nn_of_ref = dist.argmin(axis=0)
    matched = 0
    for i, j in enumerate(nn_of_scene):
        if nn_of_ref[j] == i and dist[i, j] <= MATCH_HAMMING_THRESHOLD:
            matched += 1
    return MatchReport(matched, len(reference))


def _bimodal_threshold(p: np.ndarray) -> float:
    """Mean-of-class-means threshold iterated to fixpoint.

    Initialized at the midpoint of the intensity range; a mean init collapses
    into the dominant mode when the background covers most of the image.
    """
    t = (float(p.min()) + float(p.max())) / 2.0
    for _ in range(100):
        lo = p[p < t]
        hi = p[p >= t]
        if lo.size == 0 or hi.size == 0:
            return t
        t_new = (float(lo.mean()) + float(hi.mean())) / 2.0
        if abs(t_new - t) < 0.5:
            return t_new
        t = t_new
    return t


def crop_to_marker_roi(image: SyntheticImage) -> SyntheticImage:
    """Bounding box of the largest dark blob (the marker frame), padded.

    Returns the full image when no dark component exceeds the minimum area.
    """
    p = image.pixels.astype(np.float64)
    t = _bimodal_threshold(p)
    dark = p < t
    labels, n = ndimage.label(dark, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return image
    areas = np.bincount(labels.ravel())
    areas[0] = 0
    best = int(areas.argmax())
    if areas[best] <= ROI_MIN_COMPONENT_AREA:
        return image
    ys, xs = np.nonzero(labels == best)
    y0 = max(0, int(ys.min()) - ROI_MARGIN_PX)
    y1 = min(image.height, int(ys.max()) + 1 + ROI_MARGIN_PX)
    x0 = max(0, int(xs.min()) - ROI_MARGIN_PX)
    x1 = min(image.width, int(xs.max()) + 1 + ROI_MARGIN_PX)
    crop = image.pixels[y0:y1, x0:x1]
    return SyntheticImage(x1 - x0, y1 - y0, crop.copy(), image.seed)


def classify_texture(metrics: ImageMetrics) -> TextureClass:
    """Fine iff strictly more than the corner threshold at canonical resolution."""
    if metrics.corner_count > FINE_TEXTURE_CORNER_THRESHOLD:
        return TextureClass.FINE
    return TextureClass.COARSE


def detect_scene_change(previous: ImageMetrics, current: ImageMetrics,
                        *, brightness_delta: float = SCENE_CHANGE_BRIGHTNESS_DELTA,
                        edge_ratio: float = SCENE_CHANGE_EDGE_RATIO,
                        corner_delta: int = SCENE_CHANGE_CORNER_DELTA) -> bool:
    if abs(current.brightness - previous.brightness) > brightness_delta:
        return True
    rel = abs(current.edge_strength - previous.edge_strength) / max(previous.edge_strength, 1.0)
    if rel > edge_ratio:
        return True
    return abs(current.corner_count - previous.corner_count) > corner_delta
