"""Procedural indoor scene model: region textures, light-dependent imaging,
and emulated smart-bulb / E-Ink marker actuators.

All randomness is drawn from explicit seeds so renders and sensor reads are
bit-reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import InvalidArgumentError, NotFoundError

# Camera response saturates at this illuminance (linear below).
LIGHT_SATURATION_LUX = 500.0
# Shot-noise-like model: sigma grows as light drops.
NOISE_SIGMA0 = 4.0
NOISE_LUX_FLOOR = 10.0
SENSOR_NOISE_FRACTION = 0.02

MARKER_PATTERNS = ("binary-grid-A", "binary-grid-B", "image-uniform", "image-nonuniform")
# Rendered side length (px) per size index at the reference viewing distance.
MARKER_BASE_SIDE_PX = (120, 180, 260)
MARKER_REFERENCE_DISTANCE_CM = 30.0

DEFAULT_BULB_LATENCY_S = 0.4
DEFAULT_EINK_LATENCY_S = 1.0

TEXTURE_KINDS = ("flat", "checkerboard", "stripes", "speckle", "marker-grid")


@dataclass(frozen=True)
class TextureSpec:
    kind: str
    value: float = 0.5          # flat
    low: float = 0.1            # two-tone / speckle range
    high: float = 0.9
    cell: int = 8               # checkerboard / stripes / marker-grid cell size, px
    frequency: float = 0.5      # speckle: blocks per pixel (block side = round(1/frequency))
    texture_seed: int = 7       # fixed realization for speckle / marker-grid

    def __post_init__(self):
        if self.kind not in TEXTURE_KINDS:
            raise InvalidArgumentError(f"unknown texture kind {self.kind!r}")
        for v in (self.value, self.low, self.high):
            if not (0.0 <= v <= 1.0):
                raise InvalidArgumentError("texture intensities must be in [0,1]")
        if self.cell < 1:
            raise InvalidArgumentError("cell size must be >= 1 px")
        if self.frequency <= 0:
            raise InvalidArgumentError("speckle frequency must be > 0")


@dataclass(frozen=True)
class MarkerSpec:
    pattern: str
    size_index: int

    def __post_init__(self):
        if self.pattern not in MARKER_PATTERNS:
            raise InvalidArgumentError(f"unknown marker pattern {self.pattern!r}")
        if self.size_index not in (0, 1, 2):
            raise InvalidArgumentError("size_index must be 0, 1 or 2")


@dataclass
class MarkerPlacement:
    spec: MarkerSpec
    distance_cm: float = MARKER_REFERENCE_DISTANCE_CM
    viewing_angle_deg: float = 0.0

    def __post_init__(self):
        if self.distance_cm <= 0:
            raise InvalidArgumentError("marker distance must be > 0")
        if not (0.0 <= self.viewing_angle_deg < 90.0):
            raise InvalidArgumentError("viewing angle must be in [0, 90)")


@dataclass
class Region:
    id: str
    texture: TextureSpec
    illuminance: float
    marker: Optional[MarkerPlacement] = None
    max_lux: Optional[float] = None  # physical cap; None = uncapped

    def __post_init__(self):
        if self.illuminance < 0:
            raise InvalidArgumentError("illuminance must be >= 0")


@dataclass(frozen=True)
class SyntheticImage:
    width: int
    height: int
    pixels: np.ndarray  # uint8, shape (height, width), row-major
    seed: int = 0

    def to_pgm(self) -> bytes:
        header = f"P5\n{self.width} {self.height}\n255\n".encode("ascii")
        return header + self.pixels.tobytes()

    @staticmethod
    def from_pgm(data: bytes, seed: int = 0) -> "SyntheticImage":
        if not data.startswith(b"P5"):
            raise InvalidArgumentError("not a binary PGM (P5) file")
        # header: magic, width, height, maxval, then raw pixels
        fields = []
        pos = 2
        while len(fields) < 3:
            while pos < len(data) and data[pos] in b" \t\r\n":
                pos += 1
            if pos < len(data) and data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos] not in b"\r\n":
                    pos += 1
                continue
            start = pos
            while pos < len(data) and data[pos] not in b" \t\r\n":
                pos += 1
            if start == pos:
                raise InvalidArgumentError("truncated PGM header")
            fields.append(data[start:pos])
        pos += 1  # single whitespace after maxval
        try:
            width, height, maxval = (int(f) for f in fields)
        except ValueError:
            raise InvalidArgumentError("malformed PGM header")
        if maxval != 255 or width < 1 or height < 1:
            raise InvalidArgumentError("unsupported PGM dimensions or maxval")
        raw = data[pos:pos + width * height]
        if len(raw) != width * height:
            raise InvalidArgumentError("truncated PGM pixel data")
        pixels = np.frombuffer(raw, dtype=np.uint8).reshape(height, width)
        return SyntheticImage(width, height, pixels.copy(), seed)


@dataclass
class BulbState:
    brightness_command: float = 0.0
    actuation_latency: float = DEFAULT_BULB_LATENCY_S

    def __post_init__(self):
        if not (0.0 <= self.brightness_command <= 100.0):
            raise InvalidArgumentError("brightness command must be in [0,100]")


@dataclass
class EInkState:
    displayed: MarkerSpec
    update_latency: float = DEFAULT_EINK_LATENCY_S

    def __post_init__(self):
        if self.update_latency <= 0:
            raise InvalidArgumentError("update latency must be > 0")


class LuxCurve:
    """Monotone piecewise-linear map from bulb command percent to lux."""

    def __init__(self, points):
        pts = sorted((float(c), float(l)) for c, l in points)
        if len(pts) < 2:
            raise InvalidArgumentError("lux curve needs >= 2 points")
        cmds = [p[0] for p in pts]
        luxes = [p[1] for p in pts]
        if any(b <= a for a, b in zip(cmds, cmds[1:])):
            raise InvalidArgumentError("curve commands must be strictly increasing")
        if any(b < a for a, b in zip(luxes, luxes[1:])):
            raise InvalidArgumentError("curve lux values must be non-decreasing")
        self.points = pts
        self._cmds = np.array(cmds)
        self._luxes = np.array(luxes)

    def lux_at(self, command: float) -> float:
        return float(np.interp(command, self._cmds, self._luxes))


DEFAULT_LUX_CURVE = LuxCurve([(0.0, 10.0), (100.0, 1000.0)])


@dataclass
class EnvironmentState:
    regions: dict
    lux_curve: LuxCurve = field(default_factory=lambda: DEFAULT_LUX_CURVE)

    def __post_init__(self):
        ids = list(self.regions)
        if len(ids) != len(set(ids)):
            raise InvalidArgumentError("region ids must be unique")

    def region(self, region_id: str) -> Region:
        try:
            return self.regions[region_id]
        except KeyError:
            raise NotFoundError(f"unknown region {region_id!r}")


def light_response(lux: float) -> float:
    return min(lux / LIGHT_SATURATION_LUX, 1.0)


def noise_sigma(lux: float, sigma0: float = NOISE_SIGMA0) -> float:
    return sigma0 * math.sqrt(LIGHT_SATURATION_LUX / max(lux, NOISE_LUX_FLOOR))


def texture_field(spec: TextureSpec, width: int, height: int) -> np.ndarray:
    """Reflectance field in [0,1], shape (height, width)."""
    if spec.kind == "flat":
        return np.full((height, width), spec.value)
    xs = np.arange(width)
    ys = np.arange(height)
    if spec.kind == "checkerboard":
        parity = (xs[None, :] // spec.cell + ys[:, None] // spec.cell) % 2
        return np.where(parity == 0, spec.low, spec.high)
    if spec.kind == "stripes":
        parity = np.broadcast_to((xs // spec.cell) % 2, (height, width))
        return np.where(parity == 0, spec.low, spec.high)
    if spec.kind == "speckle":
        block = max(1, int(round(1.0 / spec.frequency)))
        gh = -(-height // block)
        gw = -(-width // block)
        rng = np.random.default_rng(spec.texture_seed)
        grid = rng.uniform(spec.low, spec.high, size=(gh, gw))
        return np.kron(grid, np.ones((block, block)))[:height, :width]
    # marker-grid: random binary cells, a dense fiducial-like background
    rng = np.random.default_rng(spec.texture_seed)
    gh = -(-height // spec.cell)
    gw = -(-width // spec.cell)
    bits = rng.integers(0, 2, size=(gh, gw))
    grid = np.where(bits == 0, spec.low, spec.high)
    return np.kron(grid, np.ones((spec.cell, spec.cell)))[:height, :width]


_PATTERN_SEEDS = {"binary-grid-A": 11, "binary-grid-B": 13,
                  "image-uniform": 17, "image-nonuniform": 19}
_PATTERN_CELL_CACHE: dict = {}


def _pattern_cells(pattern: str) -> np.ndarray:
    """Cell reflectances for a marker pattern, incl. quiet zone and dark frame."""
    cached = _PATTERN_CELL_CACHE.get(pattern)
    if cached is not None:
        return cached
    rng = np.random.default_rng(_PATTERN_SEEDS[pattern])
    if pattern in ("binary-grid-A", "binary-grid-B"):
        payload = np.where(rng.integers(0, 2, size=(6, 6)) == 0, 0.05, 0.95)
    elif pattern == "image-uniform":
        payload = rng.uniform(0.1, 0.9, size=(8, 8))
    else:  # image-nonuniform: features concentrated in the left half
        payload = np.full((8, 8), 0.7)
        payload[:, :4] = rng.uniform(0.05, 0.95, size=(8, 4))
    framed = np.pad(payload, 1, constant_values=0.05)   # dark frame
    cells = np.pad(framed, 1, constant_values=0.95)     # light quiet zone
    _PATTERN_CELL_CACHE[pattern] = cells
    return cells


def marker_reflectance(spec: MarkerSpec, width: int, height: int) -> np.ndarray:
    """Sample the canonical marker pattern onto a width x height raster."""
    cells = _pattern_cells(spec.pattern)
    n = cells.shape[0]
    col = np.minimum((np.arange(width) * n) // width, n - 1)
    row = np.minimum((np.arange(height) * n) // height, n - 1)
    return cells[np.ix_(row, col)]


def marker_patch_size(placement: MarkerPlacement) -> tuple:
    """Rendered (width, height) of the marker patch in scene pixels."""
    side = MARKER_BASE_SIDE_PX[placement.spec.size_index] * (
        MARKER_REFERENCE_DISTANCE_CM / placement.distance_cm)
    h = max(2, int(round(side)))
    w = max(2, int(round(side * math.cos(math.radians(placement.viewing_angle_deg)))))
    return w, h


def render_region(region: Region, camera_seed: int, width: int, height: int,
                  *, sigma0: float = NOISE_SIGMA0) -> SyntheticImage:
    """Image the region under its current illuminance.

    pixel = clip(round(T * 255 * L(lux)) + noise) with seed-deterministic
    Gaussian noise; sigma0=0 disables noise.
    """
    if width < 32 or height < 32:
        raise InvalidArgumentError("render dimensions must be >= 32 px")
    field_ = texture_field(region.texture, width, height)
    if region.marker is not None:
        mw, mh = marker_patch_size(region.marker)
        mw, mh = min(mw, width), min(mh, height)
        patch = marker_reflectance(region.marker.spec, mw, mh)
        y0 = (height - mh) // 2
        x0 = (width - mw) // 2
        field_ = field_.copy()
        field_[y0:y0 + mh, x0:x0 + mw] = patch
    base = np.rint(field_ * 255.0 * light_response(region.illuminance))
    if sigma0 > 0:
        rng = np.random.default_rng(camera_seed)
        noise = rng.normal(0.0, noise_sigma(region.illuminance, sigma0),
                           size=(height, width))
        base = np.rint(base + noise)
    pixels = np.clip(base, 0, 255).astype(np.uint8)
    return SyntheticImage(width, height, pixels, camera_seed)


def read_light_sensor(region: Region, seed: int,
                      *, noise_fraction: float = SENSOR_NOISE_FRACTION) -> float:
    """Ambient light sensor read with +/-noise_fraction multiplicative error."""
    if noise_fraction <= 0:
        return region.illuminance
    rng = np.random.default_rng(seed)
    e = rng.uniform(-noise_fraction, noise_fraction)
    return region.illuminance * (1.0 + e)


def apply_bulb_command(state: BulbState, env: EnvironmentState,
                       region_id: str) -> EnvironmentState:
    """Apply a settled bulb command to a region's illuminance.

    Timing (actuation latency) is the caller's concern; the simulator invokes
    this once the latency has elapsed on its clock.
    """
    region = env.region(region_id)
    lux = env.lux_curve.lux_at(state.brightness_command)
    if region.max_lux is not None:
        lux = min(lux, region.max_lux)
    region.illuminance = lux
    return env


def apply_eink_update(state: EInkState, spec: MarkerSpec) -> EInkState:
    """Settled E-Ink update. Identical spec is a no-op (same object returned)."""
    if spec == state.displayed:
        return state
    return replace(state, displayed=spec)
